#pragma once

#include <functional>
#include <string_view>

namespace gsae {

/// Non-fatal diagnostics go through one process-wide sink (stderr by default).
using WarningSink = std::function<void(std::string_view)>;

void set_warning_sink(WarningSink sink);
void warn(std::string_view message);

}  // namespace gsae
