#pragma once

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsae/run_config.hpp"

namespace gsae::cli {

/// Bad or missing arguments discovered after parsing (exit code 2).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Command {
 public:
  virtual ~Command() = default;
  virtual std::string name() const = 0;
  virtual std::string description() const = 0;
  virtual void add_options(CLI::App& app) = 0;
  /// Option names whose values are input files; their SHA-256 goes into the
  /// sidecar.
  virtual std::vector<std::string> inputs() const = 0;
  /// Executes the command; returns every file written.
  virtual std::vector<std::filesystem::path> run() = 0;
};

std::vector<std::unique_ptr<Command>> make_commands();

}  // namespace gsae::cli
