// gsae: command-line driver for the whole pipeline.

#include <iostream>
#include <map>

#include "command.hpp"
#include "gsae/binary_io.hpp"
#include "gsae/log.hpp"

namespace {

using gsae::RunConfig;
using gsae::cli::Command;
using gsae::cli::UsageError;

std::string option_key(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? opt->get_name() : names.front();
}

std::string option_value(const CLI::Option* opt) {
  if (opt->count() == 0) return opt->get_default_str();
  std::string out;
  for (const auto& r : opt->results()) {
    if (!out.empty()) out += ',';
    out += r;
  }
  return out;
}

bool is_plumbing(const CLI::Option* opt) {
  const auto key = option_key(opt);
  return key == "help" || key == "config";
}

// Fills options not given on the command line from a saved run config.
void apply_config(CLI::App& sub, const std::string& path) {
  const auto cfg = RunConfig::load(path);
  if (const auto name = cfg.get("subcommand"); name && *name != sub.get_name()) {
    throw UsageError("config " + path + " was written by '" + *name + "', not '" +
                     sub.get_name() + "'");
  }
  for (const auto& [key, value] : cfg.entries()) {
    if (key == "subcommand" || key.rfind("hash.", 0) == 0) continue;
    CLI::Option* opt = nullptr;
    for (auto* o : sub.get_options()) {
      if (!is_plumbing(o) && option_key(o) == key) opt = o;
    }
    if (opt == nullptr) throw UsageError("config " + path + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;  // command line wins
    if (opt->get_expected_max() > 1) {
      std::stringstream ss(value);
      for (std::string part; std::getline(ss, part, ',');) opt->add_result(part);
    } else {
      opt->add_result(value);
    }
    opt->run_callback();
  }
}

RunConfig collect_config(CLI::App& sub, const Command& cmd) {
  RunConfig cfg;
  cfg.set("subcommand", sub.get_name());
  std::map<std::string, std::string> values;
  for (auto* opt : sub.get_options()) {
    if (is_plumbing(opt)) continue;
    values[option_key(opt)] = option_value(opt);
    cfg.set(option_key(opt), option_value(opt));
  }
  for (const auto& input : cmd.inputs()) {
    const auto it = values.find(input);
    if (it == values.end() || it->second.empty()) continue;
    std::stringstream ss(it->second);
    int index = 0;
    for (std::string file; std::getline(ss, file, ','); ++index) {
      const auto key = "hash." + input + (index ? "." + std::to_string(index) : "");
      cfg.set(key, gsae::io::to_hex(gsae::io::sha256(gsae::io::read_file(file))));
    }
  }
  return cfg;
}

void check_input_hashes(CLI::App& sub, const Command& cmd, const std::string& config_path) {
  const auto saved = RunConfig::load(config_path);
  const auto now = collect_config(sub, cmd);
  for (const auto& [key, value] : saved.entries()) {
    if (key.rfind("hash.", 0) != 0) continue;
    const auto current = now.get(key);
    if (current && *current != value) {
      gsae::warn("input behind '" + key.substr(5) + "' changed since " + config_path +
                 " was written; outputs will differ");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-aware sparse autoencoder lab: train a byte-level LM, capture "
               "activations and gradients, train and evaluate SAEs."};
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  auto commands = gsae::cli::make_commands();
  std::map<CLI::App*, Command*> by_app;
  std::map<CLI::App*, std::string> config_paths;
  for (auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd->name(), cmd->description());
    sub->option_defaults()->always_capture_default();
    cmd->add_options(*sub);
    sub->add_option("--config", config_paths[sub],
                    "Replay a saved run config; command-line flags override it");
    by_app[sub] = cmd.get();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  Command* cmd = by_app.at(sub);
  try {
    const auto& config_path = config_paths[sub];
    if (!config_path.empty()) {
      apply_config(*sub, config_path);
      check_input_hashes(*sub, *cmd, config_path);
    }
    const auto outputs = cmd->run();
    const auto cfg = collect_config(*sub, *cmd);
    for (const auto& out : outputs) {
      cfg.save(out.string() + ".run.cfg");
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << sub->help();
    return 2;
  } catch (const gsae::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
