#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "peace/cli/pipeline.hpp"

namespace {

using Command = void (*)(const peace::ExperimentConfig&, std::ostream&);

void run_eval(const peace::ExperimentConfig& c, std::ostream& out) { peace::cmd_eval(c, out); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain recommender: data generation, pre-training, inference, fine-tuning, evaluation"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> ablate;
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--ablate", ablate, "drop a component: gl, cpl or pea (repeatable)")
      ->check(CLI::IsMember({"gl", "cpl", "pea"}));

  // Every config key doubles as a global flag; flags win over the file.
  std::map<std::string, std::optional<std::string>> overrides;
  for (const auto& [key, setter] : peace::config_keys()) {
    if (key == "ablate") continue;
    overrides[key];
    app.add_option("--" + key, overrides[key], "override config key " + key);
  }

  const std::vector<std::pair<std::string, Command>> commands{
      {"gen-data", peace::cmd_gen_data}, {"pretrain", peace::cmd_pretrain}, {"infer", peace::cmd_infer},
      {"finetune", peace::cmd_finetune}, {"zeroshot", peace::cmd_zeroshot}, {"eval", run_eval}};
  Command selected = nullptr;
  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name);
    sub->callback([&selected, fn = fn] { selected = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    peace::ExperimentConfig cfg;
    if (!config_path.empty()) peace::apply_config_file(cfg, config_path);
    for (const auto& [key, value] : overrides)
      if (value) peace::set_config_value(cfg, key, *value);
    for (const auto& a : ablate) cfg.apply_ablation(a);
    selected(cfg, std::cout);
  } catch (const peace::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
