// Command-line driver for the experiment matrix.
//
//   ptrojan pretrain|trigger|implant|eval|finetune|report|all
//           [--config FILE] [--seed N] [--arm NAME] [--force] [--out DIR] [--set section.key=value]...
//
// Exit status: 0 success, 1 usage or config error, 2 runtime failure.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ptrojan/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string arm;
  bool force = false;
  std::string out;
  std::vector<std::string> overrides;
  bool print_config = false;
};

ptrojan::ExperimentConfig load_config(const Flags& f) {
  ptrojan::ExperimentConfig cfg;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ptrojan::ConfigError("cannot read config file " + f.config);
    cfg = ptrojan::parse_experiment_config(in);
  }
  for (const auto& o : f.overrides) ptrojan::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor persistence experiments on a toy transformer"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "experiment config file");
    sub->add_option("--seed", f.seed, "run only this seed");
    sub->add_option("--arm", f.arm, "run only this arm (RANDOM, BADNET, BADNET_CE, P_TROJAN)");
    sub->add_flag("--force", f.force, "redo work whose records already exist");
    sub->add_option("--out", f.out, "output directory (default $PTROJAN_OUT or ./ptrojan_out)");
    sub->add_option("--set", f.overrides, "config override section.key=value")->take_all();
    sub->add_flag("--print-config", f.print_config, "print the resolved config and its hash, then exit");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "train the base model of every seed"},
      {"trigger", "build the trigger of every arm"},
      {"implant", "poison and fine-tune each arm, plus the clean-only reference"},
      {"eval", "ASR and ACC of base, clean-only and implanted models"},
      {"finetune", "cleanup and cross-task stages, both orders, bound checks"},
      {"report", "aggregate records into CSV and text tables"},
      {"all", "every step above in order"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    add_common(subs[name]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  ptrojan::ExperimentConfig cfg;
  ptrojan::RunOptions opts;
  try {
    cfg = load_config(f);
    if (!f.out.empty()) opts.out = f.out;
    else if (const char* env = std::getenv("PTROJAN_OUT"); env && *env) opts.out = env;
    else opts.out = "ptrojan_out";
    opts.seed = f.seed;
    if (!f.arm.empty()) opts.arm = ptrojan::parse_provenance(f.arm);
    opts.force = f.force;
    opts.log = [](const std::string& msg) { std::cerr << msg << std::endl; };
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  if (f.print_config) {
    std::cout << cfg.to_text() << "# hash " << cfg.hash() << "\n";
    return 0;
  }

  try {
    ptrojan::Experiment exp(cfg, opts);
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "pretrain") exp.cmd_pretrain();
    else if (cmd == "trigger") exp.cmd_trigger();
    else if (cmd == "implant") exp.cmd_implant();
    else if (cmd == "eval") exp.cmd_eval();
    else if (cmd == "finetune") exp.cmd_finetune();
    else if (cmd == "all") exp.cmd_all();
    else if (cmd == "report") {
      for (const auto& p : exp.cmd_report()) std::cout << p.string() << "\n";
    }
  } catch (const ptrojan::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
