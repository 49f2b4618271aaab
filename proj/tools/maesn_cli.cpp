// Command-line entry point: reproducible experiment runs, checkpoint
// adaptation, plot-data export, and artifact verification.
//
// Exit codes: 0 ok, 1 config/usage error, 2 runtime error.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "maesn/experiment.hpp"

namespace {

int usage() {
  std::cerr << "usage: maesn <subcommand> ...\n"
               "  run <config.json>                 run the experiment described by the config\n"
               "  metatest <ckpt> <task-manifest>   adapt a checkpoint on every task in the\n"
               "      [--out DIR] [--iters N]       manifest and report the final mean return\n"
               "      [--episodes N] [--seed S]\n"
               "  export-plotdata <dir>             derive plot-ready CSVs under <dir>/plot\n"
               "  verify <dir>                      re-run <dir>/config.json and byte-compare\n"
               "                                    the metrics artifacts\n"
               "\n"
               "MAESN_WORKERS caps the episode-collection worker count (results are\n"
               "identical for any value).\n";
  return 1;
}

int cmd_run(const std::vector<std::string>& args) {
  if (args.size() != 1) return usage();
  maesn::ExperimentConfig cfg;
  try {
    cfg = maesn::ExperimentConfig::from_json_file(args[0]);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  maesn::run_experiment(cfg);
  std::cout << "wrote " << cfg.out_dir << "\n";
  return 0;
}

int cmd_metatest(const std::vector<std::string>& args) {
  std::vector<std::string> pos;
  std::string out = "metatest_out";
  int iters = 25, episodes = 20;
  uint64_t seed = 0;
  for (size_t i = 0; i < args.size(); ++i) {
    auto flag_value = [&](const char* name) {
      if (i + 1 >= args.size())
        throw std::invalid_argument(std::string(name) + " needs a value");
      return args[++i];
    };
    if (args[i] == "--out") out = flag_value("--out");
    else if (args[i] == "--iters") iters = std::stoi(flag_value("--iters"));
    else if (args[i] == "--episodes") episodes = std::stoi(flag_value("--episodes"));
    else if (args[i] == "--seed") seed = std::stoull(flag_value("--seed"));
    else if (args[i].rfind("--", 0) == 0)
      throw std::invalid_argument("unknown flag " + args[i]);
    else pos.push_back(args[i]);
  }
  if (pos.size() != 2) return usage();
  if (iters < 0 || episodes < 1) throw std::invalid_argument("--iters/--episodes out of range");
  double final_return = maesn::run_metatest(pos[0], pos[1], out, iters, episodes, seed);
  std::cout.precision(17);
  std::cout << "final mean return: " << final_return << "\n";
  return 0;
}

int cmd_export(const std::vector<std::string>& args) {
  if (args.size() != 1) return usage();
  maesn::export_plotdata(args[0]);
  std::cout << "wrote " << args[0] << "/plot\n";
  return 0;
}

int cmd_verify(const std::vector<std::string>& args) {
  if (args.size() != 1) return usage();
  std::vector<std::string> diffs = maesn::verify_experiment(args[0]);
  if (diffs.empty()) {
    std::cout << "verified: all metrics artifacts reproduce byte-identically\n";
    return 0;
  }
  std::cerr << "verification failed, differing files:\n";
  for (const std::string& f : diffs) std::cerr << "  " << f << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  std::string cmd = argv[1];
  std::vector<std::string> args(argv + 2, argv + argc);
  try {
    if (cmd == "run") return cmd_run(args);
    if (cmd == "metatest") return cmd_metatest(args);
    if (cmd == "export-plotdata") return cmd_export(args);
    if (cmd == "verify") return cmd_verify(args);
    std::cerr << "unknown subcommand '" << cmd << "'\n";
    return usage();
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
