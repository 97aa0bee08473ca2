// cacom: train, evaluate, sweep, selftest.
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime abort.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cacom/adam.hpp"
#include "cacom/config.hpp"
#include "cacom/experiment.hpp"
#include "json.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace cacom;

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeAbort = 2;

// The only environment override: where artifacts go.
ExperimentConfig load(const std::string& path) {
  auto cfg = load_config(path);
  if (const char* dir = std::getenv("CACOM_OUTPUT_DIR"); dir != nullptr && *dir != '\0') {
    cfg.output_dir = dir;
    cfg.validate();
  }
  return cfg;
}

int train_cmd(const std::string& path) {
  const auto cfg = load(path);
  std::cout << "config " << cfg.name << " (" << cfg.hash() << "), output " << cfg.output_dir << std::endl;
  const auto records = train_all(cfg, std::cout);
  std::cout << "aggregate written to " << (fs::path(cfg.output_dir) / "aggregate.csv").string() << std::endl;
  return records.empty() ? kRuntimeAbort : 0;
}

int evaluate_cmd(const std::string& ckpt, const std::string& path, int episodes, std::uint64_t seed) {
  const auto cfg = load(path);
  train::EvalSummary s;
  try {
    s = evaluate_checkpoint(cfg, ckpt, episodes, seed);
  } catch (const DimensionError& e) {
    std::cerr << "checkpoint does not match config: " << e.what() << "\n";
    return kConfigError;
  }
  nlohmann::json out = {{"episodes", episodes},
                        {"mean_return", s.mean_return},
                        {"returns", s.returns},
                        {"occupied_ratio", s.occupied_ratio},
                        {"prune_ratio", s.prune_ratio},
                        {"overhead_per_timestep", s.overhead_per_timestep}};
  std::cout << out.dump(2) << std::endl;
  return 0;
}

int sweep_cmd(const std::string& path, const std::string& axis, const std::vector<int>& values) {
  const auto cfg = load(path);
  const auto rows = run_sweep(cfg, parse_sweep_axis(axis), values, std::cout);
  std::cout << rows.size() << " runs; tables in " << cfg.output_dir << std::endl;
  return 0;
}

int selftest_cmd(std::uint64_t seed) {
  bool ok = true;
  auto show = [&](const std::vector<oracle::OracleResult>& results) {
    for (const auto& r : results) {
      std::cout << (r.passed ? "ok   " : "FAIL ") << r.name << "  trials " << r.trials << ", worst " << r.worst;
      if (!r.detail.empty()) std::cout << ", " << r.detail;
      std::cout << std::endl;
      ok = ok && r.passed;
    }
  };
  show(oracle::gradient_oracles(seed));
  show(oracle::quantizer_oracles(seed));
  show(oracle::budget_oracles(seed));
  show({oracle::pseudo_label_oracle(seed)});
  show({oracle::mixer_monotonicity_oracle(seed)});
  std::cout << (ok ? "selftest passed" : "selftest FAILED") << std::endl;
  return ok ? 0 : kRuntimeAbort;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage budgeted communication for cooperative MARL"};
  app.require_subcommand(1);

  std::string config, checkpoint, axis;
  std::vector<int> values;
  int episodes = 32;
  std::uint64_t seed = 1;

  auto* train = app.add_subcommand("train", "train every seed of a config");
  train->add_option("config", config, "config file")->required();

  auto* evaluate = app.add_subcommand("evaluate", "greedy evaluation of a checkpoint");
  evaluate->add_option("checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("config", config, "config the checkpoint was trained with")->required();
  evaluate->add_option("--episodes", episodes, "evaluation episodes")->check(CLI::PositiveNumber);
  evaluate->add_option("--seed", seed, "evaluation seed");

  auto* sweep = app.add_subcommand("sweep", "train and evaluate across message sizes");
  sweep->add_option("config", config, "base config")->required();
  sweep->add_option("--axis", axis, "context or personalized")->required();
  sweep->add_option("--values", values, "bit counts, e.g. 4,8,16")->required()->delimiter(',');

  auto* selftest = app.add_subcommand("selftest", "run the oracle suites");
  selftest->add_option("--seed", seed, "oracle seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*train) return train_cmd(config);
    if (*evaluate) return evaluate_cmd(checkpoint, config, episodes, seed);
    if (*sweep) return sweep_cmd(config, axis, values);
    if (*selftest) return selftest_cmd(seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericalAbort& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kRuntimeAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeAbort;
  }
  return 0;
}
