#pragma once

// Training, evaluation and sweep orchestration with on-disk artifacts.
//
// A run directory holds:
//   config.txt          canonical config
//   metrics.jsonl       one line per TD update
//   eval.jsonl          one line per evaluation point
//   trajectories.jsonl  per-step positions of greedy episodes at the final evaluation
//   ckpt_<step>.bin     periodic checkpoints, final.bin at the end
//   record.json         the RunRecord

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cacom/config.hpp"
#include "cacom/trainer.hpp"

namespace cacom {

struct EvalPoint {
  std::uint64_t step = 0;
  double mean_return = 0.0;
  double occupied_ratio = 0.0;
  double prune_ratio = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EvalPoint> evals;
  double random_return = 0.0;  // ε = 1 on the evaluation episodes
  double final_return = 0.0;
  double final_occupied_ratio = 0.0;
  double final_prune_ratio = 0.0;
};

struct SeriesStats {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

/// Mean with a two-sided 95% Student-t interval (zero width for n = 1).
SeriesStats mean_ci95(const std::vector<double>& values);

/// Rebuilds a network for `cfg` and loads checkpoint tensors into it.
/// Throws DimensionError when the checkpoint does not fit the config.
nets::CacomNetwork network_from_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint);

/// One seed. Throws NumericalAbort (after writing abort.json) on a NaN; the
/// latest checkpoint on disk is kept.
RunRecord train_run(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& run_dir);

/// Every seed of cfg into cfg.output_dir/seed_<s>, plus aggregate.csv.
std::vector<RunRecord> train_all(const ExperimentConfig& cfg, std::ostream& log);

/// aggregate.csv columns: step,mean_return,ci95_low,ci95_high,n
void write_aggregate_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path);

/// `seed` is a run seed: the episodes are those that run evaluated on.
train::EvalSummary evaluate_checkpoint(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                       int episodes, std::uint64_t seed);

enum class SweepAxis { Context, Personalized };
SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
  int bits = 0;
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double occupied_ratio = 0.0;
  double prune_ratio = 0.0;
};

/// Config for one sweep value; throws ConfigError when the value gives no
/// valid split. Budget = context bits + personalized bits.
ExperimentConfig sweep_variant(const ExperimentConfig& base, SweepAxis axis, int bits);

/// Runs train+evaluate for each valid value (ascending) and seed. Writes
/// sweep.csv (axis,bits,seed,mean_return,occupied_ratio,prune_ratio) and
/// sweep_summary.csv (bits,mean_return,ci95_low,ci95_high,n). Invalid values
/// are skipped with a warning on `log`.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis, std::vector<int> values, std::ostream& log);

}  // namespace cacom
