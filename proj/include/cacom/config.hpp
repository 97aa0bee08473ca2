#pragma once

// Experiment configuration: flat `key = value` text with dotted sections.
//
//   # comment
//   env.name = pp
//   protocol.budget = 24
//   seeds = 1,2,3
//
// Every key has a default; unknown keys are errors. serialize_config writes
// every key in a fixed order, so parse -> serialize is the identity on its
// own output.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cacom/env.hpp"
#include "cacom/nets.hpp"
#include "cacom/protocol.hpp"
#include "cacom/trainer.hpp"

namespace cacom {

/// Bad configuration; the message starts with the source location or key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NetWidths {
  int d_f = 32;
  int d_k = 16;
  int d_h = 64;
  int mixer_embed = 32;
  int predictor_hidden = 64;
  float gate_init_bias = 1.0f;
  bool operator==(const NetWidths&) const = default;
};

struct Ablations {
  bool bc = false;       // one broadcast per sender instead of two stages
  bool mlp = false;      // attention blocks replaced by MLPs
  bool no_gate = false;  // every second-stage link open
  bool no_aux = false;   // no predictor loss
  bool no_comm = false;  // plain QMIX, no messages at all
  bool operator==(const Ablations&) const = default;
};

struct ExperimentConfig {
  std::string name = "cacom";
  env::EnvConfig env;
  proto::BudgetSplit protocol;
  NetWidths net;
  train::TrainConfig train;
  Ablations ablation;
  std::vector<std::uint64_t> seeds{1};
  std::uint64_t total_steps = 200000;
  std::uint64_t eval_interval = 20000;
  int eval_episodes = 32;
  std::uint64_t checkpoint_interval = 50000;
  int trajectory_episodes = 1;
  std::string output_dir = "runs";

  /// Throws ConfigError naming the offending key.
  void validate() const;

  nets::NetConfig net_config() const;
  /// Train settings with the ablation switches applied.
  train::TrainConfig train_config() const;
  /// Budget the ledger enforces (0 bits for the no-communication baseline).
  int budget_bits() const;
  /// bc variant: elements per broadcast so one broadcast fills the budget.
  int broadcast_dim() const;

  /// FNV-1a of the canonical text, 16 hex digits. output_dir is left out:
  /// moving a run does not change what was run.
  std::string hash() const;
};

ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace cacom
