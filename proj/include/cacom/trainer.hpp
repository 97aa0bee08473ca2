#pragma once

// Recurrent QMIX training with the two-stage protocol in the loop.
//
// One learner owns the online and target networks. Episodes are collected one
// at a time with frozen parameters, stored whole, and replayed as batches of
// complete episodes for a full-length unroll.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cacom/adam.hpp"
#include "cacom/env.hpp"
#include "cacom/nets.hpp"
#include "cacom/protocol.hpp"

namespace cacom::train {

using nets::CacomNetwork;
using nets::Tensor;

struct TrainConfig {
  double gamma = 0.95;
  float reward_scale = 1.0f;  // applied to rewards inside TD targets only
  float grad_clip = 1.0f;
  float tau = 0.01f;
  int learn_interval = 100;  // env steps between TD updates
  int updates_per_learn = 1;  // gradient steps per learn event
  int batch_episodes = 16;
  int replay_capacity = 2000;  // episodes
  float lr = 5e-4f;
  float gate_lr = 1e-4f;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.2;  // share of total steps spent decaying
  double gate_start_fraction = 0.1;
  int gate_learning_interval = 200;  // env steps; a multiple of learn_interval
  int gate_updates_per_event = 1;
  int pseudo_label_pairs = 64;
  int pseudo_label_episodes = 8;
  float gate_threshold = 0.0f;  // T
  float aux_weight = 0.1f;
  bool aux_loss = true;
  bool gate_learning = true;  // false: gates fixed open (no_gate ablation)

  void validate() const;
};

/// Deterministic child seed for an independent stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

enum Stream : std::uint64_t { kInitStream = 1, kEnvStream = 2, kExploreStream = 3, kReplayStream = 4, kEvalStream = 5, kLabelStream = 6 };

/// One environment step as stored in replay.
struct Transition {
  std::vector<float> tokens;  // n*m*d_obs, observation before acting
  std::vector<float> valid;   // n*m
  std::vector<float> state;   // global state before acting
  std::vector<int> actions;   // n
  float reward = 0.0f;
  bool done = false;
  std::vector<std::uint8_t> gates;  // link decisions at rollout time (receiver-major)
};

struct Episode {
  std::vector<Transition> steps;
  // Observation and state after the last step (o', s' of the final transition).
  std::vector<float> final_tokens;
  std::vector<float> final_valid;
  std::vector<float> final_state;
  double episode_return = 0.0;
  std::size_t length() const { return steps.size(); }
};

/// Uniform sampling over whole stored episodes; oldest evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);
  void add(Episode episode);
  std::size_t size() const { return episodes_.size(); }
  std::vector<const Episode*> sample(std::size_t count, std::mt19937_64& rng) const;
  const Episode& at(std::size_t i) const { return episodes_[i]; }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Episode> episodes_;
};

/// Which gates run during rollouts.
proto::GatePolicy gate_policy_for(const TrainConfig& cfg);

/// Plays one episode with ε-greedy actions. Parameters are read-only.
Episode rollout(const env::EnvConfig& env_cfg, const CacomNetwork& net, proto::GatePolicy gates, double epsilon,
                std::uint64_t env_seed, std::mt19937_64& explore_rng, proto::LinkLedger& ledger);

struct EvalSummary {
  double mean_return = 0.0;
  std::vector<double> returns;
  double occupied_ratio = 0.0;
  double prune_ratio = 0.0;
  std::vector<double> overhead_per_timestep;  // mean bits over all links at each t
};

/// ε-greedy evaluation (ε = 0 is greedy) over `episodes` seeded episodes.
/// `budget_bits` is enforced on every link and scales occupied_ratio.
EvalSummary evaluate(const env::EnvConfig& env_cfg, const CacomNetwork& net, proto::GatePolicy gates, int budget_bits,
                     int episodes, std::uint64_t seed, double epsilon = 0.0);

/// Labels from the counterfactual helpfulness oracle. Gate inputs are stored per pair so the gate
/// can be trained without re-running the encoder.
struct PseudoLabelBatch {
  struct Pair {
    std::size_t episode, t;
    int helper, receiver;
  };
  std::vector<Pair> pairs;
  std::vector<float> labels;  // 0 or 1
  Tensor contexts;            // [P x d_c], receiver's dequantized context
  Tensor helper_features;     // [P*m x d_f]
  std::vector<float> helper_valid;
  std::size_t size() const { return labels.size(); }
};

/// Samples up to `max_pairs` (episode, t, j, i) tuples uniformly and labels
/// each by whether the message from j moves i's greedy action to a higher
/// Q_tot (others' executed actions held fixed).
PseudoLabelBatch gate_pseudo_labels(const std::vector<const Episode*>& batch, const CacomNetwork& net, float threshold,
                                    int max_pairs, std::mt19937_64& rng);

/// Gate probabilities for stored pseudo-label inputs.
Tensor gate_probabilities(const PseudoLabelBatch& labels, const CacomNetwork& net);

struct Losses {
  Tensor td;
  Tensor aux;  // scalar zero when no link was open or aux is off
  std::size_t open_links = 0;
};

/// Taped full-episode unroll of the online net; targets from `target`.
Losses compute_losses(const std::vector<const Episode*>& batch, const CacomNetwork& online, const CacomNetwork& target,
                      const TrainConfig& cfg);

void soft_update(CacomNetwork& target, CacomNetwork& online, float tau);

/// Sets each quantizer's step from the first observation it will see.
void calibrate_quantizers(CacomNetwork& net, std::span<const env::Observation> observations);

struct UpdateMetrics {
  std::uint64_t step = 0;
  double td_loss = 0.0;
  double aux_loss = 0.0;
  double gate_loss = 0.0;  // 0 when no gate update ran
  bool gate_updated = false;
  double epsilon = 0.0;
  double mean_return = 0.0;  // training episodes since the previous update
  double occupied_ratio = 0.0;
  double prune_ratio = 0.0;
};

class Trainer {
 public:
  Trainer(const env::EnvConfig& env_cfg, const nets::NetConfig& net_cfg, const TrainConfig& cfg, int budget_bits,
          std::uint64_t seed, std::uint64_t total_steps);

  /// Collects one episode and runs every update that falls due.
  /// Returns false once total_steps is reached.
  bool advance(const std::function<void(const UpdateMetrics&)>& on_update);

  double epsilon_at(std::uint64_t step) const;
  std::uint64_t gate_learning_start() const;

  /// Joint TD + aux step on one sampled batch; gates untouched.
  UpdateMetrics td_update(const std::vector<const Episode*>& batch);
  /// BCE on pseudo labels, gate parameters only.
  double gate_update(const PseudoLabelBatch& labels);

  CacomNetwork& online() { return online_; }
  CacomNetwork& target() { return target_; }
  const ReplayBuffer& replay() const { return replay_; }
  std::uint64_t steps() const { return steps_; }
  std::uint64_t total_steps() const { return total_steps_; }
  std::uint64_t episodes() const { return episodes_; }
  const TrainConfig& config() const { return cfg_; }
  const env::EnvConfig& env_config() const { return env_cfg_; }
  int budget() const { return budget_; }

 private:
  env::EnvConfig env_cfg_;
  TrainConfig cfg_;
  int budget_;
  std::uint64_t seed_;
  std::uint64_t total_steps_;
  CacomNetwork online_;
  CacomNetwork target_;
  std::vector<Tensor> main_params_;
  std::vector<Tensor> gate_params_;
  ad::AdamState main_adam_;
  ad::AdamState gate_adam_;
  ReplayBuffer replay_;
  std::mt19937_64 explore_rng_;
  std::mt19937_64 replay_rng_;
  std::mt19937_64 label_rng_;
  std::uint64_t steps_ = 0;
  std::uint64_t episodes_ = 0;
  std::uint64_t updates_done_ = 0;
  proto::LinkLedger window_ledger_;
  std::vector<double> window_returns_;
};

}  // namespace cacom::train
