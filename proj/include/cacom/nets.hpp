#pragma once

// Network blocks for two-stage context-aware messaging.
//
// Every forward is batched over "agent rows": row a = env * n_agents + agent.
// Entity tokens of agent row a occupy rows [a*m, (a+1)*m) of token tensors.
// Links are laid out receiver-major: link row l = a_recv * (n-1) + k, where
// the k-th helper of receiver i is the k-th agent j != i in index order.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cacom/checkpoint.hpp"
#include "cacom/ops.hpp"
#include "cacom/quantizer.hpp"
#include "cacom/tensor.hpp"

namespace cacom::nets {

using ad::Tensor;

inline constexpr float kMaskedLogit = -1e9f;

struct NetConfig {
  int n_agents = 4;
  int n_actions = 5;
  int tokens = 5;          // m
  int token_features = 8;  // d_obs
  int state_dim = 24;
  int d_f = 32;
  int d_k = 16;
  int d_h = 64;
  int context_dim = 2;  // d_c
  int context_bits = 4;
  int message_dim = 4;  // d_m; 0 disables the second stage
  int message_bits = 4;
  int broadcast_dim = 6;  // bc variant: one B-bit broadcast per sender
  bool communicate = true;
  bool broadcast = false;  // bc ablation
  bool mlp = false;        // attention blocks replaced by MLPs
  int mixer_embed = 32;
  int predictor_hidden = 64;
  float gate_init_bias = 1.0f;

  bool has_context() const { return communicate && !broadcast; }
  bool has_gate() const { return has_context() && message_dim > 0; }
  int received_dim() const { return !communicate ? 0 : broadcast ? broadcast_dim : message_dim; }
  bool has_messages() const { return received_dim() > 0; }
  int links_per_receiver() const { return n_agents - 1; }
  void validate() const;
};

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, bool bias = true);
  Tensor operator()(const Tensor& x) const;
};

/// Names each parameter for checkpoints; pointers stay valid while the
/// owning network is alive and not moved.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};

/// Entity tokens plus per-row validity for a batch of agent rows.
struct TokenBatch {
  Tensor tokens;             // [A*m x d_obs]
  std::vector<float> valid;  // A*m, 1 or 0
  std::size_t agent_rows() const;
};

struct EncoderOutput {
  Tensor features;     // f, [A*m x d_f]
  Tensor context_pre;  // c_hat, [A x d_c] (undefined without a context stage)
};

struct PolicyOutput {
  Tensor q;       // [A x n_actions]
  Tensor hidden;  // [A x d_h]
};

/// Helper/receiver pairing for every directed link of a batch.
struct LinkLayout {
  std::vector<std::uint32_t> helper_row;    // agent row of j
  std::vector<std::uint32_t> receiver_row;  // agent row of i
  std::size_t size() const { return helper_row.size(); }
  static LinkLayout for_envs(std::size_t envs, int n_agents);
};

/// Masked mean pooling weights: valid / count per group (all zero if none valid).
std::vector<float> pooling_weights(const std::vector<float>& valid, std::size_t group);

class CacomNetwork {
 public:
  CacomNetwork(const NetConfig& cfg, std::uint64_t seed);
  CacomNetwork(const CacomNetwork& other);  // deep copy
  CacomNetwork& operator=(const CacomNetwork&) = delete;

  const NetConfig& config() const { return cfg_; }

  // Stage 1 and local feature.
  EncoderOutput encode(const TokenBatch& in) const;
  quant::LsqQuantizer::Output quantize_context(const Tensor& context_pre) const;

  // Stage 2, one row per link. `context` holds the received (dequantized)
  // context of every agent row.
  Tensor gate_probability(const Tensor& context, const Tensor& features, const std::vector<float>& valid,
                          const LinkLayout& links) const;
  Tensor generate_message(const Tensor& context, const Tensor& features, const std::vector<float>& valid,
                          const LinkLayout& links) const;
  quant::LsqQuantizer::Output quantize_message(const Tensor& pre) const;

  // bc ablation: one message per sender, [A x broadcast_dim] before quantization.
  Tensor broadcast_message(const Tensor& features, const std::vector<float>& valid) const;

  /// Aggregates local tokens and received messages, then GRU + Q head.
  /// `messages`: [A*(n-1) x received_dim] receiver-major; `open`: one flag per
  /// link row. Closed links contribute no token.
  PolicyOutput policy(const Tensor& features, const std::vector<float>& valid, const Tensor& messages,
                      const std::vector<std::uint8_t>& open, const Tensor& hidden) const;

  /// q_chosen: [N x n_agents]; state: [N x state_dim] -> Q_tot [N x 1].
  Tensor mix(const Tensor& q_chosen, const Tensor& state) const;

  /// Helper-value prediction from the receiver's pooled feature and message.
  Tensor predict_helper_q(const Tensor& pooled_features, const Tensor& message) const;

  Tensor pool(const Tensor& features, const std::vector<float>& valid) const;
  Tensor initial_hidden(std::size_t agent_rows) const;

  std::vector<ParamRef> parameters();
  /// Gate weights only; they train on the pseudo-label loss alone.
  std::vector<Tensor> gate_parameters();
  /// Everything learned by the TD and auxiliary losses.
  std::vector<Tensor> main_parameters();
  std::vector<ad::NamedTensor> named_tensors();
  /// Copies values by name; throws DimensionError on any name/shape mismatch.
  void load(const std::vector<ad::NamedTensor>& tensors);
  void copy_from(CacomNetwork& other);
  void soft_update_from(CacomNetwork& other, float tau);

  quant::LsqQuantizer& context_quantizer() { return context_q_; }
  quant::LsqQuantizer& message_quantizer() { return message_q_; }
  const quant::LsqQuantizer& context_quantizer() const { return context_q_; }
  const quant::LsqQuantizer& message_quantizer() const { return message_q_; }
  void clamp_steps();

  // Raw blocks, exposed for oracle tests.
  struct Attention {
    Tensor wq, wk, wv;
  };
  struct TokenMlp {
    Linear l1, l2;
  };
  struct Encoder {
    Linear embed;
    Attention attn;
    TokenMlp mlp;
    Linear context;
  } encoder;
  struct Generator {
    Tensor wq, wk, wv;  // [d_c x d_k], [d_f x d_k], [d_f x d_m]
    Linear l1, l2;      // mlp variant
  } generator;
  struct Gate {
    Tensor wq, wk;  // [d_c x d_k], [d_f x d_k]
    Linear fc;      // [m -> 1]
    Linear l1, l2;  // mlp variant
  } gate;
  struct Policy {
    Linear message_proj;
    Attention attn;
    TokenMlp mlp;
    ad::GruParams gru;
    Linear head;
  } policy_net;
  struct Mixer {
    Linear hyper_w1, hyper_b1, hyper_w2, value1, value2;
  } mixer;
  struct Predictor {
    Linear l1, l2;
  } predictor;
  Linear broadcaster;

 private:
  Tensor self_attention(const Attention& a, const Tensor& x, const std::vector<float>& valid, std::size_t group) const;
  Tensor token_mlp(const TokenMlp& p, const Tensor& x) const;

  NetConfig cfg_;
  quant::LsqQuantizer context_q_;
  quant::LsqQuantizer message_q_;
};

/// Greedy action per row (lowest index among ties).
std::vector<int> argmax_rows(const Tensor& q);

}  // namespace cacom::nets
