#pragma once

// Two-stage messaging round with per-link bit accounting.
//
// Stage 1: every agent broadcasts its quantized context; the bits are charged
// on each of its n-1 outgoing links. Stage 2: for every ordered pair (j, i)
// the helper's gate decides whether a personalized message travels j -> i.
// Payloads cross the "wire" as packed bit strings and are dequantized by the
// receiver with its own (shared) step size.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cacom/env.hpp"
#include "cacom/nets.hpp"
#include "cacom/quantizer.hpp"

namespace cacom::proto {

/// A (link, timestep) would carry more than the budget.
class BudgetExceeded : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bits per stage against the per-link, per-timestep budget.
struct BudgetSplit {
  int budget = 24;
  int context_dim = 2;
  int context_bits = 4;
  int message_dim = 4;
  int message_bits = 4;

  int context_cost() const { return context_dim * context_bits; }
  int message_cost() const { return message_dim * message_bits; }
  /// Throws std::invalid_argument when both stages cannot fit the budget.
  void validate() const;
};

enum class GatePolicy { Learned, AllOpen, AllClosed };

enum class Stage : std::uint8_t { Context = 1, Personalized = 2, Broadcast = 3 };
inline constexpr std::uint16_t kAllReceivers = 0xFFFF;

/// Stage-1 context, or a bc-variant broadcast (same shape, different stage).
struct ContextMessage {
  std::uint16_t sender = 0;
  quant::QuantizedVector payload;
  std::size_t bit_cost() const { return payload.bit_cost(); }
  bool operator==(const ContextMessage&) const = default;
};

struct PersonalizedMessage {
  std::uint16_t sender = 0;
  std::uint16_t receiver = 0;
  quant::QuantizedVector payload;
  std::size_t bit_cost() const { return payload.bit_cost(); }
  bool operator==(const PersonalizedMessage&) const = default;
};

struct RoundMessages {
  std::vector<ContextMessage> contexts;
  std::vector<PersonalizedMessage> personalized;
  std::vector<ContextMessage> broadcasts;
  std::size_t size() const { return contexts.size() + personalized.size() + broadcasts.size(); }
  bool operator==(const RoundMessages&) const = default;
};

struct GateDecision {
  bool open = true;
  float probability = 1.0f;
};

class LinkLedger {
 public:
  LinkLedger(int n_agents, int budget_bits);

  void begin_timestep();
  /// Adds bits to sender->receiver in the current timestep. Throws
  /// BudgetExceeded if the link would pass the budget.
  void charge(int sender, int receiver, std::size_t bits);
  void record_gate(bool open);

  int n_agents() const { return n_agents_; }
  int budget() const { return budget_; }
  std::size_t directed_links() const { return static_cast<std::size_t>(n_agents_) * (n_agents_ - 1); }
  std::size_t timesteps() const { return per_timestep_bits_.size(); }
  std::size_t total_bits() const { return total_bits_; }
  std::size_t pruned_links() const { return pruned_; }
  std::size_t eligible_links() const { return eligible_; }
  std::size_t bits_on(int sender, int receiver) const;
  std::size_t max_link_bits() const { return max_link_bits_; }
  const std::vector<std::size_t>& per_timestep_bits() const { return per_timestep_bits_; }

  /// total bits / (B * directed links * timesteps); 0 with no links.
  double occupied_ratio() const;
  /// pruned / eligible second-stage links; 0 when none were eligible.
  double prune_ratio() const;
  void merge(const LinkLedger& other);

 private:
  int n_agents_;
  int budget_;
  std::vector<std::size_t> current_;
  std::vector<std::size_t> per_timestep_bits_;
  std::size_t total_bits_ = 0;
  std::size_t pruned_ = 0;
  std::size_t eligible_ = 0;
  std::size_t max_link_bits_ = 0;
};

double prune_ratio(const LinkLedger& ledger);

/// Everything the policy needs after both stages, for one environment.
struct RoundOutput {
  nets::Tensor features;  // [n*m x d_f]
  std::vector<float> valid;
  nets::Tensor received;           // [n*(n-1) x received_dim], receiver-major (undefined without messages)
  std::vector<std::uint8_t> open;  // one flag per link row
  std::vector<GateDecision> gates;  // per link row (empty without a gate)
  RoundMessages messages;
};

nets::TokenBatch token_batch(std::span<const env::Observation> observations);

/// Runs stage 1 and stage 2 for one environment step and charges the ledger.
RoundOutput run_round(std::span<const env::Observation> observations, const nets::CacomNetwork& net,
                      LinkLedger& ledger, GatePolicy gates);

/// "CRT" | version u8 | count u32 | per message, contexts then personalized then broadcasts:
///   stage u8 | sender u16 | receiver u16 | bits u8 | n_codes u16 | step f32 | n_bytes u16 | packed codes
/// Receiver is kAllReceivers for stage 1 and broadcasts.
std::vector<std::uint8_t> serialize_round(const RoundMessages& messages);
RoundMessages deserialize_round(std::span<const std::uint8_t> bytes);

}  // namespace cacom::proto
