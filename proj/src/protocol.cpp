#include "cacom/protocol.hpp"

#include <algorithm>

#include "cacom/bytes.hpp"

namespace cacom::proto {

using nets::Tensor;

void BudgetSplit::validate() const {
  if (budget < 0) throw std::invalid_argument("budget must be >= 0");
  if (context_dim < 0 || message_dim < 0) throw std::invalid_argument("message dimensions must be >= 0");
  if (context_cost() + message_cost() > budget) {
    throw std::invalid_argument("context (" + std::to_string(context_cost()) + " bits) + personalized (" +
                                std::to_string(message_cost()) + " bits) exceeds the budget of " +
                                std::to_string(budget) + " bits per link");
  }
}

LinkLedger::LinkLedger(int n_agents, int budget_bits)
    : n_agents_(n_agents), budget_(budget_bits), current_(static_cast<std::size_t>(n_agents * n_agents), 0) {
  if (n_agents < 1) throw std::invalid_argument("ledger needs at least one agent");
}

void LinkLedger::begin_timestep() {
  std::fill(current_.begin(), current_.end(), 0);
  per_timestep_bits_.push_back(0);
}

void LinkLedger::charge(int sender, int receiver, std::size_t bits) {
  if (sender == receiver) throw std::invalid_argument("self-links carry no messages");
  if (per_timestep_bits_.empty()) throw std::logic_error("charge before begin_timestep");
  auto& link = current_[static_cast<std::size_t>(sender * n_agents_ + receiver)];
  if (link + bits > static_cast<std::size_t>(budget_)) {
    throw BudgetExceeded("link " + std::to_string(sender) + "->" + std::to_string(receiver) + " would carry " +
                         std::to_string(link + bits) + " bits, budget " + std::to_string(budget_));
  }
  link += bits;
  max_link_bits_ = std::max(max_link_bits_, link);
  per_timestep_bits_.back() += bits;
  total_bits_ += bits;
}

void LinkLedger::record_gate(bool open) {
  ++eligible_;
  if (!open) ++pruned_;
}

std::size_t LinkLedger::bits_on(int sender, int receiver) const {
  return current_[static_cast<std::size_t>(sender * n_agents_ + receiver)];
}

double LinkLedger::occupied_ratio() const {
  const double capacity = static_cast<double>(budget_) * static_cast<double>(directed_links()) * static_cast<double>(timesteps());
  return capacity > 0.0 ? static_cast<double>(total_bits_) / capacity : 0.0;
}

double LinkLedger::prune_ratio() const {
  return eligible_ > 0 ? static_cast<double>(pruned_) / static_cast<double>(eligible_) : 0.0;
}

void LinkLedger::merge(const LinkLedger& other) {
  if (other.n_agents_ != n_agents_ || other.budget_ != budget_) throw std::invalid_argument("merging incompatible ledgers");
  per_timestep_bits_.insert(per_timestep_bits_.end(), other.per_timestep_bits_.begin(), other.per_timestep_bits_.end());
  total_bits_ += other.total_bits_;
  pruned_ += other.pruned_;
  eligible_ += other.eligible_;
  max_link_bits_ = std::max(max_link_bits_, other.max_link_bits_);
}

double prune_ratio(const LinkLedger& ledger) { return ledger.prune_ratio(); }

nets::TokenBatch token_batch(std::span<const env::Observation> observations) {
  nets::TokenBatch b;
  std::vector<float> data;
  std::size_t rows = 0;
  for (const auto& o : observations) {
    data.insert(data.end(), o.tokens.begin(), o.tokens.end());
    for (int r = 0; r < o.rows; ++r) b.valid.push_back(o.valid(r) ? 1.0f : 0.0f);
    rows += static_cast<std::size_t>(o.rows);
  }
  b.tokens = Tensor::constant({rows, static_cast<std::size_t>(env::kTokenFeatures)}, std::move(data));
  return b;
}

namespace {

// Sender packs, receiver unpacks and dequantizes with its own step size.
std::vector<float> transmit(const quant::QuantizedVector& q, float receiver_step) {
  const auto wire = quant::pack_bits(q);
  return quant::unpack_bits(wire, q.codes.size(), q.bits, receiver_step).dequantize();
}

quant::QuantizedVector slice_codes(const std::vector<std::int32_t>& codes, std::size_t row, std::size_t d, int bits,
                                   float step) {
  quant::QuantizedVector q;
  q.codes.assign(codes.begin() + static_cast<std::ptrdiff_t>(row * d), codes.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
  q.bits = bits;
  q.step = step;
  return q;
}

}  // namespace

RoundOutput run_round(std::span<const env::Observation> observations, const nets::CacomNetwork& net,
                      LinkLedger& ledger, GatePolicy gates) {
  const auto& cfg = net.config();
  const int n = cfg.n_agents;
  if (static_cast<int>(observations.size()) != n || ledger.n_agents() != n) {
    throw DimensionError("run_round: expected one observation per agent");
  }
  ad::NoGradGuard no_grad;
  ledger.begin_timestep();

  RoundOutput out;
  auto batch = token_batch(observations);
  out.valid = batch.valid;
  auto enc = net.encode(batch);
  out.features = enc.features;
  const auto links = static_cast<std::size_t>(n) * static_cast<std::size_t>(n - 1);
  out.open.assign(links, 0);
  if (!cfg.has_messages() && !cfg.has_context()) return out;

  if (cfg.broadcast) {
    const auto d = static_cast<std::size_t>(cfg.broadcast_dim);
    auto q = net.quantize_message(net.broadcast_message(enc.features, out.valid));
    const float step = net.message_quantizer().step_value();
    std::vector<std::vector<float>> heard(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      ContextMessage msg{static_cast<std::uint16_t>(j),
                         slice_codes(q.codes, static_cast<std::size_t>(j), d, cfg.message_bits, step)};
      for (int i = 0; i < n; ++i)
        if (i != j) ledger.charge(j, i, msg.bit_cost());
      heard[static_cast<std::size_t>(j)] = transmit(msg.payload, step);
      out.messages.broadcasts.push_back(std::move(msg));
    }
    std::vector<float> received;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (j != i) received.insert(received.end(), heard[static_cast<std::size_t>(j)].begin(), heard[static_cast<std::size_t>(j)].end());
    out.received = Tensor::constant({links, d}, std::move(received));
    out.open.assign(links, 1);
    return out;
  }

  // Stage 1: context broadcast.
  const auto dc = static_cast<std::size_t>(cfg.context_dim);
  auto cq = net.quantize_context(enc.context_pre);
  const float cstep = net.context_quantizer().step_value();
  std::vector<float> heard_context;
  for (int i = 0; i < n; ++i) {
    ContextMessage msg{static_cast<std::uint16_t>(i),
                       slice_codes(cq.codes, static_cast<std::size_t>(i), dc, cfg.context_bits, cstep)};
    for (int j = 0; j < n; ++j)
      if (j != i) ledger.charge(i, j, msg.bit_cost());
    auto values = transmit(msg.payload, cstep);
    heard_context.insert(heard_context.end(), values.begin(), values.end());
    out.messages.contexts.push_back(std::move(msg));
  }
  if (!cfg.has_gate()) return out;

  // Stage 2: gated personalized replies.
  Tensor context = Tensor::constant({static_cast<std::size_t>(n), dc}, std::move(heard_context));
  auto layout = nets::LinkLayout::for_envs(1, n);
  auto prob = net.gate_probability(context, enc.features, out.valid, layout);
  out.gates.resize(links);
  std::vector<float> z(links * static_cast<std::size_t>(cfg.message_dim));
  for (std::size_t l = 0; l < links; ++l) {
    const float p = prob[l];
    bool open = gates == GatePolicy::AllOpen || (gates == GatePolicy::Learned && p > 0.5f);
    out.gates[l] = {open, p};
    out.open[l] = open ? 1 : 0;
    std::fill_n(z.begin() + static_cast<std::ptrdiff_t>(l * cfg.message_dim), cfg.message_dim, open ? 1.0f : 0.0f);
    ledger.record_gate(open);
  }
  const auto dm = static_cast<std::size_t>(cfg.message_dim);
  Tensor pre = net.generate_message(context, enc.features, out.valid, layout);
  auto mq = net.quantize_message(ad::mul(pre, Tensor::constant(pre.shape(), std::move(z))));
  const float mstep = net.message_quantizer().step_value();
  std::vector<float> received(links * dm, 0.0f);
  for (std::size_t l = 0; l < links; ++l) {
    if (!out.open[l]) continue;
    const int j = static_cast<int>(layout.helper_row[l]);
    const int i = static_cast<int>(layout.receiver_row[l]);
    PersonalizedMessage msg{static_cast<std::uint16_t>(j), static_cast<std::uint16_t>(i),
                            slice_codes(mq.codes, l, dm, cfg.message_bits, mstep)};
    ledger.charge(j, i, msg.bit_cost());
    auto values = transmit(msg.payload, mstep);
    std::copy(values.begin(), values.end(), received.begin() + static_cast<std::ptrdiff_t>(l * dm));
    out.messages.personalized.push_back(std::move(msg));
  }
  out.received = Tensor::constant({links, dm}, std::move(received));
  return out;
}

namespace {

void write_record(ByteWriter& w, Stage stage, std::uint16_t sender, std::uint16_t receiver,
                  const quant::QuantizedVector& payload) {
  const auto packed = quant::pack_bits(payload);
  w.u8(static_cast<std::uint8_t>(stage));
  w.u16(sender);
  w.u16(receiver);
  w.u8(static_cast<std::uint8_t>(payload.bits));
  w.u16(static_cast<std::uint16_t>(payload.codes.size()));
  w.f32(payload.step);
  w.u16(static_cast<std::uint16_t>(packed.bytes().size()));
  w.bytes(packed.bytes());
}

}  // namespace

std::vector<std::uint8_t> serialize_round(const RoundMessages& messages) {
  ByteWriter w;
  w.text("CRT");
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(messages.size()));
  for (const auto& m : messages.contexts) write_record(w, Stage::Context, m.sender, kAllReceivers, m.payload);
  for (const auto& m : messages.personalized) write_record(w, Stage::Personalized, m.sender, m.receiver, m.payload);
  for (const auto& m : messages.broadcasts) write_record(w, Stage::Broadcast, m.sender, kAllReceivers, m.payload);
  return w.take();
}

RoundMessages deserialize_round(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.text(3) != "CRT") throw std::runtime_error("round trace: bad magic");
  if (r.u8() != 1) throw std::runtime_error("round trace: unsupported version");
  const auto count = r.u32();
  RoundMessages out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto stage = r.u8();
    if (stage < 1 || stage > 3) throw std::runtime_error("round trace: bad stage " + std::to_string(stage));
    const auto sender = r.u16();
    const auto receiver = r.u16();
    const int bits = r.u8();
    const std::size_t d = r.u16();
    const float step = r.f32();
    const std::size_t nbytes = r.u16();
    auto raw = r.bytes(nbytes);
    quant::BitString wire(std::vector<std::uint8_t>(raw.begin(), raw.end()), d * static_cast<std::size_t>(bits));
    auto payload = quant::unpack_bits(wire, d, bits, step);
    switch (static_cast<Stage>(stage)) {
      case Stage::Context: out.contexts.push_back({sender, std::move(payload)}); break;
      case Stage::Personalized: out.personalized.push_back({sender, receiver, std::move(payload)}); break;
      case Stage::Broadcast: out.broadcasts.push_back({sender, std::move(payload)}); break;
    }
  }
  if (!r.done()) throw std::runtime_error("round trace: trailing bytes");
  return out;
}

}  // namespace cacom::proto
