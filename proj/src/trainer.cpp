#include "cacom/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace cacom::train {

using nets::LinkLayout;
using nets::TokenBatch;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(reward_scale > 0.0f)) fail("reward_scale must be positive");
  if (!(tau >= 0.0f && tau <= 1.0f)) fail("tau must lie in [0, 1]");
  if (learn_interval < 1) fail("learn_interval must be >= 1");
  if (updates_per_learn < 1) fail("updates_per_learn must be >= 1");
  if (batch_episodes < 1) fail("batch_episodes must be >= 1");
  if (replay_capacity < batch_episodes) fail("replay_capacity must hold at least one batch");
  if (!(lr > 0.0f) || !(gate_lr > 0.0f)) fail("learning rates must be positive");
  if (epsilon_start < 0.0 || epsilon_start > 1.0 || epsilon_end < 0.0 || epsilon_end > 1.0) fail("epsilon must lie in [0, 1]");
  if (!(epsilon_fraction > 0.0)) fail("epsilon_fraction must be positive");
  if (gate_start_fraction < 0.0 || gate_start_fraction > 1.0) fail("gate_start_fraction must lie in [0, 1]");
  if (gate_learning_interval < 1 || gate_learning_interval % learn_interval != 0) {
    fail("gate_learning_interval must be a positive multiple of learn_interval");
  }
  if (gate_updates_per_event < 1) fail("gate_updates_per_event must be >= 1");
  if (pseudo_label_pairs < 1 || pseudo_label_episodes < 1) fail("pseudo-label sample sizes must be >= 1");
  if (aux_weight < 0.0f) fail("aux_weight must be >= 0");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 over a mix of the three words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1) + 0xBF58476D1CE4E5B9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
}

void ReplayBuffer::add(Episode episode) {
  if (episodes_.size() < capacity_) {
    episodes_.push_back(std::move(episode));
  } else {
    episodes_[next_] = std::move(episode);
    next_ = (next_ + 1) % capacity_;
  }
}

std::vector<const Episode*> ReplayBuffer::sample(std::size_t count, std::mt19937_64& rng) const {
  if (episodes_.empty()) throw std::logic_error("sampling from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, episodes_.size() - 1);
  std::vector<const Episode*> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(&episodes_[pick(rng)]);
  return out;
}

proto::GatePolicy gate_policy_for(const TrainConfig& cfg) {
  return cfg.gate_learning ? proto::GatePolicy::Learned : proto::GatePolicy::AllOpen;
}

namespace {

std::vector<float> observation_tokens(std::span<const env::Observation> obs) {
  std::vector<float> out;
  for (const auto& o : obs) out.insert(out.end(), o.tokens.begin(), o.tokens.end());
  return out;
}

std::vector<float> observation_valid(std::span<const env::Observation> obs) {
  std::vector<float> out;
  for (const auto& o : obs)
    for (int r = 0; r < o.rows; ++r) out.push_back(o.valid(r) ? 1.0f : 0.0f);
  return out;
}

// Step t of every episode in the batch; t == length() is the final observation.
TokenBatch step_tokens(const std::vector<const Episode*>& batch, std::size_t t, std::size_t features) {
  std::vector<float> data;
  TokenBatch b;
  for (const auto* ep : batch) {
    const bool last = t == ep->length();
    const auto& tok = last ? ep->final_tokens : ep->steps[t].tokens;
    const auto& val = last ? ep->final_valid : ep->steps[t].valid;
    data.insert(data.end(), tok.begin(), tok.end());
    b.valid.insert(b.valid.end(), val.begin(), val.end());
  }
  const std::size_t rows = data.size() / features;
  b.tokens = Tensor::constant({rows, features}, std::move(data));
  return b;
}

Tensor step_states(const std::vector<const Episode*>& batch, std::size_t t) {
  std::vector<float> data;
  for (const auto* ep : batch) {
    const auto& s = t == ep->length() ? ep->final_state : ep->steps[t].state;
    data.insert(data.end(), s.begin(), s.end());
  }
  const std::size_t dim = data.size() / batch.size();
  return Tensor::constant({batch.size(), dim}, std::move(data));
}

struct StepForward {
  nets::EncoderOutput enc;
  Tensor context;   // dequantized, [A x d_c]
  Tensor messages;  // as delivered per link
  Tensor ungated;   // LSQ of the ungated message per link (on request)
  std::vector<std::uint8_t> open;
  nets::PolicyOutput out;
};

// One protocol round plus policy step for a batch of environments, taped
// when a tape is active. Gates never join the tape.
StepForward step_forward(const CacomNetwork& net, const TokenBatch& tb, const Tensor& hidden, const LinkLayout& layout,
                         proto::GatePolicy gates, bool want_ungated) {
  const auto& cfg = net.config();
  StepForward s;
  s.enc = net.encode(tb);
  s.open.assign(layout.size(), 0);
  if (cfg.broadcast && cfg.communicate) {
    Tensor sent = net.quantize_message(net.broadcast_message(s.enc.features, tb.valid)).values;
    s.messages = ad::gather_rows(sent, layout.helper_row);
    s.open.assign(layout.size(), 1);
  } else if (cfg.has_context()) {
    s.context = net.quantize_context(s.enc.context_pre).values;
    if (cfg.has_gate()) {
      std::vector<float> z(layout.size() * static_cast<std::size_t>(cfg.message_dim));
      {
        ad::NoGradGuard no_grad;
        Tensor prob;
        if (gates == proto::GatePolicy::Learned) prob = net.gate_probability(s.context, s.enc.features, tb.valid, layout);
        for (std::size_t l = 0; l < layout.size(); ++l) {
          const bool open = gates == proto::GatePolicy::AllOpen || (gates == proto::GatePolicy::Learned && prob[l] > 0.5f);
          s.open[l] = open ? 1 : 0;
          std::fill_n(z.begin() + static_cast<std::ptrdiff_t>(l * cfg.message_dim), cfg.message_dim, open ? 1.0f : 0.0f);
        }
      }
      Tensor pre = net.generate_message(s.context, s.enc.features, tb.valid, layout);
      if (want_ungated) s.ungated = net.quantize_message(pre).values;
      s.messages = net.quantize_message(ad::mul(pre, Tensor::constant(pre.shape(), std::move(z)))).values;
    }
  }
  s.out = net.policy(s.enc.features, tb.valid, s.messages, s.open, hidden);
  return s;
}

std::vector<std::uint32_t> as_cols(std::span<const int> v) { return {v.begin(), v.end()}; }

// Greedy per-agent values, mixed: max_a' Q_tot for each environment row.
Tensor greedy_mix(const CacomNetwork& net, const Tensor& q, const Tensor& state) {
  const auto greedy = nets::argmax_rows(q);
  const auto cols = as_cols(greedy);
  Tensor chosen = ad::reshape(ad::select_per_row(q, cols), {state.dim(0), static_cast<std::size_t>(net.config().n_agents)});
  return net.mix(chosen, state);
}

}  // namespace

Episode rollout(const env::EnvConfig& env_cfg, const CacomNetwork& net, proto::GatePolicy gates, double epsilon,
                std::uint64_t env_seed, std::mt19937_64& explore_rng, proto::LinkLedger& ledger) {
  ad::NoGradGuard no_grad;
  const int n = env_cfg.n_agents;
  auto world = env::reset(env_cfg, env_seed);
  auto obs = env::observe_all(env_cfg, world);
  Tensor hidden = net.initial_hidden(static_cast<std::size_t>(n));
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> any_action(0, net.config().n_actions - 1);

  Episode ep;
  bool done = false;
  while (!done) {
    Transition tr;
    tr.tokens = observation_tokens(obs);
    tr.valid = observation_valid(obs);
    tr.state = env::global_state(world);
    auto round = proto::run_round(obs, net, ledger, gates);
    auto out = net.policy(round.features, round.valid, round.received, round.open, hidden);
    hidden = out.hidden;
    const auto greedy = nets::argmax_rows(out.q);
    tr.actions.resize(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
      const bool explore = coin(explore_rng) < epsilon;
      tr.actions[static_cast<std::size_t>(a)] = explore ? any_action(explore_rng) : greedy[static_cast<std::size_t>(a)];
    }
    tr.gates = round.open;
    auto result = env::step(env_cfg, world, tr.actions);
    tr.reward = static_cast<float>(result.reward);
    tr.done = result.done;
    done = result.done;
    ep.episode_return += result.reward;
    obs = std::move(result.observations);
    ep.steps.push_back(std::move(tr));
  }
  ep.final_tokens = observation_tokens(obs);
  ep.final_valid = observation_valid(obs);
  ep.final_state = env::global_state(world);
  return ep;
}

EvalSummary evaluate(const env::EnvConfig& env_cfg, const CacomNetwork& net, proto::GatePolicy gates, int budget_bits,
                     int episodes, std::uint64_t seed, double epsilon) {
  if (episodes < 1) throw std::invalid_argument("evaluation needs at least one episode");
  proto::LinkLedger ledger(env_cfg.n_agents, budget_bits);
  EvalSummary s;
  std::mt19937_64 explore(derive_seed(seed, kExploreStream));
  std::vector<double> bits(static_cast<std::size_t>(env_cfg.steps_per_episode), 0.0);
  for (int k = 0; k < episodes; ++k) {
    proto::LinkLedger ep_ledger(env_cfg.n_agents, budget_bits);
    auto ep = rollout(env_cfg, net, gates, epsilon, derive_seed(seed, kEvalStream, static_cast<std::uint64_t>(k)), explore, ep_ledger);
    s.returns.push_back(ep.episode_return);
    const auto& per_t = ep_ledger.per_timestep_bits();
    for (std::size_t t = 0; t < per_t.size() && t < bits.size(); ++t) bits[t] += static_cast<double>(per_t[t]);
    if (k == 0) {
      ledger = ep_ledger;
    } else {
      ledger.merge(ep_ledger);
    }
  }
  s.mean_return = std::accumulate(s.returns.begin(), s.returns.end(), 0.0) / episodes;
  s.prune_ratio = ledger.prune_ratio();
  s.occupied_ratio = ledger.occupied_ratio();
  for (auto& b : bits) b /= episodes;
  s.overhead_per_timestep = std::move(bits);
  return s;
}

PseudoLabelBatch gate_pseudo_labels(const std::vector<const Episode*>& batch, const CacomNetwork& net, float threshold,
                                    int max_pairs, std::mt19937_64& rng) {
  const auto& cfg = net.config();
  if (!cfg.has_gate()) throw std::logic_error("gate_pseudo_labels: network has no gate");
  ad::NoGradGuard no_grad;
  const std::size_t B = batch.size(), n = static_cast<std::size_t>(cfg.n_agents), T = batch.front()->length();
  const std::size_t m = static_cast<std::size_t>(cfg.tokens), links_per = n - 1, L = B * n * links_per;
  const std::size_t df = static_cast<std::size_t>(cfg.d_f), dm = static_cast<std::size_t>(cfg.message_dim);
  const auto layout = LinkLayout::for_envs(B, static_cast<int>(n));

  // Untaped unroll with the gates as they stand.
  std::vector<StepForward> steps;
  std::vector<Tensor> hiddens;
  Tensor h = net.initial_hidden(B * n);
  for (std::size_t t = 0; t < T; ++t) {
    hiddens.push_back(h);
    steps.push_back(step_forward(net, step_tokens(batch, t, static_cast<std::size_t>(cfg.token_features)), h, layout,
                                 proto::GatePolicy::Learned, true));
    h = steps.back().out.hidden;
  }

  // Uniform pairs without replacement over (episode, t, link).
  const std::size_t total = T * L;
  const std::size_t P = std::min(total, static_cast<std::size_t>(max_pairs));
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t k = 0; k < P; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, total - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  pool.resize(P);

  PseudoLabelBatch out;
  // Policy inputs for the z=0 (even rows) and z=1 (odd rows) variants.
  std::vector<float> feats, valid, msgs, hid, state, ctx, helper_feats;
  std::vector<std::uint8_t> open;
  const std::size_t dh = static_cast<std::size_t>(cfg.d_h), dc = static_cast<std::size_t>(cfg.context_dim);
  std::vector<std::size_t> sample_t, sample_recv, sample_env;
  for (std::size_t idx : pool) {
    const std::size_t t = idx / L, l = idx % L;
    const auto& s = steps[t];
    const std::size_t recv = layout.receiver_row[l], helper = layout.helper_row[l];
    const std::size_t e = recv / n, k = l % links_per;
    out.pairs.push_back({e, t, static_cast<int>(helper % n), static_cast<int>(recv % n)});
    sample_t.push_back(t);
    sample_recv.push_back(recv);
    sample_env.push_back(e);
    auto fdata = s.enc.features.data();
    const auto& evalid = batch[e]->steps[t].valid;
    for (int variant = 0; variant < 2; ++variant) {
      feats.insert(feats.end(), fdata.begin() + static_cast<std::ptrdiff_t>(recv * m * df),
                   fdata.begin() + static_cast<std::ptrdiff_t>((recv + 1) * m * df));
      valid.insert(valid.end(), evalid.begin() + static_cast<std::ptrdiff_t>((recv % n) * m),
                   evalid.begin() + static_cast<std::ptrdiff_t>((recv % n + 1) * m));
      for (std::size_t kk = 0; kk < links_per; ++kk) {
        const std::size_t link = recv * links_per + kk;
        const bool target = kk == k;
        const Tensor& src = target && variant == 1 ? s.ungated : s.messages;
        auto md = src.data();
        if (target && variant == 0) {
          msgs.insert(msgs.end(), dm, 0.0f);
        } else {
          msgs.insert(msgs.end(), md.begin() + static_cast<std::ptrdiff_t>(link * dm), md.begin() + static_cast<std::ptrdiff_t>((link + 1) * dm));
        }
        open.push_back(target ? static_cast<std::uint8_t>(variant) : s.open[link]);
      }
      auto hd = hiddens[t].data();
      hid.insert(hid.end(), hd.begin() + static_cast<std::ptrdiff_t>(recv * dh), hd.begin() + static_cast<std::ptrdiff_t>((recv + 1) * dh));
    }
    auto cd = s.context.data();
    ctx.insert(ctx.end(), cd.begin() + static_cast<std::ptrdiff_t>(recv * dc), cd.begin() + static_cast<std::ptrdiff_t>((recv + 1) * dc));
    helper_feats.insert(helper_feats.end(), fdata.begin() + static_cast<std::ptrdiff_t>(helper * m * df),
                        fdata.begin() + static_cast<std::ptrdiff_t>((helper + 1) * m * df));
    const auto& hvalid = batch[e]->steps[t].valid;
    out.helper_valid.insert(out.helper_valid.end(), hvalid.begin() + static_cast<std::ptrdiff_t>((helper % n) * m),
                            hvalid.begin() + static_cast<std::ptrdiff_t>((helper % n + 1) * m));
  }
  out.contexts = Tensor::constant({P, dc}, std::move(ctx));
  out.helper_features = Tensor::constant({P * m, df}, std::move(helper_feats));
  if (P == 0) return out;

  auto variants = net.policy(Tensor::constant({2 * P * m, df}, std::move(feats)), valid,
                             Tensor::constant({2 * P * links_per, dm}, std::move(msgs)), open,
                             Tensor::constant({2 * P, dh}, std::move(hid)));
  const auto actions = nets::argmax_rows(variants.q);
  const std::size_t na = static_cast<std::size_t>(cfg.n_actions);
  auto qv = variants.q.data();

  // Q_tot for a_i^0 and a_i^1: agent i valued by its informed (z=1) utility,
  // everyone else by the standard forward at the executed action.
  std::vector<float> chosen(2 * P * n), states;
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t t = sample_t[p], recv = sample_recv[p], e = sample_env[p];
    auto q_std = steps[t].out.q.data();
    const auto& executed = batch[e]->steps[t].actions;
    const auto& st = batch[e]->steps[t].state;
    for (int variant = 0; variant < 2; ++variant) {
      for (std::size_t a = 0; a < n; ++a) {
        const std::size_t row = e * n + a;
        float v = q_std[row * na + static_cast<std::size_t>(executed[a])];
        if (row == recv) v = qv[(2 * p + 1) * na + static_cast<std::size_t>(actions[2 * p + static_cast<std::size_t>(variant)])];
        chosen[(2 * p + static_cast<std::size_t>(variant)) * n + a] = v;
      }
      states.insert(states.end(), st.begin(), st.end());
    }
  }
  const std::size_t sd = static_cast<std::size_t>(cfg.state_dim);
  Tensor qtot = net.mix(Tensor::constant({2 * P, n}, std::move(chosen)), Tensor::constant({2 * P, sd}, std::move(states)));
  for (std::size_t p = 0; p < P; ++p) {
    const float diff = qtot[2 * p + 1] - qtot[2 * p];
    out.labels.push_back(diff > threshold ? 1.0f : 0.0f);
  }
  return out;
}

Tensor gate_probabilities(const PseudoLabelBatch& labels, const CacomNetwork& net) {
  LinkLayout layout;
  for (std::uint32_t p = 0; p < labels.size(); ++p) {
    layout.helper_row.push_back(p);
    layout.receiver_row.push_back(p);
  }
  return net.gate_probability(labels.contexts, labels.helper_features, labels.helper_valid, layout);
}

Losses compute_losses(const std::vector<const Episode*>& batch, const CacomNetwork& online, const CacomNetwork& target,
                      const TrainConfig& cfg) {
  const auto& nc = online.config();
  if (batch.empty()) throw std::invalid_argument("compute_losses: empty batch");
  const std::size_t B = batch.size(), n = static_cast<std::size_t>(nc.n_agents), T = batch.front()->length();
  for (const auto* ep : batch)
    if (ep->length() != T) throw std::invalid_argument("compute_losses: episodes in a batch must share a length");
  const auto features = static_cast<std::size_t>(nc.token_features);
  const auto layout = LinkLayout::for_envs(B, static_cast<int>(n));
  const auto gates = gate_policy_for(cfg);

  // Targets: y_t = κ r_t + γ (1 - done_t) max_a' Q_tot^-(s_{t+1}), κ = reward_scale.
  std::vector<float> y(T * B);
  {
    ad::NoGradGuard no_grad;
    Tensor h = target.initial_hidden(B * n);
    for (std::size_t t = 0; t <= T; ++t) {
      auto s = step_forward(target, step_tokens(batch, t, features), h, layout, gates, false);
      h = s.out.hidden;
      if (t == 0) continue;
      Tensor next = greedy_mix(target, s.out.q, step_states(batch, t));
      for (std::size_t b = 0; b < B; ++b) {
        const auto& tr = batch[b]->steps[t - 1];
        y[(t - 1) * B + b] = cfg.reward_scale * tr.reward + (tr.done ? 0.0f : static_cast<float>(cfg.gamma) * next[b]);
      }
    }
  }

  Losses out;
  std::vector<Tensor> qtot;
  Tensor aux_sum;
  const bool with_aux = cfg.aux_loss && nc.has_messages() && n > 1;
  Tensor h = online.initial_hidden(B * n);
  for (std::size_t t = 0; t < T; ++t) {
    TokenBatch tb = step_tokens(batch, t, features);
    auto s = step_forward(online, tb, h, layout, gates, false);
    h = s.out.hidden;
    std::vector<std::uint32_t> acts;
    for (const auto* ep : batch)
      for (int a : ep->steps[t].actions) acts.push_back(static_cast<std::uint32_t>(a));
    Tensor chosen = ad::reshape(ad::select_per_row(s.out.q, acts), {B, n});
    qtot.push_back(online.mix(chosen, step_states(batch, t)));

    if (with_aux) {
      std::vector<std::uint32_t> links, recv, help;
      for (std::uint32_t l = 0; l < layout.size(); ++l) {
        if (!s.open[l]) continue;
        links.push_back(l);
        recv.push_back(layout.receiver_row[l]);
        help.push_back(layout.helper_row[l]);
      }
      if (!links.empty()) {
        Tensor pooled = ad::gather_rows(online.pool(s.enc.features, tb.valid), recv);
        Tensor pred = online.predict_helper_q(pooled, ad::gather_rows(s.messages, links));
        Tensor diff = ad::sub(pred, ad::detach(ad::gather_rows(s.out.q, help)));
        Tensor sq = ad::sum(ad::mul(diff, diff));
        aux_sum = aux_sum.defined() ? ad::add(aux_sum, sq) : sq;
        out.open_links += links.size();
      }
    }
  }
  out.td = ad::mse(ad::concat(qtot, 0), Tensor::constant({T * B, 1}, std::move(y)));
  if (aux_sum.defined()) {
    out.aux = ad::scale(aux_sum, 1.0f / static_cast<float>(out.open_links * static_cast<std::size_t>(nc.n_actions)));
  } else {
    out.aux = Tensor::scalar(0.0f);
  }
  return out;
}

void soft_update(CacomNetwork& target, CacomNetwork& online, float tau) { target.soft_update_from(online, tau); }

void calibrate_quantizers(CacomNetwork& net, std::span<const env::Observation> observations) {
  ad::NoGradGuard no_grad;
  const auto& cfg = net.config();
  if (!cfg.communicate) return;
  auto tb = proto::token_batch(observations);
  auto enc = net.encode(tb);
  if (cfg.broadcast) {
    net.message_quantizer().calibrate(net.broadcast_message(enc.features, tb.valid).data());
    return;
  }
  net.context_quantizer().calibrate(enc.context_pre.data());
  if (!cfg.has_gate()) return;
  Tensor context = net.quantize_context(enc.context_pre).values;
  auto layout = LinkLayout::for_envs(1, cfg.n_agents);
  if (layout.size() == 0) return;
  net.message_quantizer().calibrate(net.generate_message(context, enc.features, tb.valid, layout).data());
}

Trainer::Trainer(const env::EnvConfig& env_cfg, const nets::NetConfig& net_cfg, const TrainConfig& cfg, int budget_bits,
                 std::uint64_t seed, std::uint64_t total_steps)
    : env_cfg_(env_cfg),
      cfg_(cfg),
      budget_(budget_bits),
      seed_(seed),
      total_steps_(total_steps),
      online_(net_cfg, derive_seed(seed, kInitStream)),
      target_(online_),
      replay_(static_cast<std::size_t>(cfg.replay_capacity)),
      explore_rng_(derive_seed(seed, kExploreStream)),
      replay_rng_(derive_seed(seed, kReplayStream)),
      label_rng_(derive_seed(seed, kLabelStream)),
      window_ledger_(env_cfg.n_agents, budget_bits) {
  env_cfg_.validate();
  cfg_.validate();
  auto first = env::observe_all(env_cfg_, env::reset(env_cfg_, derive_seed(seed, kEnvStream, 0)));
  calibrate_quantizers(online_, first);
  target_.copy_from(online_);
  main_params_ = online_.main_parameters();
  gate_params_ = online_.gate_parameters();
  main_adam_ = ad::AdamState::for_params(main_params_, {cfg_.lr});
  gate_adam_ = ad::AdamState::for_params(gate_params_, {cfg_.gate_lr});
}

double Trainer::epsilon_at(std::uint64_t step) const {
  const double horizon = cfg_.epsilon_fraction * static_cast<double>(total_steps_);
  const double frac = horizon > 0.0 ? std::min(1.0, static_cast<double>(step) / horizon) : 1.0;
  return cfg_.epsilon_start + (cfg_.epsilon_end - cfg_.epsilon_start) * frac;
}

std::uint64_t Trainer::gate_learning_start() const {
  return static_cast<std::uint64_t>(std::llround(cfg_.gate_start_fraction * static_cast<double>(total_steps_)));
}

UpdateMetrics Trainer::td_update(const std::vector<const Episode*>& batch) {
  UpdateMetrics m;
  ad::zero_grads(main_params_);
  {
    ad::Tape tape;
    auto rec = tape.record();
    Losses losses = compute_losses(batch, online_, target_, cfg_);
    Tensor total = cfg_.aux_loss ? ad::add(losses.td, ad::scale(losses.aux, cfg_.aux_weight)) : losses.td;
    m.td_loss = losses.td.item();
    m.aux_loss = losses.aux.item();
    if (!std::isfinite(total.item())) {
      throw NumericalAbort("non-finite loss at step " + std::to_string(steps_) + " (td " + std::to_string(m.td_loss) +
                           ", aux " + std::to_string(m.aux_loss) + ")");
    }
    tape.backward(total);
  }
  ad::adam_step(main_params_, main_adam_, cfg_.grad_clip);
  online_.clamp_steps();
  soft_update(target_, online_, cfg_.tau);
  return m;
}

double Trainer::gate_update(const PseudoLabelBatch& labels) {
  if (labels.size() == 0) return 0.0;
  ad::zero_grads(gate_params_);
  double loss_value = 0.0;
  {
    ad::Tape tape;
    auto rec = tape.record();
    Tensor p = gate_probabilities(labels, online_);
    Tensor loss = ad::bce(p, Tensor::constant(p.shape(), labels.labels));
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw NumericalAbort("non-finite gate loss at step " + std::to_string(steps_));
    tape.backward(loss);
  }
  ad::adam_step(gate_params_, gate_adam_, cfg_.grad_clip);
  return loss_value;
}

bool Trainer::advance(const std::function<void(const UpdateMetrics&)>& on_update) {
  if (steps_ >= total_steps_) return false;
  const double eps = epsilon_at(steps_);
  auto ep = rollout(env_cfg_, online_, gate_policy_for(cfg_), eps, derive_seed(seed_, kEnvStream, episodes_), explore_rng_,
                    window_ledger_);
  steps_ += ep.length();
  ++episodes_;
  window_returns_.push_back(ep.episode_return);
  replay_.add(std::move(ep));

  const std::uint64_t due = steps_ / static_cast<std::uint64_t>(cfg_.learn_interval);
  bool ran = false;
  std::vector<UpdateMetrics> emitted;
  while (updates_done_ < due) {
    ++updates_done_;
    const std::uint64_t mark = updates_done_ * static_cast<std::uint64_t>(cfg_.learn_interval);
    if (replay_.size() < static_cast<std::size_t>(cfg_.batch_episodes)) continue;
    UpdateMetrics m;
    for (int k = 0; k < cfg_.updates_per_learn; ++k) m = td_update(replay_.sample(static_cast<std::size_t>(cfg_.batch_episodes), replay_rng_));
    if (cfg_.gate_learning && online_.config().has_gate() && env_cfg_.n_agents > 1 && mark >= gate_learning_start() &&
        mark % static_cast<std::uint64_t>(cfg_.gate_learning_interval) == 0) {
      for (int k = 0; k < cfg_.gate_updates_per_event; ++k) {
        auto sample = replay_.sample(static_cast<std::size_t>(cfg_.pseudo_label_episodes), label_rng_);
        auto labels = gate_pseudo_labels(sample, online_, cfg_.gate_threshold, cfg_.pseudo_label_pairs, label_rng_);
        m.gate_loss = gate_update(labels);
        m.gate_updated = true;
      }
    }
    m.step = mark;
    m.epsilon = eps;
    emitted.push_back(m);
    ran = true;
  }
  if (ran) {
    const double mean_return =
        std::accumulate(window_returns_.begin(), window_returns_.end(), 0.0) / static_cast<double>(window_returns_.size());
    for (auto& m : emitted) {
      m.mean_return = mean_return;
      m.prune_ratio = window_ledger_.prune_ratio();
      m.occupied_ratio = window_ledger_.occupied_ratio();
      if (on_update) on_update(m);
    }
    window_returns_.clear();
    window_ledger_ = proto::LinkLedger(env_cfg_.n_agents, budget_);
  }
  return true;
}

}  // namespace cacom::train
