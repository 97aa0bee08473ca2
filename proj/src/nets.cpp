#include "cacom/nets.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace cacom::nets {
namespace {

using namespace cacom::ad;

Tensor uniform_param(Shape shape, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-bound, bound);
  std::vector<float> data(numel_of(shape));
  for (auto& v : data) v = u(rng);
  return Tensor::parameter(std::move(shape), std::move(data));
}

Tensor weight(int in, int out, std::mt19937_64& rng) {
  return uniform_param({static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, 1.0f / std::sqrt(static_cast<float>(in)), rng);
}

// Hidden width giving an in->h->out MLP roughly `target` parameters.
int matched_hidden(int target, int in, int out) { return std::max(1, (target - out) / (in + 1 + out)); }

Tensor column_mask_logits(const std::vector<float>& valid, std::size_t rows_per_group, std::size_t group, std::size_t groups) {
  std::vector<float> mask(groups * rows_per_group * group, 0.0f);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = 0; r < rows_per_group; ++r)
      for (std::size_t c = 0; c < group; ++c)
        if (valid[g * group + c] == 0.0f) mask[(g * rows_per_group + r) * group + c] = kMaskedLogit;
  return Tensor::constant({groups * rows_per_group, group}, std::move(mask));
}

// For each link, the m token rows of its helper.
std::vector<std::uint32_t> helper_token_rows(const LinkLayout& links, std::size_t m) {
  std::vector<std::uint32_t> rows;
  rows.reserve(links.size() * m);
  for (auto h : links.helper_row)
    for (std::size_t t = 0; t < m; ++t) rows.push_back(static_cast<std::uint32_t>(h * m + t));
  return rows;
}

std::vector<float> helper_valid(const LinkLayout& links, const std::vector<float>& valid, std::size_t m) {
  std::vector<float> out;
  out.reserve(links.size() * m);
  for (auto h : links.helper_row)
    for (std::size_t t = 0; t < m; ++t) out.push_back(valid[h * m + t]);
  return out;
}

}  // namespace

void NetConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (n_agents < 1 || n_actions < 1 || tokens < 1 || token_features < 1 || state_dim < 1) fail("network sizes must be positive");
  if (d_f < 1 || d_k < 1 || d_h < 1 || mixer_embed < 1 || predictor_hidden < 1) fail("layer widths must be positive");
  if (has_context() && context_dim < 1) fail("context_dim must be >= 1 when the context stage is on");
  if (message_dim < 0) fail("message_dim must be >= 0");
  if (broadcast && broadcast_dim < 1) fail("broadcast_dim must be >= 1 for the bc variant");
}

Linear::Linear(int in, int out, std::mt19937_64& rng, bool bias) {
  w = weight(in, out, rng);
  if (bias) b = uniform_param({static_cast<std::size_t>(out)}, 1.0f / std::sqrt(static_cast<float>(in)), rng);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, w);
  return b.defined() ? add_rowwise(y, b) : y;
}

std::size_t TokenBatch::agent_rows() const { return tokens.dim(0); }

LinkLayout LinkLayout::for_envs(std::size_t envs, int n_agents) {
  LinkLayout l;
  const auto n = static_cast<std::uint32_t>(n_agents);
  for (std::uint32_t e = 0; e < envs; ++e)
    for (std::uint32_t i = 0; i < n; ++i)
      for (std::uint32_t j = 0; j < n; ++j) {
        if (j == i) continue;
        l.helper_row.push_back(e * n + j);
        l.receiver_row.push_back(e * n + i);
      }
  return l;
}

std::vector<float> pooling_weights(const std::vector<float>& valid, std::size_t group) {
  std::vector<float> w(valid.size(), 0.0f);
  for (std::size_t g = 0; g * group < valid.size(); ++g) {
    float count = 0.0f;
    for (std::size_t t = 0; t < group; ++t) count += valid[g * group + t] != 0.0f ? 1.0f : 0.0f;
    if (count == 0.0f) continue;
    for (std::size_t t = 0; t < group; ++t)
      if (valid[g * group + t] != 0.0f) w[g * group + t] = 1.0f / count;
  }
  return w;
}

CacomNetwork::CacomNetwork(const NetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), context_q_(cfg.context_bits), message_q_(cfg.message_bits) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int df = cfg.d_f, dk = cfg.d_k, m = cfg.tokens;

  const int attn_params = 2 * df * dk + df * df;
  const int token_hidden = matched_hidden(attn_params, df, df);

  encoder.embed = Linear(cfg.token_features, df, rng);
  if (cfg.mlp) {
    encoder.mlp = {Linear(df, token_hidden, rng), Linear(token_hidden, df, rng)};
  } else {
    encoder.attn = {weight(df, dk, rng), weight(df, dk, rng), weight(df, df, rng)};
  }
  if (cfg.has_context()) encoder.context = Linear(df, cfg.context_dim, rng);

  if (cfg.has_gate()) {
    const int gen_params = cfg.context_dim * dk + df * dk + df * cfg.message_dim;
    const int gate_params = cfg.context_dim * dk + df * dk + m + 1;
    const int mlp_in = cfg.context_dim + df;
    if (cfg.mlp) {
      const int gh = matched_hidden(gen_params, mlp_in, cfg.message_dim);
      generator.l1 = Linear(mlp_in, gh, rng);
      generator.l2 = Linear(gh, cfg.message_dim, rng);
      const int qh = matched_hidden(gate_params, mlp_in, 1);
      gate.l1 = Linear(mlp_in, qh, rng);
      gate.l2 = Linear(qh, 1, rng);
      gate.l2.b.mutable_data()[0] = cfg.gate_init_bias;
    } else {
      generator.wq = weight(cfg.context_dim, dk, rng);
      generator.wk = weight(df, dk, rng);
      generator.wv = weight(df, cfg.message_dim, rng);
      gate.wq = weight(cfg.context_dim, dk, rng);
      gate.wk = weight(df, dk, rng);
      gate.fc = Linear(m, 1, rng);
      gate.fc.b.mutable_data()[0] = cfg.gate_init_bias;
    }
  }
  if (cfg.communicate && cfg.broadcast) broadcaster = Linear(df, cfg.broadcast_dim, rng);

  if (cfg.has_messages()) policy_net.message_proj = Linear(cfg.received_dim(), df, rng);
  if (cfg.mlp) {
    policy_net.mlp = {Linear(df, token_hidden, rng), Linear(token_hidden, df, rng)};
  } else {
    policy_net.attn = {weight(df, dk, rng), weight(df, dk, rng), weight(df, df, rng)};
  }
  const auto dh = static_cast<std::size_t>(cfg.d_h);
  const float gb = 1.0f / std::sqrt(static_cast<float>(cfg.d_h));
  policy_net.gru.w_x = uniform_param({static_cast<std::size_t>(df), 3 * dh}, gb, rng);
  policy_net.gru.w_h = uniform_param({dh, 3 * dh}, gb, rng);
  policy_net.gru.b_x = uniform_param({3 * dh}, gb, rng);
  policy_net.gru.b_h = uniform_param({3 * dh}, gb, rng);
  policy_net.head = Linear(cfg.d_h, cfg.n_actions, rng);

  const int e = cfg.mixer_embed, s = cfg.state_dim;
  mixer.hyper_w1 = Linear(s, cfg.n_agents * e, rng);
  mixer.hyper_b1 = Linear(s, e, rng);
  mixer.hyper_w2 = Linear(s, e, rng);
  mixer.value1 = Linear(s, e, rng);
  mixer.value2 = Linear(e, 1, rng);

  if (cfg.has_messages()) {
    predictor.l1 = Linear(df + cfg.received_dim(), cfg.predictor_hidden, rng);
    predictor.l2 = Linear(cfg.predictor_hidden, cfg.n_actions, rng);
  }
}

CacomNetwork::CacomNetwork(const CacomNetwork& other)
    : encoder(other.encoder),
      generator(other.generator),
      gate(other.gate),
      policy_net(other.policy_net),
      mixer(other.mixer),
      predictor(other.predictor),
      broadcaster(other.broadcaster),
      cfg_(other.cfg_),
      context_q_(other.context_q_),
      message_q_(other.message_q_) {
  for (auto& p : parameters()) *p.tensor = p.tensor->clone();
}

Tensor CacomNetwork::self_attention(const Attention& a, const Tensor& x, const std::vector<float>& valid,
                                    std::size_t group) const {
  const std::size_t groups = x.dim(0) / group;
  Tensor q = matmul(x, a.wq);
  Tensor k = matmul(x, a.wk);
  Tensor v = matmul(x, a.wv);
  Tensor scores = scale(batched_matmul(q, k, groups, true), 1.0f / std::sqrt(static_cast<float>(cfg_.d_k)));
  Tensor attn = softmax(add(scores, column_mask_logits(valid, group, group, groups)), 1);
  return batched_matmul(attn, v, groups);
}

Tensor CacomNetwork::token_mlp(const TokenMlp& p, const Tensor& x) const { return p.l2(relu(p.l1(x))); }

Tensor CacomNetwork::pool(const Tensor& features, const std::vector<float>& valid) const {
  const auto m = static_cast<std::size_t>(cfg_.tokens);
  return group_weighted_sum(features, pooling_weights(valid, m), m);
}

EncoderOutput CacomNetwork::encode(const TokenBatch& in) const {
  const auto m = static_cast<std::size_t>(cfg_.tokens);
  if (in.tokens.rank() != 2 || in.tokens.dim(1) != static_cast<std::size_t>(cfg_.token_features) ||
      in.tokens.dim(0) % m != 0 || in.valid.size() != in.tokens.dim(0)) {
    throw DimensionError("encode: token batch " + shape_str(in.tokens.shape()) + " does not fit m=" + std::to_string(m));
  }
  Tensor e = relu(encoder.embed(in.tokens));
  Tensor mixed = cfg_.mlp ? token_mlp(encoder.mlp, e) : self_attention(encoder.attn, e, in.valid, m);
  EncoderOutput out;
  out.features = add(e, mixed);
  if (cfg_.has_context()) out.context_pre = encoder.context(pool(out.features, in.valid));
  return out;
}

quant::LsqQuantizer::Output CacomNetwork::quantize_context(const Tensor& context_pre) const {
  return context_q_.forward(context_pre);
}

quant::LsqQuantizer::Output CacomNetwork::quantize_message(const Tensor& pre) const { return message_q_.forward(pre); }

Tensor CacomNetwork::gate_probability(const Tensor& context, const Tensor& features, const std::vector<float>& valid,
                                      const LinkLayout& links) const {
  if (!cfg_.has_gate()) throw std::logic_error("gate_probability: network has no second stage");
  if (links.size() == 0) return Tensor::zeros({0, 1});
  const auto m = static_cast<std::size_t>(cfg_.tokens);
  if (cfg_.mlp) {
    Tensor in = concat({gather_rows(context, links.receiver_row), gather_rows(pool(features, valid), links.helper_row)}, 1);
    return sigmoid(gate.l2(relu(gate.l1(in))));
  }
  Tensor q = gather_rows(matmul(context, gate.wq), links.receiver_row);
  Tensor k = gather_rows(matmul(features, gate.wk), helper_token_rows(links, m));
  Tensor scores = scale(batched_matmul(q, k, links.size(), true), 1.0f / std::sqrt(static_cast<float>(cfg_.d_k)));
  // Padding rows carry no score.
  Tensor keep = Tensor::constant(scores.shape(), helper_valid(links, valid, m));
  return sigmoid(gate.fc(mul(scores, keep)));
}

Tensor CacomNetwork::generate_message(const Tensor& context, const Tensor& features, const std::vector<float>& valid,
                                      const LinkLayout& links) const {
  if (!cfg_.has_gate()) throw std::logic_error("generate_message: network has no second stage");
  if (links.size() == 0) return Tensor::zeros({0, static_cast<std::size_t>(cfg_.message_dim)});
  const auto m = static_cast<std::size_t>(cfg_.tokens);
  if (cfg_.mlp) {
    Tensor in = concat({gather_rows(context, links.receiver_row), gather_rows(pool(features, valid), links.helper_row)}, 1);
    return generator.l2(relu(generator.l1(in)));
  }
  const auto rows = helper_token_rows(links, m);
  Tensor q = gather_rows(matmul(context, generator.wq), links.receiver_row);  // [P x d_k]
  Tensor k = gather_rows(matmul(features, generator.wk), rows);               // [P*m x d_k]
  Tensor v = gather_rows(matmul(features, generator.wv), rows);               // [P*m x d_m]
  Tensor scores = scale(batched_matmul(q, k, links.size(), true), 1.0f / std::sqrt(static_cast<float>(cfg_.d_k)));
  Tensor attn = softmax(add(scores, column_mask_logits(helper_valid(links, valid, m), 1, m, links.size())), 1);
  return batched_matmul(attn, v, links.size());
}

Tensor CacomNetwork::broadcast_message(const Tensor& features, const std::vector<float>& valid) const {
  if (!(cfg_.communicate && cfg_.broadcast)) throw std::logic_error("broadcast_message: not a bc network");
  return broadcaster(pool(features, valid));
}

PolicyOutput CacomNetwork::policy(const Tensor& features, const std::vector<float>& valid, const Tensor& messages,
                                  const std::vector<std::uint8_t>& open, const Tensor& hidden) const {
  const auto m = static_cast<std::size_t>(cfg_.tokens);
  const std::size_t agents = features.dim(0) / m;
  Tensor tokens = features;
  std::vector<float> token_valid = valid;
  std::size_t group = m;
  if (cfg_.has_messages()) {
    const auto links = static_cast<std::size_t>(cfg_.links_per_receiver());
    if (!messages.defined() || messages.dim(0) != agents * links || open.size() != agents * links) {
      throw DimensionError("policy: expected " + std::to_string(agents * links) + " message rows");
    }
    group = m + links;
    if (links > 0) {
      Tensor proj = policy_net.message_proj(messages);
      std::vector<std::uint32_t> order;
      order.reserve(agents * group);
      token_valid.assign(agents * group, 0.0f);
      for (std::size_t a = 0; a < agents; ++a) {
        for (std::size_t t = 0; t < m; ++t) {
          order.push_back(static_cast<std::uint32_t>(a * m + t));
          token_valid[a * group + t] = valid[a * m + t];
        }
        for (std::size_t k = 0; k < links; ++k) {
          order.push_back(static_cast<std::uint32_t>(agents * m + a * links + k));
          token_valid[a * group + m + k] = open[a * links + k] ? 1.0f : 0.0f;
        }
      }
      tokens = gather_rows(concat({features, proj}, 0), order);
    }
  }
  Tensor mixed = cfg_.mlp ? token_mlp(policy_net.mlp, tokens) : self_attention(policy_net.attn, tokens, token_valid, group);
  Tensor pooled = group_weighted_sum(add(tokens, mixed), pooling_weights(token_valid, group), group);
  PolicyOutput out;
  out.hidden = gru_cell(pooled, hidden, policy_net.gru);
  out.q = policy_net.head(out.hidden);
  return out;
}

Tensor CacomNetwork::mix(const Tensor& q_chosen, const Tensor& state) const {
  const std::size_t n = q_chosen.dim(0);
  const auto agents = static_cast<std::size_t>(cfg_.n_agents), embed = static_cast<std::size_t>(cfg_.mixer_embed);
  if (q_chosen.dim(1) != agents || state.dim(0) != n || state.dim(1) != static_cast<std::size_t>(cfg_.state_dim)) {
    throw DimensionError("mix: q " + shape_str(q_chosen.shape()) + " state " + shape_str(state.shape()));
  }
  Tensor w1 = reshape(abs(mixer.hyper_w1(state)), {n * agents, embed});
  Tensor hidden = elu(add(batched_matmul(q_chosen, w1, n), mixer.hyper_b1(state)));
  Tensor w2 = reshape(abs(mixer.hyper_w2(state)), {n * embed, 1});
  Tensor v = mixer.value2(relu(mixer.value1(state)));
  return add(batched_matmul(hidden, w2, n), v);
}

Tensor CacomNetwork::predict_helper_q(const Tensor& pooled_features, const Tensor& message) const {
  if (!cfg_.has_messages()) throw std::logic_error("predict_helper_q: network exchanges no messages");
  return predictor.l2(relu(predictor.l1(concat({pooled_features, message}, 1))));
}

Tensor CacomNetwork::initial_hidden(std::size_t agent_rows) const {
  return Tensor::zeros({agent_rows, static_cast<std::size_t>(cfg_.d_h)});
}

std::vector<ParamRef> CacomNetwork::parameters() {
  std::vector<ParamRef> out;
  auto add = [&](const std::string& name, Tensor& t) {
    if (t.defined()) out.push_back({name, &t});
  };
  auto add_linear = [&](const std::string& name, Linear& l) {
    add(name + ".w", l.w);
    add(name + ".b", l.b);
  };
  add_linear("encoder.embed", encoder.embed);
  add("encoder.attn.wq", encoder.attn.wq);
  add("encoder.attn.wk", encoder.attn.wk);
  add("encoder.attn.wv", encoder.attn.wv);
  add_linear("encoder.mlp.l1", encoder.mlp.l1);
  add_linear("encoder.mlp.l2", encoder.mlp.l2);
  add_linear("encoder.context", encoder.context);
  add("generator.wq", generator.wq);
  add("generator.wk", generator.wk);
  add("generator.wv", generator.wv);
  add_linear("generator.l1", generator.l1);
  add_linear("generator.l2", generator.l2);
  add("gate.wq", gate.wq);
  add("gate.wk", gate.wk);
  add_linear("gate.fc", gate.fc);
  add_linear("gate.l1", gate.l1);
  add_linear("gate.l2", gate.l2);
  add_linear("broadcast", broadcaster);
  add_linear("policy.message_proj", policy_net.message_proj);
  add("policy.attn.wq", policy_net.attn.wq);
  add("policy.attn.wk", policy_net.attn.wk);
  add("policy.attn.wv", policy_net.attn.wv);
  add_linear("policy.mlp.l1", policy_net.mlp.l1);
  add_linear("policy.mlp.l2", policy_net.mlp.l2);
  add("policy.gru.w_x", policy_net.gru.w_x);
  add("policy.gru.w_h", policy_net.gru.w_h);
  add("policy.gru.b_x", policy_net.gru.b_x);
  add("policy.gru.b_h", policy_net.gru.b_h);
  add_linear("policy.head", policy_net.head);
  add_linear("mixer.hyper_w1", mixer.hyper_w1);
  add_linear("mixer.hyper_b1", mixer.hyper_b1);
  add_linear("mixer.hyper_w2", mixer.hyper_w2);
  add_linear("mixer.value1", mixer.value1);
  add_linear("mixer.value2", mixer.value2);
  add_linear("predictor.l1", predictor.l1);
  add_linear("predictor.l2", predictor.l2);
  if (cfg_.has_context()) add("quant.context.step", context_q_.step());
  if (cfg_.has_messages()) add("quant.message.step", message_q_.step());
  return out;
}

std::vector<Tensor> CacomNetwork::gate_parameters() {
  std::vector<Tensor> out;
  for (auto& p : parameters())
    if (p.name.starts_with("gate.")) out.push_back(*p.tensor);
  return out;
}

std::vector<Tensor> CacomNetwork::main_parameters() {
  std::vector<Tensor> out;
  for (auto& p : parameters())
    if (!p.name.starts_with("gate.")) out.push_back(*p.tensor);
  return out;
}

std::vector<ad::NamedTensor> CacomNetwork::named_tensors() {
  std::vector<ad::NamedTensor> out;
  for (auto& p : parameters()) out.push_back({p.name, *p.tensor});
  return out;
}

void CacomNetwork::load(const std::vector<ad::NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
  auto params = parameters();
  if (params.size() != tensors.size()) {
    throw DimensionError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, network expects " +
                         std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DimensionError("checkpoint lacks tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor->shape()) {
      throw DimensionError("tensor '" + p.name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                           shape_str(p.tensor->shape()));
    }
  }
  for (auto& p : params) {
    auto src = by_name[p.name]->data();
    std::copy(src.begin(), src.end(), p.tensor->mutable_data().begin());
  }
  if (cfg_.has_context()) context_q_.set_step(context_q_.step_value());
  if (cfg_.has_messages()) message_q_.set_step(message_q_.step_value());
}

void CacomNetwork::copy_from(CacomNetwork& other) { soft_update_from(other, 1.0f); }

void CacomNetwork::soft_update_from(CacomNetwork& other, float tau) {
  auto mine = parameters();
  auto theirs = other.parameters();
  if (mine.size() != theirs.size()) throw DimensionError("soft update between differently shaped networks");
  for (std::size_t k = 0; k < mine.size(); ++k) {
    if (mine[k].tensor->shape() != theirs[k].tensor->shape()) throw DimensionError("soft update: shape mismatch at " + mine[k].name);
    auto dst = mine[k].tensor->mutable_data();
    auto src = theirs[k].tensor->data();
    if (tau == 1.0f) {
      std::copy(src.begin(), src.end(), dst.begin());
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau * src[i] + (1.0f - tau) * dst[i];
    }
  }
  if (other.context_q_.calibrated()) context_q_.set_step(context_q_.step_value());
  if (other.message_q_.calibrated()) message_q_.set_step(message_q_.step_value());
}

void CacomNetwork::clamp_steps() {
  context_q_.clamp_step();
  message_q_.clamp_step();
}

std::vector<int> argmax_rows(const Tensor& q) {
  const auto rows = q.dim(0), cols = q.dim(1);
  std::vector<int> out(rows);
  auto v = q.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace cacom::nets
