#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cacom/config.hpp"
#include "cacom/nets.hpp"
#include "cacom/protocol.hpp"

using namespace cacom;
using namespace cacom::nets;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  const std::size_t r = t.rank() == 1 ? 1 : t.dim(0), c = t.shape().back();
  Mat m(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t[i * c + j];
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Mat linear(const Linear& l, const Mat& x) {
  Mat y = mm(x, to_mat(l.w));
  if (l.b.defined())
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += l.b[j];
  return y;
}

Mat relu(Mat x) {
  for (auto& r : x)
    for (auto& v : r) v = std::max(0.0, v);
  return x;
}

// softmax((x_i Wq)(x_j Wk)^T / sqrt(d_k)) over valid j, times x_j Wv.
Mat naive_attention(const Mat& qrows, const Mat& krows, const Mat& vrows, const std::vector<float>& valid, double dk) {
  Mat out(qrows.size(), std::vector<double>(vrows[0].size(), 0.0));
  for (std::size_t i = 0; i < qrows.size(); ++i) {
    std::vector<double> s(krows.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < krows.size(); ++j) {
      if (!valid[j]) continue;
      double dot = 0;
      for (std::size_t c = 0; c < qrows[i].size(); ++c) dot += qrows[i][c] * krows[j][c];
      s[j] = dot / std::sqrt(dk);
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < krows.size(); ++j) z += valid[j] ? std::exp(s[j] - mx) : 0.0;
    for (std::size_t j = 0; j < krows.size(); ++j) {
      if (!valid[j]) continue;
      const double a = std::exp(s[j] - mx) / z;
      for (std::size_t c = 0; c < vrows[0].size(); ++c) out[i][c] += a * vrows[j][c];
    }
  }
  return out;
}

Mat self_attention(const CacomNetwork::Attention& a, const Mat& x, const std::vector<float>& valid, double dk) {
  return naive_attention(mm(x, to_mat(a.wq)), mm(x, to_mat(a.wk)), mm(x, to_mat(a.wv)), valid, dk);
}

Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

std::vector<double> masked_mean(const Mat& x, const std::vector<float>& valid) {
  std::vector<double> out(x[0].size(), 0.0);
  double n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!valid[i]) continue;
    n += 1;
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += x[i][c];
  }
  for (auto& v : out) v = n > 0 ? v / n : 0.0;
  return out;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

NetConfig small() {
  NetConfig c;
  c.n_agents = 3;
  c.tokens = 4;
  c.state_dim = 8;
  c.d_f = 8;
  c.d_k = 4;
  c.d_h = 6;
  c.context_dim = 2;
  c.message_dim = 3;
  c.mixer_embed = 5;
  c.predictor_hidden = 7;
  return c;
}

TokenBatch random_tokens(const NetConfig& c, std::size_t agents, std::mt19937_64& rng, bool some_invalid = true) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  const auto m = static_cast<std::size_t>(c.tokens), f = static_cast<std::size_t>(c.token_features);
  std::vector<float> tok(agents * m * f), valid(agents * m, 1.0f);
  for (auto& x : tok) x = d(rng);
  for (std::size_t r = 0; r < agents * m; ++r) {
    if (some_invalid && r % m != 0 && rng() % 3 == 0) valid[r] = 0.0f;
    if (!valid[r]) std::fill_n(tok.begin() + static_cast<std::ptrdiff_t>(r * f), f, 0.0f);
  }
  return {Tensor::constant({agents * m, f}, tok), valid};
}

Mat rows(const Mat& x, std::size_t begin, std::size_t count) { return Mat(x.begin() + static_cast<std::ptrdiff_t>(begin), x.begin() + static_cast<std::ptrdiff_t>(begin + count)); }

std::vector<float> sub(const std::vector<float>& v, std::size_t begin, std::size_t count) {
  return {v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(begin + count)};
}

void expect_close(const Tensor& got, const Mat& want, double tol = 1e-5) {
  const auto g = to_mat(got);
  ASSERT_EQ(g.size(), want.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) EXPECT_NEAR(g[i][j], want[i][j], tol) << i << "," << j;
}

}  // namespace

TEST(Naive, EncoderMatchesReference) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = small();
    CacomNetwork net(c, rng());
    auto tb = random_tokens(c, 3, rng);
    auto enc = net.encode(tb);
    const auto m = static_cast<std::size_t>(c.tokens);
    Mat e = relu(linear(net.encoder.embed, to_mat(tb.tokens)));
    Mat want;
    for (std::size_t a = 0; a < 3; ++a) {
      const auto group = rows(e, a * m, m);
      const auto f = add(group, self_attention(net.encoder.attn, group, sub(tb.valid, a * m, m), c.d_k));
      want.insert(want.end(), f.begin(), f.end());
    }
    expect_close(enc.features, want);
    Mat ctx;
    for (std::size_t a = 0; a < 3; ++a) ctx.push_back(linear(net.encoder.context, {masked_mean(rows(want, a * m, m), sub(tb.valid, a * m, m))})[0]);
    expect_close(enc.context_pre, ctx);
  }
}

TEST(Naive, GeneratorAndGateMatchReference) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = small();
    CacomNetwork net(c, rng());
    auto tb = random_tokens(c, 3, rng);
    auto enc = net.encode(tb);
    auto ctx = net.quantize_context(enc.context_pre).values;
    auto links = LinkLayout::for_envs(1, 3);
    auto msg = net.generate_message(ctx, enc.features, tb.valid, links);
    auto prob = net.gate_probability(ctx, enc.features, tb.valid, links);
    const auto m = static_cast<std::size_t>(c.tokens);
    const Mat f = to_mat(enc.features), cm = to_mat(ctx);
    Mat want_msg, want_p;
    for (std::size_t l = 0; l < links.size(); ++l) {
      const auto hf = rows(f, links.helper_row[l] * m, m);
      const auto hv = sub(tb.valid, links.helper_row[l] * m, m);
      const Mat q = mm({cm[links.receiver_row[l]]}, to_mat(net.generator.wq));
      want_msg.push_back(naive_attention(q, mm(hf, to_mat(net.generator.wk)), mm(hf, to_mat(net.generator.wv)), hv, c.d_k)[0]);
      // Gate: scores against valid helper tokens, FC over the m scores.
      const Mat gq = mm({cm[links.receiver_row[l]]}, to_mat(net.gate.wq));
      const Mat gk = mm(hf, to_mat(net.gate.wk));
      Mat scores(1, std::vector<double>(m, 0.0));
      for (std::size_t j = 0; j < m; ++j) {
        if (!hv[j]) continue;
        for (std::size_t k = 0; k < gk[j].size(); ++k) scores[0][j] += gq[0][k] * gk[j][k];
        scores[0][j] /= std::sqrt(static_cast<double>(c.d_k));
      }
      want_p.push_back({sigm(linear(net.gate.fc, scores)[0][0])});
    }
    expect_close(msg, want_msg);
    expect_close(prob, want_p);
  }
}

TEST(Naive, PolicyMatchesReference) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = small();
    CacomNetwork net(c, rng());
    auto tb = random_tokens(c, 3, rng);
    auto enc = net.encode(tb);
    std::normal_distribution<float> d(0.0f, 1.0f);
    std::vector<float> msgs(6 * 3), h(3 * 6);
    for (auto& x : msgs) x = d(rng);
    for (auto& x : h) x = d(rng) * 0.5f;
    std::vector<std::uint8_t> open(6);
    for (auto& o : open) o = rng() % 2;
    auto out = net.policy(enc.features, tb.valid, Tensor::constant({6, 3}, msgs), open, Tensor::constant({3, 6}, h));

    const auto m = static_cast<std::size_t>(c.tokens);
    const Mat f = to_mat(enc.features), proj = linear(net.policy_net.message_proj, to_mat(Tensor::constant({6, 3}, msgs)));
    const Mat H = to_mat(Tensor::constant({3, 6}, h));
    Mat want_q;
    for (std::size_t a = 0; a < 3; ++a) {
      Mat tokens = rows(f, a * m, m);
      std::vector<float> valid = sub(tb.valid, a * m, m);
      for (std::size_t k = 0; k < 2; ++k) {
        tokens.push_back(proj[a * 2 + k]);
        valid.push_back(open[a * 2 + k] ? 1.0f : 0.0f);
      }
      const auto pooled = masked_mean(add(tokens, self_attention(net.policy_net.attn, tokens, valid, c.d_k)), valid);
      // GRU: r, z, candidate column blocks.
      const Mat gx = add(mm({pooled}, to_mat(net.policy_net.gru.w_x)), {std::vector<double>(net.policy_net.gru.b_x.data().begin(), net.policy_net.gru.b_x.data().end())});
      const Mat gh = add(mm({H[a]}, to_mat(net.policy_net.gru.w_h)), {std::vector<double>(net.policy_net.gru.b_h.data().begin(), net.policy_net.gru.b_h.data().end())});
      std::vector<double> hn(6);
      for (std::size_t j = 0; j < 6; ++j) {
        const double r = sigm(gx[0][j] + gh[0][j]);
        const double z = sigm(gx[0][6 + j] + gh[0][6 + j]);
        const double cand = std::tanh(gx[0][12 + j] + r * gh[0][12 + j]);
        hn[j] = (1 - z) * cand + z * H[a][j];
      }
      want_q.push_back(linear(net.policy_net.head, {hn})[0]);
    }
    expect_close(out.q, want_q, 2e-5);
  }
}

TEST(Encode, ZeroInputZeroBias) {
  const auto c = small();
  CacomNetwork net(c, 4);
  for (auto& p : net.parameters())
    if (p.name.size() > 2 && p.name.substr(p.name.size() - 2) == ".b") std::fill(p.tensor->mutable_data().begin(), p.tensor->mutable_data().end(), 0.0f);
  const auto rows = static_cast<std::size_t>(2 * c.tokens);
  TokenBatch tb{Tensor::zeros({rows, 8}), std::vector<float>(rows, 1.0f)};
  auto enc = net.encode(tb);
  EXPECT_EQ(enc.features.shape(), (ad::Shape{static_cast<std::size_t>(2 * c.tokens), 8}));
  EXPECT_EQ(enc.context_pre.shape(), (ad::Shape{2, 2}));
  for (float v : enc.features.data()) EXPECT_EQ(v, 0.0f);
  for (float v : enc.context_pre.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, ContextInvariantToSwappingTeammates) {
  ExperimentConfig cfg;
  CacomNetwork net(cfg.net_config(), 5);
  auto obs = env::observe_all(cfg.env, env::reset(cfg.env, 5));
  auto tb = proto::token_batch(std::span(obs).first(1));
  auto swapped = obs[0];
  for (int c = 0; c < env::kTokenFeatures; ++c) std::swap(swapped.tokens[8 + c], swapped.tokens[16 + c]);
  std::vector<env::Observation> one{swapped};
  auto a = net.encode(tb).context_pre, b = net.encode(proto::token_batch(one)).context_pre;
  for (std::size_t k = 0; k < a.numel(); ++k) EXPECT_NEAR(a[k], b[k], 1e-5);
}

TEST(Encode, SharedParametersPermuteWithAgents) {
  const auto c = small();
  CacomNetwork net(c, 6);
  std::mt19937_64 rng(6);
  auto tb = random_tokens(c, 2, rng);
  const auto m = static_cast<std::size_t>(c.tokens);
  const auto d = tb.tokens.data();
  std::vector<float> swapped(d.begin() + static_cast<std::ptrdiff_t>(m * 8), d.end());
  swapped.insert(swapped.end(), d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m * 8));
  std::vector<float> valid(tb.valid.begin() + static_cast<std::ptrdiff_t>(m), tb.valid.end());
  valid.insert(valid.end(), tb.valid.begin(), tb.valid.begin() + static_cast<std::ptrdiff_t>(m));
  auto a = net.encode(tb).context_pre;
  auto b = net.encode({Tensor::constant(tb.tokens.shape(), swapped), valid}).context_pre;
  EXPECT_EQ(a[0], b[2]);
  EXPECT_EQ(a[1], b[3]);
}

TEST(Generator, ZeroFeaturesGiveZeroMessage) {
  const auto c = small();
  CacomNetwork net(c, 7);
  auto links = LinkLayout::for_envs(1, 3);
  auto ctx = Tensor::constant({3, 2}, {1, -2, 0.5f, 3, -1, 1});
  auto msg = net.generate_message(ctx, Tensor::zeros({12, 8}), std::vector<float>(12, 1.0f), links);
  for (float v : msg.data()) EXPECT_EQ(v, 0.0f);
  auto q = net.quantize_message(ad::mul(msg, Tensor::zeros(msg.shape())));
  for (auto code : q.codes) EXPECT_EQ(code, 0);
}

TEST(Generator, SingleValidTokenPassesItsValue) {
  const auto c = small();
  CacomNetwork net(c, 8);
  std::mt19937_64 rng(8);
  auto tb = random_tokens(c, 3, rng, false);
  for (std::size_t r = 0; r < tb.valid.size(); ++r) tb.valid[r] = r % 4 == 0 ? 1.0f : 0.0f;
  auto f = net.encode(tb).features;
  auto links = LinkLayout::for_envs(1, 3);
  auto ctx = Tensor::constant({3, 2}, {1, -2, 0.5f, 3, -1, 1});
  auto msg = net.generate_message(ctx, f, tb.valid, links);
  const auto v = mm(to_mat(f), to_mat(net.generator.wv));
  for (std::size_t l = 0; l < links.size(); ++l)
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(msg[l * 3 + k], v[links.helper_row[l] * 4][k], 1e-5);
}

TEST(Gate, SaturationAndStrictThreshold) {
  ExperimentConfig cfg;
  cfg.env.n_agents = 2;
  CacomNetwork net(cfg.net_config(), 9);
  auto obs = env::observe_all(cfg.env, env::reset(cfg.env, 9));
  net.gate.fc.b.mutable_data()[0] = 50.0f;
  proto::LinkLedger ledger(2, 24);
  auto out = proto::run_round(obs, net, ledger, proto::GatePolicy::Learned);
  for (const auto& g : out.gates) {
    EXPECT_NEAR(g.probability, 1.0f, 1e-6);
    EXPECT_TRUE(g.open);
  }
  for (auto* t : {&net.gate.wq, &net.gate.wk, &net.gate.fc.w, &net.gate.fc.b})
    std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0f);
  out = proto::run_round(obs, net, ledger, proto::GatePolicy::Learned);
  for (const auto& g : out.gates) {
    EXPECT_EQ(g.probability, 0.5f);
    EXPECT_FALSE(g.open);
  }
}

TEST(Policy, ClosedLinksAreIgnoredAndShapesHold) {
  const auto c = small();
  CacomNetwork net(c, 10);
  std::mt19937_64 rng(10);
  auto tb = random_tokens(c, 3, rng);
  auto f = net.encode(tb).features;
  const std::vector<std::uint8_t> closed(6, 0);
  auto a = net.policy(f, tb.valid, Tensor::zeros({6, 3}), closed, net.initial_hidden(3));
  std::vector<float> junk(18, 9.0f);
  auto b = net.policy(f, tb.valid, Tensor::constant({6, 3}, junk), closed, net.initial_hidden(3));
  EXPECT_EQ(a.q.shape(), (ad::Shape{3, 5}));
  EXPECT_EQ(a.hidden.shape(), (ad::Shape{3, 6}));
  for (std::size_t k = 0; k < a.q.numel(); ++k) EXPECT_EQ(a.q[k], b.q[k]);
  EXPECT_THROW(net.policy(f, tb.valid, Tensor::zeros({5, 3}), closed, net.initial_hidden(3)), DimensionError);
}

TEST(Policy, DuplicatedMessageOnlyReweightsAttention) {
  // Two identical open messages vs one: same token value, double weight in
  // both the attention and the mean. The naive reference covers both cases.
  const auto c = small();
  CacomNetwork net(c, 11);
  std::mt19937_64 rng(11);
  auto tb = random_tokens(c, 3, rng);
  auto f = net.encode(tb).features;
  std::vector<float> one(18, 0.0f);
  for (int k = 0; k < 3; ++k) one[k] = 0.7f * (k + 1);
  auto two = one;
  for (int k = 0; k < 3; ++k) two[3 + k] = one[k];
  auto pa = net.policy(f, tb.valid, Tensor::constant({6, 3}, one), {1, 0, 0, 0, 0, 0}, net.initial_hidden(3));
  auto pb = net.policy(f, tb.valid, Tensor::constant({6, 3}, two), {1, 1, 0, 0, 0, 0}, net.initial_hidden(3));
  bool differs = false;
  for (std::size_t k = 0; k < 5; ++k) differs = differs || pa.q[k] != pb.q[k];
  EXPECT_TRUE(differs);
  for (std::size_t k = 5; k < 15; ++k) EXPECT_EQ(pa.q[k], pb.q[k]);
}

TEST(Policy, ReceivedAndLocalMessagesGiveSameGreedyActions) {
  ExperimentConfig cfg;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    CacomNetwork net(cfg.net_config(), seed);
    auto obs = env::observe_all(cfg.env, env::reset(cfg.env, seed));
    proto::LinkLedger ledger(4, 24);
    auto round = proto::run_round(obs, net, ledger, proto::GatePolicy::Learned);
    auto tb = proto::token_batch(obs);
    auto enc = net.encode(tb);
    auto ctx = net.quantize_context(enc.context_pre).values;
    auto links = LinkLayout::for_envs(1, 4);
    auto pre = net.generate_message(ctx, enc.features, tb.valid, links);
    std::vector<float> z;
    for (auto o : round.open) z.insert(z.end(), 4, o ? 1.0f : 0.0f);
    auto local = net.quantize_message(ad::mul(pre, Tensor::constant(pre.shape(), z))).values;
    auto h = net.initial_hidden(4);
    auto a = net.policy(round.features, round.valid, round.received, round.open, h);
    auto b = net.policy(enc.features, tb.valid, local, round.open, h);
    EXPECT_EQ(argmax_rows(a.q), argmax_rows(b.q));
  }
}

TEST(Mixer, IdentityLikeHypernetIsMonotoneSum) {
  NetConfig c = small();
  c.mixer_embed = 1;
  c.n_agents = 3;
  CacomNetwork net(c, 12);
  // Zero weights leave only the biases: |W1| = |W2| = 1, no state term.
  auto set = [](Linear& l, float b) {
    std::fill(l.w.mutable_data().begin(), l.w.mutable_data().end(), 0.0f);
    std::fill(l.b.mutable_data().begin(), l.b.mutable_data().end(), b);
  };
  set(net.mixer.hyper_w1, 1);
  set(net.mixer.hyper_b1, 0);
  set(net.mixer.hyper_w2, 1);
  set(net.mixer.value1, 0);
  set(net.mixer.value2, 0);
  auto state = Tensor::zeros({1, 8});
  auto q = Tensor::constant({1, 3}, {0.5f, -2.0f, 1.0f});
  const float sum = 0.5f - 2.0f + 1.0f;
  EXPECT_NEAR(net.mix(q, state)[0], sum > 0 ? sum : std::expm1(sum), 1e-6);
  auto up = Tensor::constant({1, 3}, {0.6f, -2.0f, 1.0f});
  EXPECT_GT(net.mix(up, state)[0], net.mix(q, state)[0]);
}

TEST(Predictor, ZeroWeightsAndGradientPath) {
  const auto c = small();
  CacomNetwork net(c, 13);
  std::mt19937_64 rng(13);
  auto tb = random_tokens(c, 3, rng);
  auto links = LinkLayout::for_envs(1, 3);
  {
    CacomNetwork zero(c, 13);
    for (auto* l : {&zero.predictor.l1, &zero.predictor.l2}) {
      std::fill(l->w.mutable_data().begin(), l->w.mutable_data().end(), 0.0f);
      std::fill(l->b.mutable_data().begin(), l->b.mutable_data().end(), 0.0f);
    }
    auto p = zero.predict_helper_q(Tensor::zeros({6, 8}), Tensor::constant({6, 3}, std::vector<float>(18, 1.0f)));
    EXPECT_EQ(p.shape(), (ad::Shape{6, 5}));
    for (float v : p.data()) EXPECT_EQ(v, 0.0f);
  }
  net.message_quantizer().set_step(0.05f);
  ad::Tape tape;
  Tensor loss;
  {
    auto rec = tape.record();
    auto enc = net.encode(tb);
    auto ctx = net.quantize_context(enc.context_pre).values;
    auto msg = net.quantize_message(net.generate_message(ctx, enc.features, tb.valid, links)).values;
    auto pooled = ad::gather_rows(net.pool(enc.features, tb.valid), links.receiver_row);
    loss = ad::sum(net.predict_helper_q(pooled, msg));
  }
  tape.backward(loss);
  double norm = 0;
  for (float g : net.generator.wv.grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(Checkpoint, LoadCopyAndMismatch) {
  const auto c = small();
  CacomNetwork a(c, 14), b(c, 15);
  b.load(a.named_tensors());
  for (std::size_t k = 0; k < a.mixer.hyper_w1.w.numel(); ++k) EXPECT_EQ(a.mixer.hyper_w1.w[k], b.mixer.hyper_w1.w[k]);
  NetConfig other = c;
  other.d_f = 16;
  CacomNetwork d(other, 16);
  EXPECT_THROW(d.load(a.named_tensors()), DimensionError);
  CacomNetwork copy(a);
  copy.mixer.hyper_w1.w.mutable_data()[0] += 1.0f;
  EXPECT_NE(copy.mixer.hyper_w1.w[0], a.mixer.hyper_w1.w[0]);
}

TEST(Config, GateParametersAreDisjointFromMain) {
  const auto c = small();
  CacomNetwork net(c, 17);
  auto gate = net.gate_parameters();
  auto main = net.main_parameters();
  EXPECT_FALSE(gate.empty());
  for (const auto& g : gate)
    for (const auto& m : main) EXPECT_NE(g.node(), m.node());
  EXPECT_EQ(gate.size() + main.size(), net.parameters().size());
}
