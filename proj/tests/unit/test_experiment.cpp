#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cacom/experiment.hpp"

using namespace cacom;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig cfg;
  cfg.env.steps_per_episode = 10;
  cfg.total_steps = 400;
  cfg.eval_interval = 200;
  cfg.eval_episodes = 2;
  cfg.checkpoint_interval = 200;
  cfg.train.batch_episodes = 2;
  cfg.train.pseudo_label_episodes = 2;
  cfg.train.pseudo_label_pairs = 8;
  cfg.train.gate_start_fraction = 0.0;
  cfg.net.d_f = 8;
  cfg.net.d_k = 4;
  cfg.net.d_h = 8;
  cfg.net.mixer_embed = 4;
  cfg.net.predictor_hidden = 8;
  cfg.output_dir = out.string();
  return cfg;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cacom_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Stats, MeanAndStudentInterval) {
  auto one = mean_ci95({4.0});
  EXPECT_EQ(one.mean, 4.0);
  EXPECT_EQ(one.ci_low, 4.0);
  EXPECT_EQ(one.ci_high, 4.0);
  // n = 5, sd = sqrt(2.5), t_{0.975,4} = 2.776445
  auto s = mean_ci95({1, 2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.ci_high - s.mean, 2.776445 * std::sqrt(2.5 / 5.0), 1e-5);
  EXPECT_NEAR(s.mean - s.ci_low, s.ci_high - s.mean, 1e-12);
  EXPECT_EQ(s.n, 5u);
}

TEST(Sweep, VariantsAndInvalidValues) {
  ExperimentConfig base;
  base.output_dir = "out";
  auto v = sweep_variant(base, SweepAxis::Personalized, 8);
  EXPECT_EQ(v.protocol.message_dim, 2);
  EXPECT_EQ(v.protocol.budget, 8 + 8);
  EXPECT_EQ(fs::path(v.output_dir), fs::path("out") / "sweep_personalized_8");
  auto none = sweep_variant(base, SweepAxis::Personalized, 0);
  EXPECT_EQ(none.protocol.message_dim, 0);
  EXPECT_EQ(none.protocol.budget, 8);
  EXPECT_FALSE(none.net_config().has_gate());
  auto ctx = sweep_variant(base, SweepAxis::Context, 12);
  EXPECT_EQ(ctx.protocol.context_dim, 3);
  EXPECT_EQ(ctx.protocol.budget, 12 + 16);
  EXPECT_THROW(sweep_variant(base, SweepAxis::Context, 0), ConfigError);
  EXPECT_THROW(sweep_variant(base, SweepAxis::Personalized, 6), ConfigError);
  base.ablation.bc = true;
  EXPECT_THROW(sweep_variant(base, SweepAxis::Personalized, 8), ConfigError);
  EXPECT_EQ(parse_sweep_axis("context"), SweepAxis::Context);
  EXPECT_THROW(parse_sweep_axis("payload"), ConfigError);
}

TEST(Run, WritesArtifactsAndIsDeterministic) {
  const auto a = scratch("run_a"), b = scratch("run_b");
  const auto cfg = tiny(a);
  auto ra = train_run(cfg, 3, a);
  auto rb = train_run(cfg, 3, b);
  for (const char* f : {"config.txt", "metrics.jsonl", "eval.jsonl", "trajectories.jsonl", "final.bin", "record.json", "ckpt_200.bin"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  EXPECT_EQ(lines(a / "metrics.jsonl"), 4u);
  EXPECT_EQ(lines(a / "eval.jsonl"), 2u);
  EXPECT_EQ(lines(a / "trajectories.jsonl"), 10u);
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "eval.jsonl"), slurp(b / "eval.jsonl"));
  EXPECT_EQ(slurp(a / "final.bin"), slurp(b / "final.bin"));
  EXPECT_EQ(ra.final_return, rb.final_return);
  EXPECT_EQ(ra.config_hash, cfg.hash());
  EXPECT_EQ(parse_config(slurp(a / "config.txt")).hash(), cfg.hash());

  // The final checkpoint reproduces the final evaluation.
  auto ev = evaluate_checkpoint(cfg, a / "final.bin", cfg.eval_episodes, 3);
  EXPECT_EQ(ev.mean_return, ra.final_return);

  auto other = cfg;
  other.net.d_f = 16;
  EXPECT_THROW(evaluate_checkpoint(other, a / "final.bin", 1, 1), DimensionError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, AggregateAcrossSeeds) {
  const auto dir = scratch("agg");
  auto cfg = tiny(dir);
  cfg.seeds = {1, 2};
  std::ostringstream log;
  auto records = train_all(cfg, log);
  ASSERT_EQ(records.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "seed_1" / "record.json"));
  const auto csv = slurp(dir / "aggregate.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,mean_return,ci95_low,ci95_high,n");
  EXPECT_EQ(lines(dir / "aggregate.csv"), 3u);
  fs::remove_all(dir);
}

TEST(Sweep, SkipsInvalidValuesAndWritesTables) {
  const auto dir = scratch("sweep");
  auto cfg = tiny(dir);
  cfg.total_steps = 200;
  std::ostringstream log;
  auto rows = run_sweep(cfg, SweepAxis::Personalized, {8, 3, 0, 8}, log);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].bits, 0);
  EXPECT_EQ(rows[1].bits, 8);
  EXPECT_NE(log.str().find("skipping personalized=3"), std::string::npos);
  EXPECT_EQ(lines(dir / "sweep.csv"), 3u);
  EXPECT_EQ(lines(dir / "sweep_summary.csv"), 3u);
  fs::remove_all(dir);
}
