#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cacom/env.hpp"

using namespace cacom::env;

namespace {

WorldState place(const EnvConfig& cfg, std::vector<Vec2> positions) {
  WorldState s;
  for (std::size_t e = 0; e < positions.size(); ++e) {
    Entity ent;
    ent.pos = positions[e];
    ent.role = static_cast<int>(e) < cfg.n_agents ? Role::Agent
               : cfg.scenario == Scenario::PredatorPrey ? Role::Prey
                                                        : Role::Landmark;
    s.entities.push_back(ent);
  }
  return s;
}

double dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

TEST(Reset, DeterministicAndCounted) {
  const auto pp = EnvConfig::predator_prey_desk();
  EXPECT_EQ(reset(pp, 7), reset(pp, 7));
  EXPECT_NE(reset(pp, 7), reset(pp, 8));
  EXPECT_EQ(reset(pp, 1).entities.size(), 6u);
  EXPECT_EQ(reset(EnvConfig::cooperative_navigation(), 1).entities.size(), 16u);
  EXPECT_EQ(reset(EnvConfig::predator_prey(), 1).entities.size(), 14u);
  for (const auto& e : reset(EnvConfig::cooperative_navigation(), 3).entities) {
    EXPECT_LE(std::abs(e.pos.x), 1.0);
    EXPECT_EQ(e.vel, Vec2{});
  }
}

TEST(Config, FullSizePresets) {
  EXPECT_EQ(EnvConfig::predator_prey().n_agents, 10);
  EXPECT_EQ(EnvConfig::predator_prey().n_targets, 4);
  EXPECT_EQ(EnvConfig::predator_prey().tokens(), 5);
  EXPECT_EQ(EnvConfig::cooperative_navigation().tokens(), 9);
  EnvConfig bad;
  bad.n_agents = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Step, NoOpRewardIsNegatedDistances) {
  EnvConfig cfg = EnvConfig::cooperative_navigation_desk();
  cfg.n_agents = 2;
  cfg.n_targets = 1;
  auto s = place(cfg, {{0, 0}, {3, 0}, {1, 1}});
  const std::vector<int> noop{0, 0};
  auto r = step(cfg, s, noop);
  EXPECT_DOUBLE_EQ(r.reward, -std::sqrt(2.0));
  EXPECT_EQ(s.entities[0].pos, (Vec2{0, 0}));
}

TEST(Step, CollisionPenalty) {
  EnvConfig cfg = EnvConfig::cooperative_navigation_desk();
  cfg.n_agents = 2;
  cfg.n_targets = 1;
  auto s = place(cfg, {{0.5, 0.5}, {0.5, 0.5}, {0.5, 1.5}});
  EXPECT_DOUBLE_EQ(reward(cfg, s), -1.0 - 1.0);
}

TEST(Step, DoneOnFortiethStep) {
  const auto cfg = EnvConfig::predator_prey_desk();
  auto s = reset(cfg, 2);
  const std::vector<int> acts(4, 1);
  for (int t = 1; t <= 40; ++t) EXPECT_EQ(step(cfg, s, acts).done, t == 40);
  EXPECT_THROW(step(cfg, s, acts), std::logic_error);
}

TEST(Step, RejectsBadActions) {
  const auto cfg = EnvConfig::predator_prey_desk();
  auto s = reset(cfg, 2);
  EXPECT_THROW(step(cfg, s, std::vector<int>{0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(step(cfg, s, std::vector<int>{0, 0, 0, 5}), std::out_of_range);
}

TEST(Step, ActionsAccelerate) {
  EnvConfig cfg = EnvConfig::cooperative_navigation_desk();
  cfg.n_agents = 1;
  cfg.n_targets = 1;
  auto s = place(cfg, {{0, 0}, {5, 5}});
  step(cfg, s, std::vector<int>{1});
  EXPECT_GT(s.entities[0].vel.x, 0.0);
  EXPECT_EQ(s.entities[0].vel.y, 0.0);
  step(cfg, s, std::vector<int>{4});
  EXPECT_LT(s.entities[0].vel.y, 0.0);
}

TEST(Observe, PaddingForLoneAgent) {
  EnvConfig cfg = EnvConfig::predator_prey_desk();
  cfg.n_agents = 1;
  cfg.n_targets = 1;
  auto s = place(cfg, {{0, 0}, {1, 2}});
  auto o = observe(cfg, s, 0);
  ASSERT_EQ(o.rows, 5);
  EXPECT_TRUE(o.valid(0));
  EXPECT_FALSE(o.valid(1));
  EXPECT_FALSE(o.valid(2));
  EXPECT_TRUE(o.valid(3));
  EXPECT_FALSE(o.valid(4));
  EXPECT_EQ(o.at(3, 0), 1.0f);
  EXPECT_EQ(o.at(3, 1), 2.0f);
  for (int c = 0; c < kTokenFeatures; ++c) EXPECT_EQ(o.at(4, c), 0.0f);
}

TEST(Observe, EgoRowAtOrigin) {
  const auto cfg = EnvConfig::predator_prey_desk();
  auto s = reset(cfg, 11);
  for (int a = 0; a < cfg.n_agents; ++a) {
    auto o = observe(cfg, s, a);
    EXPECT_TRUE(o.valid(0));
    EXPECT_EQ(o.at(0, 0), 0.0f);
    EXPECT_EQ(o.at(0, 1), 0.0f);
    EXPECT_EQ(o.at(0, 4), 1.0f);
  }
}

TEST(Observe, MirroredSquare) {
  EnvConfig cfg = EnvConfig::predator_prey_desk();
  cfg.n_agents = 2;
  cfg.n_targets = 2;
  auto s = place(cfg, {{-1, 0}, {1, 0}, {0, 1}, {0, -1}});
  auto a = observe(cfg, s, 0), b = observe(cfg, s, 1);
  for (int row = 0; row < a.rows; ++row) {
    EXPECT_EQ(a.valid(row), b.valid(row));
    EXPECT_FLOAT_EQ(a.at(row, 0), -b.at(row, 0));
    EXPECT_FLOAT_EQ(a.at(row, 1), b.at(row, 1));
    for (int c = 4; c < kTokenFeatures; ++c) EXPECT_EQ(a.at(row, c), b.at(row, c));
  }
}

TEST(Observe, NearestWithIndexTieBreak) {
  EnvConfig cfg = EnvConfig::predator_prey_desk();
  cfg.n_agents = 1;
  cfg.n_targets = 3;
  auto s = place(cfg, {{0, 0}, {0, 2}, {2, 0}, {0, 1}});
  auto o = observe(cfg, s, 0);
  EXPECT_EQ(o.at(3, 1), 1.0f);  // prey 2, closest
  EXPECT_EQ(o.at(4, 1), 2.0f);  // prey 0 ties prey 1 at distance 2, lower index first
}

TEST(Properties, DeterministicTrajectories) {
  const auto cfg = EnvConfig::predator_prey_desk();
  std::mt19937_64 rng(4);
  std::vector<std::vector<int>> actions(40, std::vector<int>(4));
  for (auto& a : actions)
    for (auto& x : a) x = static_cast<int>(rng() % 5);
  auto run = [&] {
    auto s = reset(cfg, 9);
    std::vector<double> rewards;
    for (const auto& a : actions) rewards.push_back(step(cfg, s, a).reward);
    return std::make_pair(s, rewards);
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, RewardTranslationInvariantAndNonPositive) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-5, 5);
  for (auto cfg : {EnvConfig::predator_prey_desk(), EnvConfig::cooperative_navigation_desk()}) {
    for (int trial = 0; trial < 200; ++trial) {
      auto s = reset(cfg, rng());
      const double r = reward(cfg, s);
      EXPECT_LE(r, 0.0);
      const Vec2 shift{u(rng), u(rng)};
      for (auto& e : s.entities) {
        e.pos.x += shift.x;
        e.pos.y += shift.y;
      }
      EXPECT_NEAR(reward(cfg, s), r, 1e-9);
    }
  }
}

TEST(Properties, PreyFleesNearestPredator) {
  const auto cfg = EnvConfig::predator_prey_desk();
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    auto s = reset(cfg, rng());
    for (int p = cfg.n_agents; p < cfg.entities(); ++p) {
      const auto& prey = s.entities[static_cast<std::size_t>(p)].pos;
      int nearest = 0;
      for (int a = 1; a < cfg.n_agents; ++a)
        if (dist(s.entities[static_cast<std::size_t>(a)].pos, prey) < dist(s.entities[static_cast<std::size_t>(nearest)].pos, prey)) nearest = a;
      const auto& hunter = s.entities[static_cast<std::size_t>(nearest)].pos;
      const Vec2 acc = prey_acceleration(cfg, s, p);
      EXPECT_GE(acc.x * (prey.x - hunter.x) + acc.y * (prey.y - hunter.y), 0.0);
    }
  }
}

TEST(Properties, GlobalStateLayout) {
  const auto cfg = EnvConfig::predator_prey_desk();
  auto s = reset(cfg, 3);
  auto g = global_state(s);
  ASSERT_EQ(g.size(), static_cast<std::size_t>(cfg.state_dim()));
  EXPECT_EQ(g[4], static_cast<float>(s.entities[1].pos.x));
}
