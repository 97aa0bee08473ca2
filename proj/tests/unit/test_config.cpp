#include <gtest/gtest.h>

#include <filesystem>

#include "cacom/config.hpp"

using namespace cacom;

namespace {

std::string error_of(std::string_view text) {
  try {
    parse_config(text, "t.conf");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsSerializeAndRoundTrip) {
  ExperimentConfig cfg;
  const auto text = serialize_config(cfg);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
  EXPECT_EQ(parse_config(text).hash(), cfg.hash());
  EXPECT_EQ(cfg.hash().size(), 16u);
}

TEST(Config, ParsesValuesCommentsAndSeeds) {
  auto cfg = parse_config(
      "# desk run\n"
      "env.name = cn   # navigation\n"
      "\n"
      "seeds = 3, 1,2\n"
      "train.lr = 0.001\n"
      "ablation.no_aux = true\n"
      "protocol.budget = 32\n");
  EXPECT_EQ(cfg.env.scenario, env::Scenario::CooperativeNavigation);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{3, 1, 2}));
  EXPECT_FLOAT_EQ(cfg.train.lr, 0.001f);
  EXPECT_TRUE(cfg.ablation.no_aux);
  EXPECT_FALSE(cfg.train_config().aux_loss);
  EXPECT_EQ(cfg.budget_bits(), 32);
  auto back = parse_config(serialize_config(cfg));
  EXPECT_EQ(serialize_config(back), serialize_config(cfg));
  EXPECT_NE(back.hash(), ExperimentConfig{}.hash());
}

TEST(Config, HashIgnoresOutputDirectory) {
  ExperimentConfig a, b;
  b.output_dir = "/elsewhere/runs";
  EXPECT_EQ(a.hash(), b.hash());
  b.train.lr *= 2;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, ErrorsNameTheLine) {
  EXPECT_EQ(error_of("\n\nbogus.key = 1\n"), "t.conf:3: unknown key 'bogus.key'");
  EXPECT_EQ(error_of("train.lr = 1e-3\ntrain.lr = 1e-4\n"), "t.conf:2: train.lr: duplicate key");
  EXPECT_EQ(error_of("no equals here\n"), "t.conf:1: expected 'key = value'");
  EXPECT_NE(error_of("train.batch_episodes = many\n").find("t.conf:1: train.batch_episodes"), std::string::npos);
  EXPECT_NE(error_of("env.name = smac\n").find("env.name"), std::string::npos);
}

TEST(Config, SemanticValidation) {
  EXPECT_NE(error_of("ablation.bc = true\nablation.no_gate = true\n").find("ablation.no_gate"), std::string::npos);
  EXPECT_NE(error_of("protocol.budget = 16\n").find("protocol.budget"), std::string::npos);
  EXPECT_NE(error_of("protocol.message_bits = 17\n").find("protocol.message_bits"), std::string::npos);
  EXPECT_NE(error_of("seeds = \n").find("seeds"), std::string::npos);
  EXPECT_NE(error_of("train.gamma = 1.5\n").find("gamma"), std::string::npos);
  EXPECT_NE(error_of("train.gate_learning_interval = 150\n").find("gate_learning_interval"), std::string::npos);
  // Budgets are ignored entirely for the no-communication baseline.
  EXPECT_EQ(error_of("ablation.no_comm = true\nprotocol.budget = 0\n"), "");
}

TEST(Config, DerivedNetworkSettings) {
  ExperimentConfig cfg;
  auto n = cfg.net_config();
  EXPECT_EQ(n.n_agents, 4);
  EXPECT_EQ(n.tokens, 5);
  EXPECT_EQ(n.state_dim, 24);
  EXPECT_TRUE(n.has_gate());
  cfg.ablation.bc = true;
  EXPECT_EQ(cfg.broadcast_dim(), 6);
  EXPECT_FALSE(cfg.net_config().has_gate());
  cfg.ablation.bc = false;
  cfg.ablation.no_comm = true;
  EXPECT_EQ(cfg.budget_bits(), 0);
  EXPECT_FALSE(cfg.net_config().has_messages());
}

TEST(Config, LoadMissingFileIsConfigError) {
  EXPECT_THROW(load_config("/nonexistent/cacom.conf"), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  const std::filesystem::path dir = CACOM_SOURCE_DIR "/configs";
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".conf") continue;
    EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
    ++count;
  }
  EXPECT_GE(count, 4);
}
