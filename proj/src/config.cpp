#include "cacom/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace cacom {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError(key + ": '" + value + "' is not " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* expected) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) bad_value(key, v, expected);
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename Access>
Field int_field(std::string key, Access at) {
  return {key, [at](const ExperimentConfig& c) { return format_number(at(const_cast<ExperimentConfig&>(c))); },
          [at, key](ExperimentConfig& c, const std::string& v) { at(c) = parse_number<int>(key, v, "an integer"); }};
}

template <typename Access>
Field u64_field(std::string key, Access at) {
  return {key, [at](const ExperimentConfig& c) { return format_number(at(const_cast<ExperimentConfig&>(c))); },
          [at, key](ExperimentConfig& c, const std::string& v) {
            at(c) = parse_number<std::uint64_t>(key, v, "a non-negative integer");
          }};
}

template <typename Access>
Field real_field(std::string key, Access at) {
  using T = std::remove_reference_t<decltype(at(std::declval<ExperimentConfig&>()))>;
  return {key, [at](const ExperimentConfig& c) { return format_number(at(const_cast<ExperimentConfig&>(c))); },
          [at, key](ExperimentConfig& c, const std::string& v) { at(c) = parse_number<T>(key, v, "a number"); }};
}

template <typename Access>
Field bool_field(std::string key, Access at) {
  return {key, [at](const ExperimentConfig& c) { return std::string(at(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); },
          [at, key](ExperimentConfig& c, const std::string& v) { at(c) = parse_bool(key, v); }};
}

// Serialization order is this table's order.
const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      {"name", [](const C& c) { return c.name; }, [](C& c, const std::string& v) { c.name = v; }},
      {"seeds",
       [](const C& c) {
         std::string s;
         for (std::size_t k = 0; k < c.seeds.size(); ++k) s += (k ? "," : "") + format_number(c.seeds[k]);
         return s;
       },
       [](C& c, const std::string& v) {
         c.seeds.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) c.seeds.push_back(parse_number<std::uint64_t>("seeds", trim(item), "a seed list"));
       }},
      u64_field("total_steps", [](C& c) -> auto& { return c.total_steps; }),
      u64_field("eval_interval", [](C& c) -> auto& { return c.eval_interval; }),
      int_field("eval_episodes", [](C& c) -> auto& { return c.eval_episodes; }),
      u64_field("checkpoint_interval", [](C& c) -> auto& { return c.checkpoint_interval; }),
      int_field("trajectory_episodes", [](C& c) -> auto& { return c.trajectory_episodes; }),
      {"output_dir", [](const C& c) { return c.output_dir; }, [](C& c, const std::string& v) { c.output_dir = v; }},

      {"env.name", [](const C& c) { return env::scenario_name(c.env.scenario); },
       [](C& c, const std::string& v) {
         try {
           c.env.scenario = env::parse_scenario(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("env.name: ") + e.what());
         }
       }},
      int_field("env.n_agents", [](C& c) -> auto& { return c.env.n_agents; }),
      int_field("env.n_targets", [](C& c) -> auto& { return c.env.n_targets; }),
      int_field("env.observed_agents", [](C& c) -> auto& { return c.env.observed_agents; }),
      int_field("env.observed_targets", [](C& c) -> auto& { return c.env.observed_targets; }),
      real_field("env.agent_size", [](C& c) -> auto& { return c.env.agent_size; }),
      real_field("env.agent_accel", [](C& c) -> auto& { return c.env.agent_accel; }),
      real_field("env.prey_accel", [](C& c) -> auto& { return c.env.prey_accel; }),
      real_field("env.collision_penalty", [](C& c) -> auto& { return c.env.collision_penalty; }),
      int_field("env.steps_per_episode", [](C& c) -> auto& { return c.env.steps_per_episode; }),
      bool_field("env.random_initial_locations", [](C& c) -> auto& { return c.env.random_initial_locations; }),
      real_field("env.damping", [](C& c) -> auto& { return c.env.damping; }),
      real_field("env.dt", [](C& c) -> auto& { return c.env.dt; }),

      int_field("protocol.budget", [](C& c) -> auto& { return c.protocol.budget; }),
      int_field("protocol.context_dim", [](C& c) -> auto& { return c.protocol.context_dim; }),
      int_field("protocol.context_bits", [](C& c) -> auto& { return c.protocol.context_bits; }),
      int_field("protocol.message_dim", [](C& c) -> auto& { return c.protocol.message_dim; }),
      int_field("protocol.message_bits", [](C& c) -> auto& { return c.protocol.message_bits; }),

      int_field("net.d_f", [](C& c) -> auto& { return c.net.d_f; }),
      int_field("net.d_k", [](C& c) -> auto& { return c.net.d_k; }),
      int_field("net.d_h", [](C& c) -> auto& { return c.net.d_h; }),
      int_field("net.mixer_embed", [](C& c) -> auto& { return c.net.mixer_embed; }),
      int_field("net.predictor_hidden", [](C& c) -> auto& { return c.net.predictor_hidden; }),
      real_field("net.gate_init_bias", [](C& c) -> auto& { return c.net.gate_init_bias; }),

      real_field("train.gamma", [](C& c) -> auto& { return c.train.gamma; }),
      real_field("train.reward_scale", [](C& c) -> auto& { return c.train.reward_scale; }),
      real_field("train.grad_clip", [](C& c) -> auto& { return c.train.grad_clip; }),
      real_field("train.tau", [](C& c) -> auto& { return c.train.tau; }),
      int_field("train.learn_interval", [](C& c) -> auto& { return c.train.learn_interval; }),
      int_field("train.updates_per_learn", [](C& c) -> auto& { return c.train.updates_per_learn; }),
      int_field("train.batch_episodes", [](C& c) -> auto& { return c.train.batch_episodes; }),
      int_field("train.replay_capacity", [](C& c) -> auto& { return c.train.replay_capacity; }),
      real_field("train.lr", [](C& c) -> auto& { return c.train.lr; }),
      real_field("train.gate_lr", [](C& c) -> auto& { return c.train.gate_lr; }),
      real_field("train.epsilon_start", [](C& c) -> auto& { return c.train.epsilon_start; }),
      real_field("train.epsilon_end", [](C& c) -> auto& { return c.train.epsilon_end; }),
      real_field("train.epsilon_fraction", [](C& c) -> auto& { return c.train.epsilon_fraction; }),
      real_field("train.gate_start_fraction", [](C& c) -> auto& { return c.train.gate_start_fraction; }),
      int_field("train.gate_learning_interval", [](C& c) -> auto& { return c.train.gate_learning_interval; }),
      int_field("train.gate_updates_per_event", [](C& c) -> auto& { return c.train.gate_updates_per_event; }),
      int_field("train.pseudo_label_pairs", [](C& c) -> auto& { return c.train.pseudo_label_pairs; }),
      int_field("train.pseudo_label_episodes", [](C& c) -> auto& { return c.train.pseudo_label_episodes; }),
      real_field("train.gate_threshold", [](C& c) -> auto& { return c.train.gate_threshold; }),
      real_field("train.aux_weight", [](C& c) -> auto& { return c.train.aux_weight; }),

      bool_field("ablation.bc", [](C& c) -> auto& { return c.ablation.bc; }),
      bool_field("ablation.mlp", [](C& c) -> auto& { return c.ablation.mlp; }),
      bool_field("ablation.no_gate", [](C& c) -> auto& { return c.ablation.no_gate; }),
      bool_field("ablation.no_aux", [](C& c) -> auto& { return c.ablation.no_aux; }),
      bool_field("ablation.no_comm", [](C& c) -> auto& { return c.ablation.no_comm; }),
  };
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (seeds.empty()) fail("seeds", "at least one seed is required");
  if (total_steps == 0) fail("total_steps", "must be positive");
  if (eval_interval == 0) fail("eval_interval", "must be positive");
  if (eval_episodes < 1) fail("eval_episodes", "must be >= 1");
  if (trajectory_episodes < 0) fail("trajectory_episodes", "must be >= 0");
  if (output_dir.empty()) fail("output_dir", "must not be empty");
  for (const auto& [key, text] : {std::pair{"name", &name}, std::pair{"output_dir", &output_dir}}) {
    if (text->find_first_of("#\n") != std::string::npos || trim(*text) != *text) {
      fail(key, "must not contain '#', newlines or surrounding blanks");
    }
  }
  try {
    env.validate();
  } catch (const std::invalid_argument& e) {
    fail("env", e.what());
  }
  if (env.n_agents > 0xFFFE) fail("env.n_agents", "too many agents for the round trace format");
  if (protocol.context_bits < quant::kMinBits || protocol.context_bits > quant::kMaxBits) {
    fail("protocol.context_bits", "must lie in [2, 16]");
  }
  if (protocol.message_bits < quant::kMinBits || protocol.message_bits > quant::kMaxBits) {
    fail("protocol.message_bits", "must lie in [2, 16]");
  }
  if (ablation.bc && ablation.no_gate) fail("ablation.no_gate", "cannot be combined with ablation.bc (bc has no gate)");
  if (ablation.bc && ablation.no_comm) fail("ablation.bc", "cannot be combined with ablation.no_comm");
  if (!ablation.no_comm) {
    if (ablation.bc) {
      if (broadcast_dim() < 1) fail("protocol.budget", "too small for one bc broadcast element");
    } else {
      if (protocol.context_dim < 1) fail("protocol.context_dim", "must be >= 1");
      try {
        protocol.validate();
      } catch (const std::invalid_argument& e) {
        fail("protocol.budget", e.what());
      }
    }
  }
  auto widths = [&](const char* key, int v) {
    if (v < 1) fail(key, "must be >= 1");
  };
  widths("net.d_f", net.d_f);
  widths("net.d_k", net.d_k);
  widths("net.d_h", net.d_h);
  widths("net.mixer_embed", net.mixer_embed);
  widths("net.predictor_hidden", net.predictor_hidden);
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    fail("train", e.what());
  }
}

nets::NetConfig ExperimentConfig::net_config() const {
  nets::NetConfig n;
  n.n_agents = env.n_agents;
  n.n_actions = env::kNumActions;
  n.tokens = env.tokens();
  n.token_features = env::kTokenFeatures;
  n.state_dim = env.state_dim();
  n.d_f = net.d_f;
  n.d_k = net.d_k;
  n.d_h = net.d_h;
  n.context_dim = protocol.context_dim;
  n.context_bits = protocol.context_bits;
  n.message_dim = protocol.message_dim;
  n.message_bits = protocol.message_bits;
  n.broadcast_dim = std::max(1, broadcast_dim());
  n.communicate = !ablation.no_comm;
  n.broadcast = ablation.bc;
  n.mlp = ablation.mlp;
  n.mixer_embed = net.mixer_embed;
  n.predictor_hidden = net.predictor_hidden;
  n.gate_init_bias = net.gate_init_bias;
  return n;
}

train::TrainConfig ExperimentConfig::train_config() const {
  train::TrainConfig t = train;
  t.aux_loss = !ablation.no_aux;
  t.gate_learning = !ablation.no_gate;
  return t;
}

int ExperimentConfig::budget_bits() const { return ablation.no_comm ? 0 : protocol.budget; }

int ExperimentConfig::broadcast_dim() const { return protocol.budget / protocol.message_bits; }

std::string ExperimentConfig::hash() const {
  ExperimentConfig identity = *this;
  identity.output_dir.clear();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(identity)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = raw.find('#');
    std::string line = trim(raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Field* f = find_field(key);
    if (!f) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + key + ": duplicate key");
    try {
      f->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace cacom
