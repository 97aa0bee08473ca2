#include "cacom/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace cacom::env {

std::string scenario_name(Scenario s) { return s == Scenario::PredatorPrey ? "pp" : "cn"; }

Scenario parse_scenario(const std::string& name) {
  if (name == "pp" || name == "predator_prey") return Scenario::PredatorPrey;
  if (name == "cn" || name == "cooperative_navigation") return Scenario::CooperativeNavigation;
  throw std::invalid_argument("unknown environment '" + name + "' (expected pp or cn)");
}

void EnvConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (n_agents < 1) fail("n_agents must be >= 1");
  if (n_targets < 0) fail("n_targets must be >= 0");
  if (observed_agents < 0 || observed_targets < 0) fail("observed counts must be >= 0");
  if (steps_per_episode < 1) fail("steps_per_episode must be >= 1");
  if (!(agent_size > 0.0)) fail("agent_size must be positive");
  if (!(dt > 0.0)) fail("dt must be positive");
  if (damping < 0.0 || damping > 1.0) fail("damping must lie in [0, 1]");
}

EnvConfig EnvConfig::predator_prey() {
  EnvConfig c;
  c.n_agents = 10;
  c.n_targets = 4;
  return c;
}

EnvConfig EnvConfig::cooperative_navigation() {
  EnvConfig c;
  c.scenario = Scenario::CooperativeNavigation;
  c.n_agents = 8;
  c.n_targets = 8;
  c.observed_agents = 4;
  c.observed_targets = 4;
  return c;
}

EnvConfig EnvConfig::predator_prey_desk() { return EnvConfig{}; }

EnvConfig EnvConfig::cooperative_navigation_desk() {
  EnvConfig c = cooperative_navigation();
  c.n_agents = 4;
  c.n_targets = 4;
  return c;
}

namespace {

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

Role target_role(const EnvConfig& cfg) {
  return cfg.scenario == Scenario::PredatorPrey ? Role::Prey : Role::Landmark;
}

int nearest_agent(const EnvConfig& cfg, const WorldState& s, const Vec2& p) {
  int best = 0;
  double best_d = dist(s.entities[0].pos, p);
  for (int a = 1; a < cfg.n_agents; ++a) {
    const double d = dist(s.entities[static_cast<std::size_t>(a)].pos, p);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  return best;
}

// Indices in [first, last) except `skip`, nearest to `from` first; ties by index.
std::vector<int> nearest(const WorldState& s, int first, int last, int skip, const Vec2& from) {
  std::vector<int> idx;
  for (int e = first; e < last; ++e)
    if (e != skip) idx.push_back(e);
  std::vector<double> d(static_cast<std::size_t>(last), 0.0);
  for (int e : idx) d[static_cast<std::size_t>(e)] = dist(s.entities[static_cast<std::size_t>(e)].pos, from);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return d[static_cast<std::size_t>(a)] < d[static_cast<std::size_t>(b)]; });
  return idx;
}

}  // namespace

WorldState reset(const EnvConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  WorldState s;
  s.entities.resize(static_cast<std::size_t>(cfg.entities()));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int e = 0; e < cfg.entities(); ++e) {
    auto& ent = s.entities[static_cast<std::size_t>(e)];
    ent.role = e < cfg.n_agents ? Role::Agent : target_role(cfg);
    if (cfg.random_initial_locations) {
      ent.pos.x = u(rng);
      ent.pos.y = u(rng);
    } else {
      // evenly spaced on the unit circle
      const double angle = 2.0 * std::numbers::pi * e / cfg.entities();
      ent.pos = {std::cos(angle), std::sin(angle)};
    }
  }
  return s;
}

Vec2 action_acceleration(int action, double accel) {
  switch (action) {
    case 0: return {0.0, 0.0};
    case 1: return {accel, 0.0};
    case 2: return {-accel, 0.0};
    case 3: return {0.0, accel};
    case 4: return {0.0, -accel};
    default: throw std::out_of_range("action index " + std::to_string(action) + " outside [0, 4]");
  }
}

Vec2 prey_acceleration(const EnvConfig& cfg, const WorldState& state, int prey_index) {
  const auto& prey = state.entities[static_cast<std::size_t>(prey_index)];
  const auto& hunter = state.entities[static_cast<std::size_t>(nearest_agent(cfg, state, prey.pos))];
  const double dx = prey.pos.x - hunter.pos.x, dy = prey.pos.y - hunter.pos.y;
  const double n = std::hypot(dx, dy);
  if (n == 0.0) return {0.0, 0.0};
  return {cfg.prey_accel * dx / n, cfg.prey_accel * dy / n};
}

double reward(const EnvConfig& cfg, const WorldState& state) {
  double r = 0.0;
  for (int e = cfg.n_agents; e < cfg.entities(); ++e) {
    const auto& p = state.entities[static_cast<std::size_t>(e)].pos;
    r -= dist(p, state.entities[static_cast<std::size_t>(nearest_agent(cfg, state, p))].pos);
  }
  for (int a = 0; a < cfg.n_agents; ++a) {
    for (int b = a + 1; b < cfg.n_agents; ++b) {
      if (dist(state.entities[static_cast<std::size_t>(a)].pos, state.entities[static_cast<std::size_t>(b)].pos) <
          2.0 * cfg.agent_size) {
        r += cfg.collision_penalty;
      }
    }
  }
  return r;
}

StepResult step(const EnvConfig& cfg, WorldState& state, std::span<const int> actions) {
  if (state.t >= cfg.steps_per_episode) throw std::logic_error("step called on a finished episode");
  if (actions.size() != static_cast<std::size_t>(cfg.n_agents)) {
    throw std::invalid_argument("expected " + std::to_string(cfg.n_agents) + " actions, got " +
                                std::to_string(actions.size()));
  }
  std::vector<Vec2> accel(state.entities.size());
  for (int a = 0; a < cfg.n_agents; ++a) accel[static_cast<std::size_t>(a)] = action_acceleration(actions[static_cast<std::size_t>(a)], cfg.agent_accel);
  if (cfg.scenario == Scenario::PredatorPrey) {
    for (int e = cfg.n_agents; e < cfg.entities(); ++e) accel[static_cast<std::size_t>(e)] = prey_acceleration(cfg, state, e);
  }
  for (std::size_t e = 0; e < state.entities.size(); ++e) {
    auto& ent = state.entities[e];
    if (ent.role == Role::Landmark) continue;
    ent.vel.x = ent.vel.x * (1.0 - cfg.damping) + accel[e].x * cfg.dt;
    ent.vel.y = ent.vel.y * (1.0 - cfg.damping) + accel[e].y * cfg.dt;
    ent.pos.x += ent.vel.x * cfg.dt;
    ent.pos.y += ent.vel.y * cfg.dt;
  }
  state.t += 1;
  StepResult out;
  out.reward = reward(cfg, state);
  out.done = state.t == cfg.steps_per_episode;
  out.observations = observe_all(cfg, state);
  return out;
}

Observation observe(const EnvConfig& cfg, const WorldState& state, int agent) {
  if (agent < 0 || agent >= cfg.n_agents) throw std::out_of_range("agent id " + std::to_string(agent));
  Observation o;
  o.rows = cfg.tokens();
  o.tokens.assign(static_cast<std::size_t>(o.rows * kTokenFeatures), 0.0f);
  const auto& self = state.entities[static_cast<std::size_t>(agent)];
  auto write = [&](int row, const Vec2& p, const Vec2& v, int kind_col) {
    float* t = o.tokens.data() + row * kTokenFeatures;
    t[0] = static_cast<float>(p.x);
    t[1] = static_cast<float>(p.y);
    t[2] = static_cast<float>(v.x);
    t[3] = static_cast<float>(v.y);
    t[kind_col] = 1.0f;
    t[kValidColumn] = 1.0f;
  };
  write(0, Vec2{}, self.vel, 4);  // ego row sits at the origin of its own frame
  auto rel = [&](const Entity& e) { return Vec2{e.pos.x - self.pos.x, e.pos.y - self.pos.y}; };

  auto mates = nearest(state, 0, cfg.n_agents, agent, self.pos);
  for (int k = 0; k < cfg.observed_agents && k < static_cast<int>(mates.size()); ++k) {
    const auto& e = state.entities[static_cast<std::size_t>(mates[static_cast<std::size_t>(k)])];
    write(1 + k, rel(e), e.vel, 5);
  }
  auto targets = nearest(state, cfg.n_agents, cfg.entities(), -1, self.pos);
  for (int k = 0; k < cfg.observed_targets && k < static_cast<int>(targets.size()); ++k) {
    const auto& e = state.entities[static_cast<std::size_t>(targets[static_cast<std::size_t>(k)])];
    const Vec2 v = e.role == Role::Landmark ? Vec2{} : e.vel;
    write(1 + cfg.observed_agents + k, rel(e), v, 6);
  }
  return o;
}

std::vector<Observation> observe_all(const EnvConfig& cfg, const WorldState& state) {
  std::vector<Observation> out;
  out.reserve(static_cast<std::size_t>(cfg.n_agents));
  for (int a = 0; a < cfg.n_agents; ++a) out.push_back(observe(cfg, state, a));
  return out;
}

std::vector<float> global_state(const WorldState& state) {
  std::vector<float> s;
  s.reserve(state.entities.size() * 4);
  for (const auto& e : state.entities) {
    s.push_back(static_cast<float>(e.pos.x));
    s.push_back(static_cast<float>(e.pos.y));
    s.push_back(static_cast<float>(e.vel.x));
    s.push_back(static_cast<float>(e.vel.y));
  }
  return s;
}

}  // namespace cacom::env
