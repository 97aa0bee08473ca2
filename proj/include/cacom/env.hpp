#pragma once

// Discrete-action particle worlds: predator-prey and cooperative navigation.
// Agents occupy entity slots [0, n_agents), targets (preys or landmarks) the
// remainder. The world is unbounded; velocity damping keeps speeds finite.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cacom::env {

enum class Scenario { PredatorPrey, CooperativeNavigation };
enum class Role : std::uint8_t { Agent, Prey, Landmark };

std::string scenario_name(Scenario s);
Scenario parse_scenario(const std::string& name);

inline constexpr int kNumActions = 5;  // none, +x, -x, +y, -y

// Token columns: position(2) velocity(2) is_ego is_teammate is_target valid
inline constexpr int kTokenFeatures = 8;
inline constexpr int kValidColumn = 7;

struct EnvConfig {
  Scenario scenario = Scenario::PredatorPrey;
  int n_agents = 4;
  int n_targets = 2;
  int observed_agents = 2;   // K_a
  int observed_targets = 2;  // K_e
  double agent_size = 0.05;
  double agent_accel = 5.0;
  double prey_accel = 7.0;
  double collision_penalty = -1.0;
  int steps_per_episode = 40;
  bool random_initial_locations = true;
  double damping = 0.25;
  double dt = 0.1;

  int tokens() const { return 1 + observed_agents + observed_targets; }
  int entities() const { return n_agents + n_targets; }
  int state_dim() const { return 4 * entities(); }
  void validate() const;  // throws std::invalid_argument

  static EnvConfig predator_prey();         // 10 agents, 4 preys
  static EnvConfig cooperative_navigation();  // 8 agents, 8 landmarks
  static EnvConfig predator_prey_desk();    // 4 agents, 2 preys
  static EnvConfig cooperative_navigation_desk();  // 4 agents, 4 landmarks
  bool operator==(const EnvConfig&) const = default;
};

struct Vec2 {
  double x = 0.0, y = 0.0;
  bool operator==(const Vec2&) const = default;
};

struct Entity {
  Vec2 pos;
  Vec2 vel;
  Role role = Role::Agent;
  bool operator==(const Entity&) const = default;
};

struct WorldState {
  std::vector<Entity> entities;
  int t = 0;
  bool operator==(const WorldState&) const = default;
};

/// m x kTokenFeatures entity tokens for one agent, row-major.
struct Observation {
  int rows = 0;
  std::vector<float> tokens;

  float at(int row, int col) const { return tokens[static_cast<std::size_t>(row * kTokenFeatures + col)]; }
  bool valid(int row) const { return at(row, kValidColumn) != 0.0f; }
};

struct StepResult {
  std::vector<Observation> observations;
  double reward = 0.0;
  bool done = false;
};

/// Uniform positions in [-1, 1]^2, zero velocities, t = 0.
WorldState reset(const EnvConfig& cfg, std::uint64_t seed);

/// Advances one tick. Throws std::out_of_range on a bad action index and
/// std::logic_error when the episode is already over.
StepResult step(const EnvConfig& cfg, WorldState& state, std::span<const int> actions);

Observation observe(const EnvConfig& cfg, const WorldState& state, int agent);
std::vector<Observation> observe_all(const EnvConfig& cfg, const WorldState& state);

/// -(sum over targets of the nearest-agent distance) + penalty per colliding agent pair.
double reward(const EnvConfig& cfg, const WorldState& state);

/// Positions and velocities of every entity, flattened.
std::vector<float> global_state(const WorldState& state);

Vec2 action_acceleration(int action, double accel);
/// Unit-free acceleration of a prey fleeing its nearest agent.
Vec2 prey_acceleration(const EnvConfig& cfg, const WorldState& state, int prey_index);

}  // namespace cacom::env
