#pragma once

// Independent reference checks shared by the unit tests, the acceptance
// binary and `cacom selftest`. Each suite returns one result per checked
// quantity; nothing here reuses the code path it checks.

#include <cstdint>
#include <string>
#include <vector>

namespace cacom::oracle {

struct OracleResult {
  std::string name;
  bool passed = false;
  std::size_t trials = 0;
  double worst = 0.0;  // largest error seen (meaning depends on the suite)
  std::string detail;
};

/// Central finite differences against the tape for every op and the mixer.
/// Pass: relative error < 1e-3 on every trial.
std::vector<OracleResult> gradient_oracles(std::uint64_t seed, int trials = 100);

/// LSQ forward vs an exhaustive nearest-code search, pack/unpack round trips,
/// and zero straight-through gradient wherever the forward clipped.
std::vector<OracleResult> quantizer_oracles(std::uint64_t seed, int trials = 100000);

/// Per-link budget over random-policy episodes, all-open ratio 1 and
/// forced-closed ratio (d_c * b_c) / B.
std::vector<OracleResult> budget_oracles(std::uint64_t seed, int episodes = 100);

/// gate_pseudo_labels vs exhaustive enumeration on 2 agents / 2 actions.
OracleResult pseudo_label_oracle(std::uint64_t seed, int draws = 1000);

/// Q_tot never drops when any single Q_i rises by 1e-3.
OracleResult mixer_monotonicity_oracle(std::uint64_t seed, int trials = 1000);

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

}  // namespace cacom::oracle
