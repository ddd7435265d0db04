#pragma once

// The full finite-difference gradient suite: every differentiable primitive
// and loss at fp64, plus the end-to-end stage-1 loss of a small model at fp32.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace locemb::gradsuite {

inline constexpr double kTolerance64 = 1e-4;
inline constexpr double kTolerance32 = 1e-3;
inline constexpr int kInstances = 32;

struct CheckResult {
  std::string name;
  double max_rel_err = 0;
  int instances = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_err < tolerance; }
};

// Checks run in a fixed order; progress (if set) is called after each.
std::vector<CheckResult> run_all(std::uint64_t seed = 0, int instances = kInstances,
                                 const std::function<void(const CheckResult&)>& progress = {});

}  // namespace locemb::gradsuite
