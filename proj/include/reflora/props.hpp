#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace reflora {

struct PropertyOutcome {
  std::string name;
  /// Worst measured residual over all trials.
  double residual = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct PropsOptions {
  std::size_t trials = 20;
  std::uint64_t seed = 42;
  /// Runs with the geometric-mean fault hook enabled.
  bool inject_fault = false;
};

/// Runs the invariant suites of every module on random instances drawn from `seed`.
std::vector<PropertyOutcome> run_properties(const PropsOptions& opts);

/// One row per property: name, residual, tolerance, PASS/FAIL.
void write_props_table(std::ostream& os, const std::vector<PropertyOutcome>& outcomes);

bool all_pass(const std::vector<PropertyOutcome>& outcomes);

}  // namespace reflora
