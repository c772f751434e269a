#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "reflora/problems.hpp"

namespace reflora {

enum class ProblemKind { Mf, LinReg };

struct ProblemSpec {
  ProblemKind kind = ProblemKind::Mf;
  Index m = 128;
  Index n = 100;
  Index r = 8;
  /// Sample count of the linear-regression data; unused for MF.
  Index k = 2;
  std::uint64_t seed = 42;
  /// Adapter scaling alpha; W = W_pt + (alpha / r) A B^T. Unset means alpha = r.
  std::optional<double> alpha;

  double adapter_scale() const { return alpha ? *alpha / static_cast<double>(r) : 1.0; }
};

struct InitSpec {
  double sigma_a = 1.0;
  /// Zero gives B_0 = 0, the usual LoRA initialization.
  double sigma_b = 0.0;
};

struct RunSpec {
  ProblemSpec problem;
  StepConfig step;
  AdamHyper adam;
  std::size_t iterations = 2000;
  std::size_t log_every = 1;
  InitSpec init;
  /// When non-empty, run() also writes the CSV trace here.
  std::string trace_path;
  bool record_timing = true;

  void validate() const;
};

struct TraceRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double norm_a = 0.0;
  double norm_b = 0.0;
  double grad_norm_a = 0.0;
  double grad_norm_b = 0.0;
  double balance_gap = 0.0;
  std::int64_t step_time_ns = 0;
  bool diverged = false;
};

struct Trace {
  std::vector<TraceRecord> records;
  double initial_loss = 0.0;
  /// First step at which the loss exceeded 1e6 x initial or became non-finite.
  std::optional<std::size_t> diverged_at;

  bool diverged() const { return diverged_at.has_value(); }
};

inline constexpr double kDivergenceFactor = 1e6;

struct BuiltProblem {
  std::shared_ptr<const Problem> problem;
  LowRankFactors initial;
};

/// Problem instance and initial factors for a spec; both draw only from `seed`.
BuiltProblem build_problem(const ProblemSpec& problem, const InitSpec& init);

/// Relative Gram imbalance of the pair each method actually steps on:
/// ||A~^T A~ - B~^T B~||_F / ||A~^T A~||_F with (A~, B~) the refactored pair for RefLoRa and
/// RefLoRaS, and the raw factors for the baselines or when refactoring is not yet possible.
double balance_gap(const LowRankFactors& f, const StepConfig& cfg);

Trace run(const RunSpec& spec);
/// Runs on an explicit problem and initial pair; spec.problem and spec.init are ignored.
Trace run(const Problem& problem, LowRankFactors initial, const RunSpec& spec);

void write_trace_csv(std::ostream& os, const Trace& trace);

// ---------------------------------------------------------------------------
// Loss-bound scan

enum class BoundMode { Identity, TheoremExact };
std::string_view to_string(BoundMode m);

struct BoundScanSpec {
  Index m = 2;
  Index n = 2;
  Index k = 2;
  Index r = 1;
  std::uint64_t seed = 42;
  /// N(0, 10) and N(0, 1/10) initial factors, read as variances.
  double sigma_a = 3.1622776601683795;
  double sigma_b = 0.31622776601683794;
  double eta_min = -0.5;
  double eta_max = 0.5;
  std::size_t points = 201;
  std::vector<BoundMode> modes{BoundMode::Identity, BoundMode::TheoremExact};
  RootChoice root = RootChoice::Plus;
};

/// Exact pieces of the bound for a quadratic loss and one refactored GD step with S.
///
/// With G = grad(W), U = -eta A S A^T G, V = -eta G B S^{-1} B^T and D = eta^2 G B A^T G,
/// the step changes W by U + V + D and
///   loss(W + U + V + D) <= (L eta^2 / 2) ||G||_2^2 (g(S) - 1/(L eta))^2 + const_terms + remainder
/// where
///   const_terms = loss(W) + <G, D> + (L/2) ||D||^2 - ||G||_F^2 / L + (m + n - 1) ||G||_2^2 / (2L)
///   remainder   = L <U + V, D>          (the O(L eta^3) term).
/// const_terms collects the S-independent pieces dropped while completing the squares.
struct QuadraticBoundTerms {
  double const_terms = 0.0;
  double remainder = 0.0;
  Matrix predicted_delta;
};

QuadraticBoundTerms quadratic_bound_terms(const Matrix& grad, double loss_now,
                                          const LowRankFactors& f, const SpdMatrix& s, double eta,
                                          double lipschitz);

struct BoundScanRow {
  double eta = 0.0;
  BoundMode mode = BoundMode::Identity;
  double true_loss = 0.0;
  /// Truncated bound plus const_terms, i.e. the plotted curve.
  double upper_bound = 0.0;
  double remainder = 0.0;
  Branch branch = Branch::Balanced;
};

struct BoundScanResult {
  std::vector<BoundScanRow> rows;
  double loss_before = 0.0;
  double lipschitz = 0.0;
  double c_tilde = 0.0;
};

/// Evenly spaced grid over [eta_min, eta_max] with eta = 0 removed.
std::vector<double> eta_grid(double eta_min, double eta_max, std::size_t points);

BoundScanResult bound_scan(const BoundScanSpec& spec);

void write_bound_scan_csv(std::ostream& os, const BoundScanResult& result);

// ---------------------------------------------------------------------------
// Side-by-side runs

struct Comparison {
  std::vector<std::string> labels;
  std::vector<Trace> traces;
};

/// Runs every spec (concurrently, up to REFLORA_THREADS workers) on the same problem instance.
/// Throws ConfigError when the specs disagree on the problem.
Comparison compare(const std::vector<RunSpec>& specs);

/// Worker cap: REFLORA_THREADS when set to a positive integer, else hardware concurrency.
unsigned compare_thread_cap();

/// Wide table joined on step: `step` then, per run, <label>:loss, <label>:norm_a, ...
void write_comparison_csv(std::ostream& os, const Comparison& cmp);

// ---------------------------------------------------------------------------
// Per-step overhead

struct OverheadRow {
  Index m = 0;
  Index n = 0;
  Index r = 0;
  Method method = Method::LoRaGd;
  /// Median wall time of one stepper call given precomputed factor gradients.
  double median_step_ns = 0.0;
  /// Median wall time of the refactoring work alone (0 for LoRA).
  double median_refactor_ns = 0.0;
  double ratio_vs_lora = 1.0;
};

std::vector<OverheadRow> overhead_probe(const std::vector<std::pair<Index, Index>>& dims,
                                        const std::vector<Index>& ranks, std::size_t repeats,
                                        std::uint64_t seed = 42);

void write_overhead_csv(std::ostream& os, const std::vector<OverheadRow>& rows);

/// %.17g.
std::string format_real(double v);

}  // namespace reflora
