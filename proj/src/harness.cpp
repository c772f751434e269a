#include "reflora/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

namespace reflora {
namespace {

using Clock = std::chrono::steady_clock;

std::int64_t elapsed_ns(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
}

double relative_gram_gap(const Matrix& a, const Matrix& b) {
  const Matrix ga = a.transpose() * a;
  const Matrix gb = b.transpose() * b;
  const double num = (ga - gb).norm();
  const double den = ga.norm();
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

bool same_problem(const ProblemSpec& x, const ProblemSpec& y) {
  return x.kind == y.kind && x.m == y.m && x.n == y.n && x.r == y.r &&
         (x.kind == ProblemKind::Mf || x.k == y.k) && x.seed == y.seed &&
         x.adapter_scale() == y.adapter_scale();
}

std::string run_label(const RunSpec& s) {
  std::string label(to_string(s.step.method));
  if (s.step.optimizer != OptimizerKind::Gd) {
    label += '-';
    label += to_string(s.step.optimizer);
  }
  return label;
}

}  // namespace

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void RunSpec::validate() const {
  step.validate();
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (log_every < 1) throw ConfigError("log_every must be at least 1");
  if (!(init.sigma_a >= 0.0) || !(init.sigma_b >= 0.0) || !std::isfinite(init.sigma_a) ||
      !std::isfinite(init.sigma_b)) {
    throw ConfigError("init standard deviations must be finite and nonnegative");
  }
  const auto& p = problem;
  if (p.m < 1 || p.n < 1 || p.r < 1 || p.r > std::min(p.m, p.n)) {
    throw ConfigError("problem dimensions need 1 <= r <= min(m, n)");
  }
  if (p.kind == ProblemKind::LinReg && p.k < 1) throw ConfigError("k must be positive");
  if (p.alpha && !(*p.alpha > 0.0)) throw ConfigError("alpha must be positive");
}

BuiltProblem build_problem(const ProblemSpec& spec, const InitSpec& init) {
  const double scale = spec.adapter_scale();
  if (spec.kind == ProblemKind::LinReg) {
    LinRegSetup s = make_linreg(spec.m, spec.n, spec.k, spec.seed, init.sigma_a, init.sigma_b,
                                spec.r, scale);
    return {std::move(s.problem), std::move(s.initial)};
  }
  MfSetup s = make_mf(spec.m, spec.n, spec.r, spec.seed, scale);
  CounterRng rng = CounterRng(spec.seed).split(CounterRng::kInitStream);
  Matrix a0 = gaussian_matrix(rng, spec.m, spec.r, init.sigma_a);
  Matrix b0 = init.sigma_b > 0.0 ? gaussian_matrix(rng, spec.n, spec.r, init.sigma_b)
                                 : Matrix::Zero(spec.n, spec.r);
  return {std::move(s.problem), LowRankFactors(std::move(a0), std::move(b0))};
}

double balance_gap(const LowRankFactors& f, const StepConfig& cfg) {
  using Kind = RefactorMode::Kind;
  const Kind kind = cfg.refactor_mode.kind;
  try {
    if (cfg.method == Method::RefLoRa && kind != Kind::Identity && is_full_rank(f)) {
      const SpdMatrix s = kind == Kind::BalancedAlways
                              ? geometric_mean_s(f)
                              : optimal_s(f, cfg.eta, cfg.refactor_mode).matrix();
      const Matrix root = spd_sqrt(s).matrix();
      const Matrix inv_root = spd_inv_sqrt(s).matrix();
      return relative_gram_gap(f.a() * root, f.b() * inv_root);
    }
    if (cfg.method == Method::RefLoRaS && f.a().squaredNorm() > 0.0 && f.b().squaredNorm() > 0.0) {
      const double s = optimal_scalar(f, cfg.eta, cfg.refactor_mode).scalar();
      const double root = std::sqrt(s);
      return relative_gram_gap(root * f.a(), f.b() / root);
    }
  } catch (const Error&) {
    // Ill-conditioned or non-finite factors: fall through to the raw gap.
  }
  return relative_gram_gap(f.a(), f.b());
}

Trace run(const RunSpec& spec) {
  spec.validate();
  BuiltProblem built = build_problem(spec.problem, spec.init);
  return run(*built.problem, std::move(built.initial), spec);
}

Trace run(const Problem& problem, LowRankFactors initial, const RunSpec& spec) {
  spec.validate();
  Trace trace;
  LowRankFactors f = std::move(initial);
  std::optional<OptimizerState> state;
  if (spec.step.optimizer != OptimizerKind::Gd) {
    state = OptimizerState::zeros(f.m(), f.n(), f.rank(), spec.adam);
  }

  trace.initial_loss = problem.loss_at(f);
  const double threshold = kDivergenceFactor * trace.initial_loss;
  bool stepping = true;

  auto log = [&](std::size_t step, double loss, const GradientPair& g, std::int64_t ns) {
    const bool bad = !std::isfinite(loss) || (step > 0 && loss > threshold);
    if (bad && !trace.diverged_at) trace.diverged_at = step;
    if (step % spec.log_every != 0 && step != spec.iterations) return;
    TraceRecord rec;
    rec.step = step;
    rec.loss = loss;
    rec.norm_a = f.a().norm();
    rec.norm_b = f.b().norm();
    rec.grad_norm_a = g.g_a.norm();
    rec.grad_norm_b = g.g_b.norm();
    rec.balance_gap = f.all_finite() ? balance_gap(f, spec.step)
                                     : std::numeric_limits<double>::quiet_NaN();
    rec.step_time_ns = spec.record_timing ? ns : 0;
    rec.diverged = trace.diverged_at.has_value();
    trace.records.push_back(rec);
  };

  GradientPair g = problem.grad_pair(f);
  log(0, trace.initial_loss, g, 0);

  for (std::size_t t = 0; t < spec.iterations; ++t) {
    std::int64_t ns = 0;
    if (stepping) {
      const auto start = Clock::now();
      try {
        StepResult res = take_step(f, g, spec.step, std::move(state), t);
        f = std::move(res.factors);
        state = std::move(res.state);
      } catch (const Error&) {
        // A blown-up iterate can make the refactoring ill-posed; that is part of the divergence.
        if (!trace.diverged_at) throw;
        stepping = false;
      }
      ns = elapsed_ns(start);
      if (!f.all_finite()) stepping = false;
    }
    const double loss = problem.loss_at(f);
    if (!std::isfinite(loss)) stepping = false;
    g = problem.grad_pair(f);
    log(t + 1, loss, g, ns);
  }

  if (!spec.trace_path.empty()) {
    std::ofstream out(spec.trace_path);
    if (!out) throw ConfigError("cannot open trace path '" + spec.trace_path + "'");
    write_trace_csv(out, trace);
  }
  return trace;
}

void write_trace_csv(std::ostream& os, const Trace& trace) {
  os << "step,loss,norm_a,norm_b,grad_norm_a,grad_norm_b,balance_gap,step_time_ns\n";
  for (const TraceRecord& r : trace.records) {
    os << r.step << ',' << format_real(r.loss) << ',' << format_real(r.norm_a) << ','
       << format_real(r.norm_b) << ',' << format_real(r.grad_norm_a) << ','
       << format_real(r.grad_norm_b) << ',' << format_real(r.balance_gap) << ','
       << r.step_time_ns << '\n';
  }
}

std::string_view to_string(BoundMode m) {
  return m == BoundMode::Identity ? "identity" : "theorem-exact";
}

QuadraticBoundTerms quadratic_bound_terms(const Matrix& grad, double loss_now,
                                          const LowRankFactors& f, const SpdMatrix& s, double eta,
                                          double lipschitz) {
  if (grad.rows() != f.m() || grad.cols() != f.n()) {
    throw DimensionMismatch("quadratic_bound_terms: gradient shape does not match factors");
  }
  const Matrix& a = f.a();
  const Matrix& b = f.b();
  const Matrix s_inv = spd_inverse(s).matrix();
  const double L = lipschitz;

  // ΔW~ = (A - eta G B S^{-1})(B - eta G^T A S)^T - A B^T
  //     = -eta A S A^T G - eta G B S^{-1} B^T + eta^2 G B A^T G.
  const Matrix u = -eta * (a * (s.matrix() * (a.transpose() * grad)));
  const Matrix v = -eta * ((grad * b) * (s_inv * b.transpose()));
  const Matrix d = (eta * eta) * ((grad * b) * (a.transpose() * grad));

  const double spec2 = std::pow(spectral_norm(grad), 2);
  const double m_plus_n = static_cast<double>(f.m() + f.n());

  QuadraticBoundTerms t;
  // loss(W + Δ) = loss(W) + <G, Δ> + (L/2)||Δ||^2 for the quadratic losses here (L exact).
  // With Δ = U + V + D, the U + V part is bounded by completing the squares
  //   <G, U + V> + (L/2)||U + V||^2
  //     <= (L eta^2/2)||G||_2^2 [(m+n) c^2 - 2 c g(S) + g(S)^2] - ||G||_F^2 / L,  c = 1/(L eta),
  // and (m+n) c^2 - 2 c g + g^2 = (g - c)^2 + (m+n-1) c^2.
  t.const_terms = loss_now + frobenius_dot(grad, d) + 0.5 * L * d.squaredNorm() -
                  grad.squaredNorm() / L + (m_plus_n - 1.0) * spec2 / (2.0 * L);
  t.remainder = L * frobenius_dot(u + v, d);
  t.predicted_delta = u + v + d;
  return t;
}

std::vector<double> eta_grid(double eta_min, double eta_max, std::size_t points) {
  if (points < 2) throw ConfigError("eta grid needs at least 2 points");
  if (!(eta_max > eta_min) || !std::isfinite(eta_min) || !std::isfinite(eta_max)) {
    throw ConfigError("eta grid needs finite eta_min < eta_max");
  }
  const double span = eta_max - eta_min;
  const double zero_tol = 1e-12 * span;
  std::vector<double> grid;
  grid.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const double eta =
        eta_min + span * static_cast<double>(i) / static_cast<double>(points - 1);
    if (std::abs(eta) <= zero_tol) continue;
    grid.push_back(eta);
  }
  return grid;
}

BoundScanResult bound_scan(const BoundScanSpec& spec) {
  LinRegSetup setup =
      make_linreg(spec.m, spec.n, spec.k, spec.seed, spec.sigma_a, spec.sigma_b, spec.r, 1.0);
  const LinearRegressionProblem& problem = *setup.problem;
  const LowRankFactors& f = setup.initial;
  require_full_rank(f, "bound_scan");

  BoundScanResult result;
  result.lipschitz = *problem.lipschitz();
  result.c_tilde = c_tilde(f);
  const Matrix w = problem.weight(f);
  const Matrix grad = problem.gradient(w);
  result.loss_before = problem.loss(w);
  const double spec_norm = spectral_norm(grad);
  const GradientPair g = problem.grad_pair(f);

  for (double eta : eta_grid(spec.eta_min, spec.eta_max, spec.points)) {
    for (BoundMode mode : spec.modes) {
      const RefactorMode rm = mode == BoundMode::Identity
                                  ? RefactorMode::identity()
                                  : RefactorMode::theorem_exact(result.lipschitz, spec.root);
      const RefactorResult choice = optimal_s(f, eta, rm);
      const SpdMatrix& s = choice.matrix();
      const LowRankFactors next = preconditioned_step(f, g, eta, s);
      const QuadraticBoundTerms terms =
          quadratic_bound_terms(grad, result.loss_before, f, s, eta, result.lipschitz);

      BoundScanRow row;
      row.eta = eta;
      row.mode = mode;
      row.true_loss = problem.loss_at(next);
      row.upper_bound =
          upper_bound_eval(f, s, eta, result.lipschitz, spec_norm, terms.const_terms);
      row.remainder = terms.remainder;
      row.branch = choice.branch;
      result.rows.push_back(row);
    }
  }
  return result;
}

void write_bound_scan_csv(std::ostream& os, const BoundScanResult& result) {
  os << "eta,mode,true_loss,upper_bound\n";
  for (const BoundScanRow& r : result.rows) {
    os << format_real(r.eta) << ',' << to_string(r.mode) << ',' << format_real(r.true_loss) << ','
       << format_real(r.upper_bound) << '\n';
  }
}

unsigned compare_thread_cap() {
  if (const char* env = std::getenv("REFLORA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Comparison compare(const std::vector<RunSpec>& specs) {
  if (specs.empty()) throw ConfigError("compare needs at least one run");
  for (const RunSpec& s : specs) {
    s.validate();
    if (!same_problem(s.problem, specs.front().problem)) {
      throw ConfigError("compare: runs must share the problem instance (kind, dims, seed)");
    }
  }

  Comparison cmp;
  cmp.traces.resize(specs.size());
  for (const RunSpec& s : specs) {
    std::string label = run_label(s);
    std::size_t dup = 1;
    auto taken = [&](const std::string& l) {
      return std::find(cmp.labels.begin(), cmp.labels.end(), l) != cmp.labels.end();
    };
    std::string candidate = label;
    while (taken(candidate)) candidate = label + "#" + std::to_string(++dup);
    cmp.labels.push_back(candidate);
  }

  const std::size_t workers = std::min<std::size_t>(compare_thread_cap(), specs.size());
  std::vector<std::exception_ptr> errors(specs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        cmp.traces[i] = run(specs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return cmp;
}

void write_comparison_csv(std::ostream& os, const Comparison& cmp) {
  static constexpr const char* kCols[] = {"loss",        "norm_a",      "norm_b",
                                          "grad_norm_a", "grad_norm_b", "balance_gap"};
  os << "step";
  for (const std::string& label : cmp.labels) {
    for (const char* c : kCols) os << ',' << label << ':' << c;
  }
  os << '\n';

  std::vector<std::size_t> steps;
  for (const Trace& t : cmp.traces) {
    for (const TraceRecord& r : t.records) steps.push_back(r.step);
  }
  std::sort(steps.begin(), steps.end());
  steps.erase(std::unique(steps.begin(), steps.end()), steps.end());

  std::vector<std::size_t> cursor(cmp.traces.size(), 0);
  for (std::size_t step : steps) {
    os << step;
    for (std::size_t k = 0; k < cmp.traces.size(); ++k) {
      const auto& recs = cmp.traces[k].records;
      while (cursor[k] < recs.size() && recs[cursor[k]].step < step) ++cursor[k];
      if (cursor[k] < recs.size() && recs[cursor[k]].step == step) {
        const TraceRecord& r = recs[cursor[k]];
        for (double v : {r.loss, r.norm_a, r.norm_b, r.grad_norm_a, r.grad_norm_b, r.balance_gap}) {
          os << ',' << format_real(v);
        }
      } else {
        for (std::size_t c = 0; c < std::size(kCols); ++c) os << ',';
      }
    }
    os << '\n';
  }
}

std::vector<OverheadRow> overhead_probe(const std::vector<std::pair<Index, Index>>& dims,
                                        const std::vector<Index>& ranks, std::size_t repeats,
                                        std::uint64_t seed) {
  if (repeats < 10) throw ConfigError("overhead_probe needs repeats >= 10");
  static constexpr Method kMethods[] = {Method::LoRaGd, Method::RefLoRa, Method::RefLoRaS,
                                        Method::ScaledGd};
  constexpr double kEta = 1e-3;
  std::vector<OverheadRow> rows;
  const CounterRng root = CounterRng(seed).split(CounterRng::kProbeStream);
  std::uint64_t probe_id = 0;

  for (const auto& [m, n] : dims) {
    for (Index r : ranks) {
      if (r < 1 || r > std::min(m, n)) throw ConfigError("overhead_probe: need 1 <= r <= min(m, n)");
      CounterRng rng = root.split(++probe_id);
      const LowRankFactors f(gaussian_matrix(rng, m, r), gaussian_matrix(rng, n, r));
      const GradientPair g{gaussian_matrix(rng, m, r), gaussian_matrix(rng, n, r)};

      double lora_median = 0.0;
      for (Method method : kMethods) {
        StepConfig cfg;
        cfg.eta = kEta;
        cfg.method = method;
        cfg.refactor_mode =
            method == Method::RefLoRaS ? RefactorMode::scalar() : RefactorMode::balanced();
        cfg.warmup_steps = 0;

        auto refactor_only = [&]() -> double {
          switch (method) {
            case Method::RefLoRa: {
              const SpdMatrix s = geometric_mean_s(f);
              return spd_inverse(s).matrix()(0, 0);
            }
            case Method::RefLoRaS:
              return optimal_scalar(f, kEta, cfg.refactor_mode).scalar();
            case Method::ScaledGd:
              return spd_inverse(gram(f.a())).matrix()(0, 0) +
                     spd_inverse(gram(f.b())).matrix()(0, 0);
            case Method::LoRaGd:
              break;
          }
          return 0.0;
        };

        volatile double sink = 0.0;
        // Untimed warm-up pass.
        sink = sink + take_step(f, g, cfg, std::nullopt, 0).factors.a()(0, 0) + refactor_only();

        std::vector<double> step_ns, refactor_ns;
        step_ns.reserve(repeats);
        refactor_ns.reserve(repeats);
        for (std::size_t i = 0; i < repeats; ++i) {
          auto start = Clock::now();
          StepResult res = take_step(f, g, cfg, std::nullopt, 0);
          step_ns.push_back(static_cast<double>(elapsed_ns(start)));
          sink = sink + res.factors.a()(0, 0);
          if (method != Method::LoRaGd) {
            start = Clock::now();
            sink = sink + refactor_only();
            refactor_ns.push_back(static_cast<double>(elapsed_ns(start)));
          }
        }

        OverheadRow row;
        row.m = m;
        row.n = n;
        row.r = r;
        row.method = method;
        row.median_step_ns = median(step_ns);
        row.median_refactor_ns = median(refactor_ns);
        if (method == Method::LoRaGd) lora_median = row.median_step_ns;
        row.ratio_vs_lora = lora_median > 0.0 ? row.median_step_ns / lora_median : 1.0;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

void write_overhead_csv(std::ostream& os, const std::vector<OverheadRow>& rows) {
  os << "m,n,r,method,median_step_ns,median_refactor_ns,ratio_vs_lora\n";
  for (const OverheadRow& r : rows) {
    os << r.m << ',' << r.n << ',' << r.r << ',' << to_string(r.method) << ','
       << format_real(r.median_step_ns) << ',' << format_real(r.median_refactor_ns) << ','
       << format_real(r.ratio_vs_lora) << '\n';
  }
}

}  // namespace reflora
