// Acceptance checks: one PASS/FAIL line per criterion, tolerances and time limits pinned here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "reflora/harness.hpp"

using namespace reflora;
using oracle::Mat;

namespace {

constexpr std::uint64_t kSampleSeed = 20240601;
// Bound-scan instance; see the decisions record for why a fixed seed is pinned.
constexpr std::uint64_t kBoundScanSeed = 42;

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Criterion {
  int id;
  const char* title;
  double time_limit_s;
  std::function<Outcome()> body;
};

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

struct Sample {
  Mat a, b;
};

/// Full-rank pairs with m, n <= 64 and r <= 16.
std::vector<Sample> samples(std::size_t count, std::uint64_t seed) {
  oracle::Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  while (out.size() < count) {
    const long r = rng.integer(1, 16);
    const long m = rng.integer(r, 64);
    const long n = rng.integer(r, 64);
    Sample s{rng.gaussian(m, r), rng.gaussian(n, r)};
    if (!has_full_column_rank(s.a) || !has_full_column_rank(s.b)) continue;
    out.push_back(std::move(s));
  }
  return out;
}

Mat spd_from(const Mat& m) { return 0.5 * (m + m.transpose()); }

Mat gram_of(const Mat& m) { return spd_from(m.transpose() * m); }

/// Random invertible r x r matrix with condition number up to `max_cond`.
Mat conditioned_matrix(oracle::Rng& rng, long r, double max_cond) {
  Eigen::HouseholderQR<Mat> qu(rng.gaussian(r, r)), qv(rng.gaussian(r, r));
  const Mat u = qu.householderQ() * Mat::Identity(r, r);
  const Mat v = qv.householderQ() * Mat::Identity(r, r);
  Eigen::VectorXd sv(r);
  for (long i = 0; i < r; ++i) sv(i) = std::pow(max_cond, rng.uniform(0.0, 1.0));
  if (r > 1) {
    sv(0) = 1.0;
    sv(r - 1) = max_cond;
  }
  return u * sv.asDiagonal() * v.transpose();
}

GradientPair pair_from_dense(const Mat& g, const Mat& a, const Mat& b) {
  return {g * b, g.transpose() * a};
}

// ---------------------------------------------------------------------------

Outcome c1_balance() {
  double worst = 0.0;
  for (const Sample& s : samples(1000, kSampleSeed)) {
    const Mat st = geometric_mean_s(LowRankFactors(s.a, s.b)).matrix();
    const auto [root, inv_root] = oracle::db_sqrt(st);
    const Mat at = s.a * root, bt = s.b * inv_root;
    const Mat ga = at.transpose() * at;
    worst = std::max(worst, (ga - bt.transpose() * bt).norm() / ga.norm());
  }
  return {worst <= 1e-8, fmt("worst relative Gram gap %.3e (tol 1e-8)", worst)};
}

Outcome c2_closed_forms() {
  double worst = 0.0;
  for (const Sample& s : samples(1000, kSampleSeed)) {
    const Mat x = gram_of(s.a), y = gram_of(s.b);
    const Mat closed = x.partialPivLu().inverse() * oracle::sqrtm_general(x * y);
    const Mat st = geometric_mean_s(LowRankFactors(s.a, s.b)).matrix();
    worst = std::max(worst, oracle::rel(st, closed));
  }
  return {worst <= 1e-9, fmt("worst relative difference %.3e (tol 1e-9)", worst)};
}

Outcome c3_stationarity() {
  oracle::Rng rng(kSampleSeed + 3);
  double worst_stat = 0.0, worst_g = 0.0;
  long violations = 0;
  for (const Sample& s : samples(1000, kSampleSeed)) {
    const LowRankFactors f(s.a, s.b);
    const Mat st = geometric_mean_s(f).matrix();
    const Mat x = gram_of(s.a), y = gram_of(s.b);
    worst_stat = std::max(worst_stat, oracle::rel(st * x * st, y));
    const double g0 = oracle::g_value(s.a, s.b, st);
    const double nuc = 2.0 * oracle::nuclear_of_product(s.a, s.b);
    worst_g = std::max(worst_g, std::abs(g0 - nuc) / nuc);
    const long r = s.a.cols();
    for (int k = 0; k < 100; ++k) {
      const Mat e = Mat::Identity(r, r) + rng.gaussian(r, r, 0.1);
      const double g1 = oracle::g_value(s.a, s.b, spd_from(e * st * e.transpose()));
      if (!(g1 > g0)) ++violations;
    }
  }
  const bool pass = worst_stat <= 1e-8 && worst_g <= 1e-8 && violations == 0;
  return {pass, fmt("stationarity %.3e, |g - 2||AB^T||_*| %.3e (tol 1e-8), ", worst_stat, worst_g) +
                    std::to_string(violations) + " perturbations not above g(S~)"};
}

Outcome c4_small_eta_branch() {
  oracle::Rng rng(kSampleSeed + 4);
  double worst_root = 0.0, worst_boundary = 0.0;
  const auto set = samples(200, kSampleSeed + 40);
  for (const Sample& s : set) {
    const LowRankFactors f(s.a, s.b);
    const double L = rng.uniform(0.1, 10.0);
    const double c = 2.0 * oracle::nuclear_of_product(s.a, s.b);
    const double eta = rng.uniform(0.01, 0.99) / (c * L);
    for (RootChoice root : {RootChoice::Plus, RootChoice::Minus}) {
      const Mat sm = optimal_s(f, eta, RefactorMode::theorem_exact(L, root)).matrix().matrix();
      const double target = 1.0 / (L * eta);
      worst_root = std::max(worst_root, std::abs(oracle::g_value(s.a, s.b, sm) - target) / target);
    }
    const double boundary = 1.0 / (c_tilde(f) * L);
    const RefactorResult at = optimal_s(f, boundary, RefactorMode::theorem_exact(L));
    const Mat st = geometric_mean_s(f).matrix();
    // gamma recovered as <S, S~> / <S~, S~>.
    const double gamma = (at.matrix().matrix().cwiseProduct(st)).sum() / st.squaredNorm();
    worst_boundary = std::max(worst_boundary, std::abs(gamma - 1.0));
    if (at.branch != Branch::Balanced) worst_boundary = std::numeric_limits<double>::infinity();
  }
  return {worst_root <= 1e-8 && worst_boundary <= 1e-10,
          fmt("root residual %.3e (tol 1e-8), boundary |gamma - 1| %.3e (tol 1e-10)", worst_root,
              worst_boundary)};
}

Outcome c5_scalar() {
  oracle::Rng rng(kSampleSeed + 5);
  double worst_h = 0.0, worst_ratio = 0.0;
  for (const Sample& s : samples(200, kSampleSeed + 50)) {
    const LowRankFactors f(s.a, s.b);
    const double a2 = s.a.squaredNorm(), b2 = s.b.squaredNorm();
    const double L = rng.uniform(0.1, 10.0);
    const double boundary = 1.0 / (2.0 * std::sqrt(a2) * std::sqrt(b2) * L);
    const double small = rng.uniform(0.05, 0.95) * boundary;
    for (RootChoice root : {RootChoice::Plus, RootChoice::Minus}) {
      const double st = optimal_scalar(f, small, RefactorMode::scalar_theorem_exact(L, root)).scalar();
      worst_h = std::max(worst_h, std::pow(a2 * st + b2 / st - 1.0 / (L * small), 2));
    }
    const double large = rng.uniform(1.0, 10.0) * boundary;
    const double expected = s.b.norm() / s.a.norm();
    const double got = optimal_scalar(f, large, RefactorMode::scalar_theorem_exact(L)).scalar();
    worst_ratio = std::max(worst_ratio, std::abs(got - expected) / expected);
  }
  return {worst_h <= 1e-14 && worst_ratio <= 4.0 * std::numeric_limits<double>::epsilon(),
          fmt("small-eta h(s*) %.3e (tol 1e-14), large-eta relative deviation %.3e (tol 4 ulp)",
              worst_h, worst_ratio)};
}

Outcome c6_reparametrization() {
  oracle::Rng rng(kSampleSeed + 6);
  double worst = 0.0;
  for (const Sample& s : samples(200, kSampleSeed + 60)) {
    const long r = s.a.cols();
    const Mat y = rng.gaussian(s.a.rows(), s.b.rows());
    const Mat p = conditioned_matrix(rng, r, 1e4);
    const Mat pa = s.a * p;
    const Mat pb = s.b * p.inverse().transpose();
    StepConfig cfg;
    cfg.eta = 0.01;
    auto step_delta = [&](const Mat& a, const Mat& b) {
      const LowRankFactors f(a, b);
      const Mat g = a * b.transpose() - y;
      const LowRankFactors next = reflora_step(f, pair_from_dense(g, a, b), cfg, std::nullopt, 1).factors;
      return Mat(next.a() * next.b().transpose() - a * b.transpose());
    };
    worst = std::max(worst, oracle::rel(step_delta(pa, pb), step_delta(s.a, s.b)));
  }
  return {worst <= 1e-7, fmt("worst relative difference of the update %.3e (tol 1e-7)", worst)};
}

Outcome c7_orthogonal() {
  oracle::Rng rng(kSampleSeed + 7);
  double worst = 0.0;
  for (const Sample& s : samples(200, kSampleSeed + 70)) {
    const long r = s.a.cols();
    Eigen::HouseholderQR<Mat> qr(rng.gaussian(r, r));
    const Mat q = qr.householderQ() * Mat::Identity(r, r);
    const Mat g = rng.gaussian(s.a.rows(), s.b.rows());
    auto delta = [&](const Mat& a, const Mat& b) {
      const LowRankFactors next = lora_gd_step(LowRankFactors(a, b), pair_from_dense(g, a, b), 0.05);
      return Mat(next.a() * next.b().transpose() - a * b.transpose());
    };
    worst = std::max(worst, oracle::rel(delta(s.a * q, s.b * q), delta(s.a, s.b)));
  }
  return {worst <= 1e-9, fmt("worst relative difference %.3e (tol 1e-9)", worst)};
}

Outcome c8_dual_path() {
  oracle::Rng rng(kSampleSeed + 8);
  double worst_gd = 0.0;
  for (const Sample& s : samples(200, kSampleSeed + 80)) {
    const LowRankFactors f(s.a, s.b);
    const Mat g = rng.gaussian(s.a.rows(), s.b.rows());
    const double eta = rng.uniform(1e-3, 0.1);
    const Mat st = oracle::geometric_mean(gram_of(s.a), gram_of(s.b));
    const auto [root, inv_root] = oracle::db_sqrt(st);
    const Mat at = s.a * root, bt = s.b * inv_root;
    const Mat at1 = at - eta * g * bt;
    const Mat bt1 = bt - eta * g.transpose() * at;
    const LowRankFactors got = preconditioned_step(f, pair_from_dense(g, s.a, s.b), eta, SpdMatrix(st));
    worst_gd = std::max({worst_gd, oracle::rel(got.a(), at1 * inv_root), oracle::rel(got.b(), bt1 * root)});
  }

  double worst_adam = 0.0;
  for (const Sample& s : samples(50, kSampleSeed + 81)) {
    const Mat y = rng.gaussian(s.a.rows(), s.b.rows());
    StepConfig cfg;
    cfg.method = Method::RefLoRaS;
    cfg.optimizer = OptimizerKind::Adam;
    cfg.refactor_mode = RefactorMode::scalar();
    cfg.eta = 0.01;
    LowRankFactors f(s.a, s.b);
    std::optional<OptimizerState> state = OptimizerState::zeros(f.m(), f.n(), f.rank());
    Mat a = s.a, b = s.b;
    oracle::Adam oa, ob;
    for (int t = 0; t < 10; ++t) {
      const Mat gl = f.a() * f.b().transpose() - y;
      StepResult res = reflora_s_step(f, pair_from_dense(gl, f.a(), f.b()), cfg, state, t);
      f = res.factors;
      state = res.state;
      // Explicit path: rescale the parameters and re-express the moments in the new coordinates.
      const double sc = b.norm() / a.norm();
      const double rt = std::sqrt(sc);
      const Mat at = rt * a, bt = b / rt;
      if (oa.m.size() != 0) {
        oa.m /= rt;
        oa.v /= sc;
        ob.m *= rt;
        ob.v *= sc;
      }
      const Mat gd = a * b.transpose() - y;
      a = oa.step(at, gd * bt, cfg.eta);
      b = ob.step(bt, gd.transpose() * at, cfg.eta);
      worst_adam = std::max({worst_adam, oracle::rel(f.a(), a), oracle::rel(f.b(), b)});
    }
  }
  return {worst_gd <= 1e-10 && worst_adam <= 1e-10,
          fmt("preconditioned vs explicit %.3e, scalar Adam moment path %.3e (tol 1e-10)", worst_gd,
              worst_adam)};
}

Outcome c9_horizontal() {
  oracle::Rng rng(kSampleSeed + 9);
  double worst = 0.0, worst_lib = 0.0;
  for (const Sample& s : samples(200, kSampleSeed + 90)) {
    const LowRankFactors f(s.a, s.b);
    const Mat g = rng.gaussian(s.a.rows(), s.b.rows());
    StepConfig cfg;
    cfg.eta = 0.05;
    const LowRankFactors next = reflora_step(f, pair_from_dense(g, s.a, s.b), cfg, std::nullopt, 1).factors;
    const Mat da = next.a() - s.a, db = next.b() - s.b;
    const Mat st = oracle::geometric_mean(gram_of(s.a), gram_of(s.b));
    const Mat st_inv = st.inverse();
    const double norm = std::sqrt((da * st).cwiseProduct(da).sum() + (db * st_inv).cwiseProduct(db).sum());
    // <dA S, A E_ij> - <dB S^{-1}, B E_ji> over all elementary E_ij.
    const Mat k = (st * da.transpose() * s.a).transpose() - st_inv * db.transpose() * s.b;
    worst = std::max(worst, k.cwiseAbs().maxCoeff() / norm);
    worst_lib = std::max(worst_lib, horizontal_check(f, {da, db}));
  }
  return {worst <= 1e-8 && worst_lib <= 1e-8,
          fmt("normalized vertical component %.3e, library check %.3e (tol 1e-8)", worst, worst_lib)};
}

Outcome c10_sandwich() {
  oracle::Rng rng(kSampleSeed + 10);
  double worst = 0.0, worst_identity = 0.0;
  const auto set = samples(500, kSampleSeed + 100);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Sample& s = set[i];
    const LowRankFactors f(s.a, s.b);
    // Every tenth instance is stationary: Y = A B^T so the gradient vanishes.
    const bool stationary = i % 10 == 0;
    const Mat y = stationary ? Mat(s.a * s.b.transpose()) : rng.gaussian(s.a.rows(), s.b.rows());
    const Mat g = s.a * s.b.transpose() - y;
    const double eta = rng.uniform(1e-4, 1e-2);
    const double spec2 = stationary ? 0.0 : std::pow(oracle::spectral(g), 2);
    const Mat st = oracle::geometric_mean(gram_of(s.a), gram_of(s.b));
    for (const Mat& sm : {Mat(Mat::Identity(s.a.cols(), s.a.cols())), st}) {
      const auto [root, inv_root] = oracle::db_sqrt(sm);
      const LowRankFactors next = preconditioned_step(f, pair_from_dense(g, s.a, s.b), eta, SpdMatrix(sm));
      const Mat d_at = (next.a() - s.a) * root;
      const Mat d_bt = (next.b() - s.b) * inv_root;
      const Mat grad_at = g * s.b * inv_root;
      const Mat grad_bt = g.transpose() * s.a * root;
      const double first = grad_at.cwiseProduct(d_at).sum() + grad_bt.cwiseProduct(d_bt).sum();
      const double lower = -eta * spec2 * oracle::g_value(s.a, s.b, sm);
      const double exact = -eta * (grad_at.squaredNorm() + grad_bt.squaredNorm());
      const double scale = std::max(std::abs(lower), 1.0);
      worst = std::max({worst, first / scale, (lower - first) / scale});
      worst_identity = std::max(worst_identity, std::abs(first - exact) / scale);
    }
  }
  return {worst <= 1e-12 && worst_identity <= 1e-10,
          fmt("worst bound violation %.3e (slack 1e-12), first-order identity %.3e (tol 1e-10)",
              worst, worst_identity)};
}

Outcome c11_bound_scan() {
  BoundScanSpec spec;
  spec.seed = kBoundScanSeed;
  const BoundScanResult res = bound_scan(spec);
  double worst = -std::numeric_limits<double>::infinity();
  double min_exact = std::numeric_limits<double>::infinity();
  double min_identity = std::numeric_limits<double>::infinity();
  std::size_t rows = 0;
  for (const BoundScanRow& row : res.rows) {
    ++rows;
    const double excess = (row.true_loss - (row.upper_bound + row.remainder)) /
                          std::max(1.0, std::abs(row.true_loss));
    worst = std::max(worst, excess);
    if (row.mode == BoundMode::TheoremExact) min_exact = std::min(min_exact, row.true_loss);
    else min_identity = std::min(min_identity, row.true_loss);
  }
  const bool a = worst <= 1e-10 && rows == 400;
  const bool b = min_exact <= min_identity;
  return {a && b, fmt("(a) max (true - bound - remainder) %.3e (tol 1e-10); ", worst) +
                      fmt("(b) min loss theorem-exact %.6g vs identity %.6g", min_exact, min_identity)};
}

Outcome c12_convergence() {
  auto spec = [](Method method, double eta) {
    RunSpec s;
    s.problem.m = 128;
    s.problem.n = 100;
    s.problem.r = 8;
    s.problem.seed = 42;
    s.init = {1.0, 0.0};
    s.step.method = method;
    s.step.eta = eta;
    s.iterations = 2000;
    s.record_timing = false;
    return s;
  };
  const Comparison high = compare({spec(Method::LoRaGd, 0.03), spec(Method::RefLoRa, 0.03)});
  const Comparison low = compare({spec(Method::LoRaGd, 0.01), spec(Method::RefLoRa, 0.01),
                                  spec(Method::ScaledGd, 0.01)});
  const bool lora_diverged = high.traces[0].diverged();
  const double reflora_ratio = high.traces[1].records.back().loss / high.traces[1].initial_loss;
  long worse_steps = 0;
  const auto& lora = low.traces[0].records;
  const auto& refl = low.traces[1].records;
  for (std::size_t i = 0; i < refl.size(); ++i) {
    if (refl[i].step > 10 && !(refl[i].loss <= lora[i].loss)) ++worse_steps;
  }
  const double refl_final = refl.back().loss;
  const double sgd_final = low.traces[2].records.back().loss;
  const bool pass = lora_diverged && !high.traces[1].diverged() && reflora_ratio <= 1e-10 &&
                    worse_steps == 0 && refl_final <= sgd_final;
  return {pass, std::string("eta 0.03: LoRA diverged=") + (lora_diverged ? "yes" : "no") +
                    fmt(", RefLoRA final/initial %.3e (tol 1e-10); ", reflora_ratio) +
                    "eta 0.01: steps>10 with RefLoRA above LoRA " + std::to_string(worse_steps) +
                    fmt(", final RefLoRA %.3e vs ScaledGD %.3e", refl_final, sgd_final)};
}

Outcome c13_gradients() {
  oracle::Rng rng(kSampleSeed + 13);
  double worst = 0.0;
  auto probe = [&](const Problem& p, const LowRankFactors& f) {
    const GradientPair g = p.grad_pair(f);
    const double scale = std::max(g.g_a.cwiseAbs().maxCoeff(), g.g_b.cwiseAbs().maxCoeff());
    for (int k = 0; k < 50; ++k) {
      const bool wrt_a = k % 2 == 0;
      Mat a = f.a(), b = f.b();
      Mat& t = wrt_a ? a : b;
      const long i = rng.integer(0, t.rows() - 1), j = rng.integer(0, t.cols() - 1);
      const double h = 1e-6, x = t(i, j);
      t(i, j) = x + h;
      const double up = p.loss_at(LowRankFactors(a, b));
      t(i, j) = x - h;
      const double down = p.loss_at(LowRankFactors(a, b));
      const double fd = (up - down) / (2 * h);
      const double an = wrt_a ? g.g_a(i, j) : g.g_b(i, j);
      worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-3 * scale));
    }
  };
  const MfSetup mf = make_mf(128, 100, 8, 42);
  probe(*mf.problem, LowRankFactors(rng.gaussian(128, 8), rng.gaussian(100, 8)));
  const LinRegSetup lr = make_linreg(6, 5, 4, 42, 1.0, 1.0, 2);
  probe(*lr.problem, lr.initial);
  return {worst <= 1e-5, fmt("worst relative finite-difference error %.3e (tol 1e-5)", worst)};
}

Outcome c14_overhead() {
  const auto rows = overhead_probe({{2048, 2048}}, {8, 32}, 20);
  auto find = [&](Index r, Method m) {
    for (const auto& row : rows)
      if (row.r == r && row.method == m) return row;
    return OverheadRow{};
  };
  bool ordering = true;
  for (Index r : {8, 32}) {
    ordering = ordering && find(r, Method::RefLoRaS).median_step_ns <= find(r, Method::RefLoRa).median_step_ns;
  }
  const double growth_full = find(32, Method::RefLoRa).median_refactor_ns / find(8, Method::RefLoRa).median_refactor_ns;
  const double growth_scalar =
      find(32, Method::RefLoRaS).median_refactor_ns / find(8, Method::RefLoRaS).median_refactor_ns;
  const bool pass = ordering && growth_full >= 2.0 && growth_scalar <= 6.0 * 4.0;
  return {pass, std::string("step ordering RefLoRA-S <= RefLoRA: ") + (ordering ? "yes" : "no") +
                    fmt("; refactor growth r 8->32: RefLoRA %.2fx (need >= 2), ", growth_full) +
                    fmt("RefLoRA-S %.2fx (need <= 24)", growth_scalar)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "balanced refactor identity", 5.0, c1_balance},
      {2, "closed forms of the geometric mean agree", 60.0, c2_closed_forms},
      {3, "stationarity and minimality", 60.0, c3_stationarity},
      {4, "matrix small-eta branch", 60.0, c4_small_eta_branch},
      {5, "scalar branch", 60.0, c5_scalar},
      {6, "invariance under invertible reparametrization", 60.0, c6_reparametrization},
      {7, "orthogonal invariance of LoRA", 60.0, c7_orthogonal},
      {8, "preconditioned step dual paths", 60.0, c8_dual_path},
      {9, "horizontal update", 60.0, c9_horizontal},
      {10, "first-order sandwich", 60.0, c10_sandwich},
      {11, "bound scan on linear regression", 10.0, c11_bound_scan},
      {12, "matrix factorization convergence", 60.0, c12_convergence},
      {13, "gradient correctness", 60.0, c13_gradients},
      {14, "per-step overhead ordering", 120.0, c14_overhead},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.time_limit_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::printf("[%s] %2d %s: %s; %.2f s (limit %.0f s)\n", pass ? "PASS" : "FAIL", c.id, c.title,
                o.detail.c_str(), secs, c.time_limit_s);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
