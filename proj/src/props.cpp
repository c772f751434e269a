#include "reflora/props.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>

#include "reflora/harness.hpp"

namespace reflora {
namespace {

Index uniform_int(CounterRng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.uniform() * static_cast<double>(hi - lo + 1));
}

SpdMatrix random_spd(CounterRng& rng, Index dim) {
  const Matrix q = gaussian_matrix(rng, dim, dim);
  Matrix m = q.transpose() * q + 0.5 * Matrix::Identity(dim, dim);
  return SpdMatrix(0.5 * (m + m.transpose()));
}

LowRankFactors random_factors(CounterRng& rng) {
  const Index r = uniform_int(rng, 1, 6);
  const Index m = uniform_int(rng, r, 20);
  const Index n = uniform_int(rng, r, 20);
  return LowRankFactors(gaussian_matrix(rng, m, r), gaussian_matrix(rng, n, r));
}

/// Orthogonal factor of a Gaussian matrix.
Matrix random_orthogonal(CounterRng& rng, Index r) {
  Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(rng, r, r));
  return qr.householderQ() * Matrix::Identity(r, r);
}

Matrix random_invertible(CounterRng& rng, Index r) {
  Matrix p = gaussian_matrix(rng, r, r) + 2.0 * Matrix::Identity(r, r);
  while (std::abs(p.determinant()) < 1e-3) p += Matrix::Identity(r, r);
  return p;
}

using Trial = std::function<double(CounterRng&)>;

PropertyOutcome measure(const char* name, double tol, std::size_t trials, const CounterRng& root,
                        std::uint64_t stream, const Trial& trial) {
  CounterRng rng = root.split(stream);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double r = 0.0;
    try {
      r = trial(rng);
    } catch (const Error&) {
      r = std::numeric_limits<double>::infinity();
    }
    if (!(r <= worst)) worst = std::isnan(r) ? std::numeric_limits<double>::infinity() : r;
  }
  return {name, worst, tol, worst <= tol};
}

}  // namespace

std::vector<PropertyOutcome> run_properties(const PropsOptions& opts) {
  std::optional<testing::ScopedGeometricMeanFault> fault;
  if (opts.inject_fault) fault.emplace();

  const CounterRng root(opts.seed, 0x70726f7073ULL);
  const std::size_t n = std::max<std::size_t>(1, opts.trials);
  std::vector<PropertyOutcome> out;
  std::uint64_t stream = 0;
  auto add = [&](const char* name, double tol, const Trial& trial) {
    out.push_back(measure(name, tol, n, root, ++stream, trial));
  };

  add("linalg.sqrt_squared", 1e-10, [](CounterRng& rng) {
    const SpdMatrix m = random_spd(rng, uniform_int(rng, 1, 16));
    const Matrix root = spd_sqrt(m).matrix();
    return relative_error(root * root, m.matrix());
  });

  add("linalg.inv_sqrt", 1e-9, [](CounterRng& rng) {
    const SpdMatrix m = random_spd(rng, uniform_int(rng, 1, 16));
    return relative_error(spd_inv_sqrt(m).matrix(), spd_sqrt(m).matrix().inverse());
  });

  add("linalg.norm_ordering", 1e-12, [](CounterRng& rng) {
    const Matrix m = gaussian_matrix(rng, uniform_int(rng, 1, 12), uniform_int(rng, 1, 12));
    const double fro = m.norm();
    const double excess = std::max(fro - nuclear_norm(m), spectral_norm(m) - fro);
    return std::max(0.0, excess) / fro;
  });

  add("refactor.closed_form_agreement", 1e-9, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const SpdMatrix x = gram(f.a());
    const SpdMatrix y = gram(f.b());
    const Matrix other = spd_inverse(x).matrix() * nonsym_psd_sqrt(x, y);
    return relative_error(geometric_mean_s(f).matrix(), other);
  });

  add("refactor.balance", 1e-8, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    StepConfig cfg;
    return balance_gap(f, cfg);
  });

  add("refactor.stationarity", 1e-8, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const Matrix s = geometric_mean_s(f).matrix();
    const Matrix x = gram(f.a()).matrix();
    return relative_error(s * x * s, gram(f.b()).matrix());
  });

  add("refactor.g_equals_nuclear", 1e-8, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const double g = g_objective(f, geometric_mean_s(f));
    const double c = 2.0 * nuclear_norm(f.product());
    return std::abs(g - c) / c;
  });

  add("refactor.minimality", 1e-12, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const SpdMatrix s = geometric_mean_s(f);
    const double g0 = g_objective(f, s);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      const Matrix e = gaussian_matrix(rng, f.rank(), f.rank(), 0.1);
      const Matrix factor = Matrix::Identity(f.rank(), f.rank()) + e;
      const Matrix sp = factor * s.matrix() * factor.transpose();
      const double g1 = g_objective(f, SpdMatrix(0.5 * (sp + sp.transpose())));
      worst = std::max(worst, (g0 - g1) / g0);
    }
    return worst;
  });

  add("refactor.congruence", 1e-8, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const Matrix p = random_invertible(rng, f.rank());
    const Matrix p_inv = p.inverse();
    const LowRankFactors g(f.a() * p, f.b() * p_inv.transpose());
    const Matrix expected = p_inv * geometric_mean_s(f).matrix() * p_inv.transpose();
    return relative_error(geometric_mean_s(g).matrix(), expected);
  });

  add("refactor.scalar_critical_point", 1e-12, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const double s = optimal_scalar(f, 1.0, RefactorMode::scalar()).scalar();
    const double lhs = f.a().squaredNorm() * s * s;
    const double rhs = f.b().squaredNorm();
    return std::abs(lhs - rhs) / rhs;
  });

  add("optim.orthogonal_invariance", 1e-9, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const MatrixFactorizationProblem prob(
        MfInstance{f.m(), f.n(), f.rank(), 0, gaussian_matrix(rng, f.m(), f.n())});
    const Matrix q = random_orthogonal(rng, f.rank());
    const LowRankFactors fq(f.a() * q, f.b() * q);
    const double eta = 0.01;
    const Matrix d0 = delta_w(f, lora_gd_step(f, prob.grad_pair(f), eta));
    const Matrix d1 = delta_w(fq, lora_gd_step(fq, prob.grad_pair(fq), eta));
    return relative_error(d1, d0);
  });

  add("optim.update_expansion", 1e-9, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const MatrixFactorizationProblem prob(
        MfInstance{f.m(), f.n(), f.rank(), 0, gaussian_matrix(rng, f.m(), f.n())});
    const GradientPair g = prob.grad_pair(f);
    const double eta = 0.01;
    const SpdMatrix s = geometric_mean_s(f);
    const Matrix da = -eta * g.g_a;
    const Matrix db = -eta * g.g_b;
    const Matrix expected = f.a() * s.matrix() * db.transpose() +
                            da * spd_inverse(s).matrix() * f.b().transpose() + da * db.transpose();
    return relative_error(delta_w(f, preconditioned_step(f, g, eta, s)), expected);
  });

  add("optim.first_order_sandwich", 1e-12, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const MatrixFactorizationProblem prob(
        MfInstance{f.m(), f.n(), f.rank(), 0, gaussian_matrix(rng, f.m(), f.n())});
    const Matrix grad = prob.gradient(prob.weight(f));
    const double eta = 1e-3;
    const double spec2 = std::pow(spectral_norm(grad), 2);
    double worst = 0.0;
    for (const SpdMatrix& s : {SpdMatrix::identity(f.rank()), geometric_mean_s(f)}) {
      const Matrix b_t = f.b() * spd_inv_sqrt(s).matrix();
      const Matrix a_t = f.a() * spd_sqrt(s).matrix();
      const double first = -eta * ((grad * b_t).squaredNorm() + (grad.transpose() * a_t).squaredNorm());
      const double lower = -eta * spec2 * g_objective(f, s);
      const double scale = std::max(std::abs(lower), std::numeric_limits<double>::min());
      worst = std::max({worst, first / scale, (lower - first) / scale});
    }
    return worst;
  });

  add("optim.horizontal_update", 1e-8, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const MatrixFactorizationProblem prob(
        MfInstance{f.m(), f.n(), f.rank(), 0, gaussian_matrix(rng, f.m(), f.n())});
    const GradientPair g = prob.grad_pair(f);
    const SpdMatrix s = geometric_mean_s(f);
    const double eta = 0.01;
    const LowRankFactors next = preconditioned_step(f, g, eta, s);
    return horizontal_check(f, {next.a() - f.a(), next.b() - f.b()});
  });

  add("optim.balance_propagation", 1e-7, [](CounterRng& rng) {
    const LowRankFactors f0 = random_factors(rng);
    const MatrixFactorizationProblem prob(
        MfInstance{f0.m(), f0.n(), f0.rank(), 0, gaussian_matrix(rng, f0.m(), f0.n())});
    RunSpec spec;
    spec.iterations = 20;
    spec.record_timing = false;
    spec.step.eta = 0.01;
    const Trace trace = run(prob, f0, spec);
    double worst = 0.0;
    for (const TraceRecord& rec : trace.records) worst = std::max(worst, rec.balance_gap);
    return worst;
  });

  add("problems.quadratic_bound", 1e-10, [](CounterRng& rng) {
    const Index m = uniform_int(rng, 1, 8), n = uniform_int(rng, 1, 8), k = uniform_int(rng, 1, 8);
    const LinearRegressionProblem prob(
        LinRegInstance{m, n, k, 0, gaussian_matrix(rng, n, k), gaussian_matrix(rng, m, k)},
        gaussian_matrix(rng, m, n));
    const Matrix w = gaussian_matrix(rng, m, n);
    const Matrix dw = gaussian_matrix(rng, m, n);
    const double lhs = prob.loss(w + dw);
    const double rhs =
        prob.loss(w) + frobenius_dot(prob.gradient(w), dw) + 0.5 * *prob.lipschitz() * dw.squaredNorm();
    return std::max(0.0, lhs - rhs) / std::max(1.0, std::abs(rhs));
  });

  add("problems.gradient_fd", 1e-5, [](CounterRng& rng) {
    const LowRankFactors f = random_factors(rng);
    const Index k = uniform_int(rng, 1, 8);
    const LinearRegressionProblem prob(
        LinRegInstance{f.m(), f.n(), k, 0, gaussian_matrix(rng, f.n(), k),
                       gaussian_matrix(rng, f.m(), k)},
        Matrix::Zero(f.m(), f.n()));
    const GradientPair g = prob.grad_pair(f);
    const Index i = uniform_int(rng, 0, f.m() - 1);
    const Index j = uniform_int(rng, 0, f.rank() - 1);
    const double h = 1e-6;
    Matrix ap = f.a(), am = f.a();
    ap(i, j) += h;
    am(i, j) -= h;
    const double fd =
        (prob.loss_at(LowRankFactors(ap, f.b())) - prob.loss_at(LowRankFactors(am, f.b()))) / (2 * h);
    return std::abs(fd - g.g_a(i, j)) / std::max(1.0, std::abs(g.g_a(i, j)));
  });

  add("harness.determinism", 0.0, [](CounterRng& rng) {
    RunSpec spec;
    spec.problem.m = 12;
    spec.problem.n = 10;
    spec.problem.r = 2;
    spec.problem.seed = rng.next_u64();
    spec.iterations = 10;
    spec.record_timing = false;
    const Trace a = run(spec);
    const Trace b = run(spec);
    double diff = 0.0;
    for (std::size_t t = 0; t < a.records.size(); ++t) {
      diff = std::max(diff, std::abs(a.records[t].loss - b.records[t].loss));
    }
    return diff;
  });

  return out;
}

void write_props_table(std::ostream& os, const std::vector<PropertyOutcome>& outcomes) {
  std::size_t width = 8;
  for (const auto& o : outcomes) width = std::max(width, o.name.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %12s  %10s  %s\n", static_cast<int>(width), "property",
                "residual", "tolerance", "result");
  os << buf;
  for (const auto& o : outcomes) {
    std::snprintf(buf, sizeof buf, "%-*s  %12.4e  %10.1e  %s\n", static_cast<int>(width),
                  o.name.c_str(), o.residual, o.tolerance, o.pass ? "PASS" : "FAIL");
    os << buf;
  }
}

bool all_pass(const std::vector<PropertyOutcome>& outcomes) {
  return std::all_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.pass; });
}

}  // namespace reflora
