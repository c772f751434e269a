#include "reflora/refactor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace reflora {
namespace {

std::atomic<bool> g_fault{false};

constexpr Index kDenseNuclearLimit = 512;

double singular_ratio(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  const double top = sv(0);
  if (!(top > 0.0)) return 0.0;
  return sv(sv.size() - 1) / top;
}

void require_eta_nonzero(double eta) {
  if (eta == 0.0) {
    throw InvalidEta(
        "eta = 0: the bound's minimizer is undefined there (jump discontinuity of the "
        "theorem-exact refactoring)");
  }
  if (!std::isfinite(eta)) throw InvalidEta("eta must be finite");
}

/// tr(A S A^T) + tr(B S^{-1} B^T) with S^{-1} supplied.
double g_from_parts(const LowRankFactors& f, const Matrix& s, const Matrix& s_inv) {
  return (f.a() * s).cwiseProduct(f.a()).sum() + (f.b() * s_inv).cwiseProduct(f.b()).sum();
}

}  // namespace

LowRankFactors::LowRankFactors(Matrix a, Matrix b) : a_(std::move(a)), b_(std::move(b)) {
  if (a_.cols() != b_.cols()) {
    std::ostringstream os;
    os << "LowRankFactors: rank mismatch, A has " << a_.cols() << " columns and B has "
       << b_.cols();
    throw DimensionMismatch(os.str());
  }
  if (a_.cols() < 1 || a_.cols() > std::min(a_.rows(), b_.rows())) {
    std::ostringstream os;
    os << "LowRankFactors: rank " << a_.cols() << " must lie in [1, min(m, n)] with m = "
       << a_.rows() << ", n = " << b_.rows();
    throw DimensionMismatch(os.str());
  }
}

bool has_full_column_rank(const Matrix& m) {
  return m.allFinite() && singular_ratio(m) > kRankRatio;
}

bool is_full_rank(const LowRankFactors& f) {
  return has_full_column_rank(f.a()) && has_full_column_rank(f.b());
}

void require_full_rank(const LowRankFactors& f, const char* op) {
  if (!has_full_column_rank(f.a())) {
    throw RankDeficient(std::string(op) + ": A lacks full column rank");
  }
  if (!has_full_column_rank(f.b())) {
    throw RankDeficient(std::string(op) + ": B lacks full column rank");
  }
}

RefactorMode RefactorMode::theorem_exact(double lipschitz, RootChoice root) {
  if (!(lipschitz > 0.0) || !std::isfinite(lipschitz)) {
    throw ConfigError("theorem-exact mode needs a finite positive Lipschitz constant");
  }
  return {Kind::TheoremExact, lipschitz, root};
}

RefactorMode RefactorMode::scalar_theorem_exact(double lipschitz, RootChoice root) {
  if (!(lipschitz > 0.0) || !std::isfinite(lipschitz)) {
    throw ConfigError("theorem-exact mode needs a finite positive Lipschitz constant");
  }
  return {Kind::ScalarTheoremExact, lipschitz, root};
}

std::string_view to_string(Branch b) {
  switch (b) {
    case Branch::Balanced: return "balanced";
    case Branch::SmallEtaPlus: return "small-eta-plus";
    case Branch::SmallEtaMinus: return "small-eta-minus";
    case Branch::Unrefactored: return "unrefactored";
  }
  return "?";
}

SpdMatrix RefactorResult::as_matrix(Index rank) const {
  if (is_scalar()) return SpdMatrix::scaled_identity(rank, scalar());
  return matrix();
}

SpdMatrix geometric_mean_s(const SpdMatrix& gram_a, const SpdMatrix& gram_b) {
  if (gram_a.dim() != gram_b.dim()) {
    throw DimensionMismatch("geometric_mean_s: Gram dimensions differ");
  }
  const SpdMatrix xh = spd_sqrt(gram_a);
  const SpdMatrix xih = spd_inv_sqrt(gram_a);
  const Matrix inner = xh.matrix() * gram_b.matrix() * xh.matrix();
  const SpdMatrix inner_sqrt = spd_sqrt(SpdMatrix(0.5 * (inner + inner.transpose())));
  const Matrix& outer = g_fault.load(std::memory_order_relaxed) ? xh.matrix() : xih.matrix();
  const Matrix s = outer * inner_sqrt.matrix() * outer;
  return SpdMatrix(0.5 * (s + s.transpose()));
}

SpdMatrix geometric_mean_s(const LowRankFactors& f) {
  require_full_rank(f, "geometric_mean_s");
  return geometric_mean_s(gram(f.a()), gram(f.b()));
}

double c_tilde(const LowRankFactors& f) {
  if (std::min(f.m(), f.n()) <= kDenseNuclearLimit) return 2.0 * nuclear_norm(f.product());
  const SpdMatrix x = gram(f.a());
  const SpdMatrix xh = spd_sqrt(x);
  const Matrix inner = xh.matrix() * (f.b().transpose() * f.b()) * xh.matrix();
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (inner + inner.transpose()),
                                           Eigen::EigenvaluesOnly);
  return 2.0 * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

RefactorResult optimal_s(const LowRankFactors& f, double eta, const RefactorMode& mode) {
  using Kind = RefactorMode::Kind;
  if (mode.is_scalar()) return optimal_scalar(f, eta, mode);

  RefactorResult out;
  if (mode.kind == Kind::Identity) {
    const SpdMatrix id = SpdMatrix::identity(f.rank());
    out.g_value = g_from_parts(f, id.matrix(), id.matrix());
    out.c_tilde = c_tilde(f);
    out.branch = Branch::Unrefactored;
    out.s = id;
    return out;
  }
  if (mode.kind == Kind::TheoremExact) require_eta_nonzero(eta);

  const SpdMatrix s_tilde = geometric_mean_s(f);
  out.c_tilde = c_tilde(f);
  const double lipschitz = mode.lipschitz;
  const bool small_eta = mode.kind == Kind::TheoremExact && eta > 0.0 &&
                         eta < 1.0 / (out.c_tilde * lipschitz);
  if (!small_eta) {
    out.branch = Branch::Balanced;
    out.g_value = g_objective(f, s_tilde);
    out.s = s_tilde;
    return out;
  }

  const double q = 1.0 / (out.c_tilde * lipschitz * eta);
  const double disc = std::sqrt(q * q - 1.0);
  // The roots multiply to 1; the minus root is formed as a reciprocal to avoid cancellation.
  const double gamma_plus = q + disc;
  const double gamma = mode.root == RootChoice::Plus ? gamma_plus : 1.0 / gamma_plus;
  const SpdMatrix s = s_tilde.scaled(gamma);
  out.branch = mode.root == RootChoice::Plus ? Branch::SmallEtaPlus : Branch::SmallEtaMinus;
  out.g_value = g_objective(f, s);
  out.s = s;
  return out;
}

RefactorResult optimal_scalar(const LowRankFactors& f, double eta, const RefactorMode& mode) {
  using Kind = RefactorMode::Kind;
  if (!mode.is_scalar()) throw ConfigError("optimal_scalar: mode is not a scalar mode");
  const double a2 = f.a().squaredNorm();
  const double b2 = f.b().squaredNorm();
  if (!(a2 > 0.0)) throw ZeroFactor("optimal_scalar: ||A||_F = 0");
  if (!(b2 > 0.0)) throw ZeroFactor("optimal_scalar: ||B||_F = 0");
  if (mode.kind == Kind::ScalarTheoremExact) require_eta_nonzero(eta);

  const double na = std::sqrt(a2);
  const double nb = std::sqrt(b2);
  RefactorResult out;
  out.c_tilde = 2.0 * na * nb;

  const bool small_eta = mode.kind == Kind::ScalarTheoremExact && eta > 0.0 &&
                         eta < 1.0 / (out.c_tilde * mode.lipschitz);
  double s;
  if (!small_eta) {
    s = nb / na;
    out.branch = Branch::Balanced;
  } else {
    const double c = 1.0 / (mode.lipschitz * eta);
    const double disc = std::sqrt(c * c - 4.0 * a2 * b2);
    if (mode.root == RootChoice::Plus) {
      s = (c + disc) / (2.0 * a2);
      out.branch = Branch::SmallEtaPlus;
    } else {
      // (c - disc) / (2 a2) rewritten as 2 b2 / (c + disc).
      s = 2.0 * b2 / (c + disc);
      out.branch = Branch::SmallEtaMinus;
    }
  }
  out.s = s;
  out.g_value = a2 * s + b2 / s;
  return out;
}

double g_objective(const LowRankFactors& f, const SpdMatrix& s) {
  if (s.dim() != f.rank()) {
    std::ostringstream os;
    os << "g_objective: S is " << s.dim() << "x" << s.dim() << " but rank is " << f.rank();
    throw DimensionMismatch(os.str());
  }
  const SpdMatrix s_inv = spd_inverse(s);
  return g_from_parts(f, s.matrix(), s_inv.matrix());
}

double upper_bound_eval(const LowRankFactors& f, const SpdMatrix& s, double eta, double lipschitz,
                        double grad_spec_norm, double const_terms) {
  if (!(lipschitz > 0.0)) throw ConfigError("upper_bound_eval: Lipschitz constant must be positive");
  if (eta == 0.0) return const_terms;
  const double g = g_objective(f, s);
  const double gap = g - 1.0 / (lipschitz * eta);
  return 0.5 * lipschitz * eta * eta * grad_spec_norm * grad_spec_norm * gap * gap + const_terms;
}

namespace testing {
ScopedGeometricMeanFault::ScopedGeometricMeanFault() { g_fault.store(true); }
ScopedGeometricMeanFault::~ScopedGeometricMeanFault() { g_fault.store(false); }
}  // namespace testing

}  // namespace reflora
