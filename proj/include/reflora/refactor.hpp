#pragma once

#include <optional>
#include <string_view>
#include <variant>

#include "reflora/linalg.hpp"

namespace reflora {

/// Factor pair (A, B) of the low-rank increment A B^T, with A m x r and B n x r.
class LowRankFactors {
 public:
  LowRankFactors(Matrix a, Matrix b);

  const Matrix& a() const { return a_; }
  const Matrix& b() const { return b_; }
  Index m() const { return a_.rows(); }
  Index n() const { return b_.rows(); }
  Index rank() const { return a_.cols(); }

  /// A B^T.
  Matrix product() const { return a_ * b_.transpose(); }

  bool all_finite() const { return a_.allFinite() && b_.allFinite(); }

 private:
  Matrix a_;
  Matrix b_;
};

/// sigma_min(M) > kRankRatio * sigma_max(M).
inline constexpr double kRankRatio = 1e-10;

bool has_full_column_rank(const Matrix& m);
bool is_full_rank(const LowRankFactors& f);
/// Throws RankDeficient naming the offending factor.
void require_full_rank(const LowRankFactors& f, const char* op);

enum class RootChoice { Plus, Minus };

/// How the refactoring matrix S is chosen each step.
struct RefactorMode {
  enum class Kind { BalancedAlways, TheoremExact, Scalar, ScalarTheoremExact, Identity };

  Kind kind = Kind::BalancedAlways;
  /// Lipschitz constant; present for the theorem-exact kinds only.
  double lipschitz = 0.0;
  RootChoice root = RootChoice::Plus;

  static RefactorMode balanced() { return {}; }
  static RefactorMode identity() { return {Kind::Identity, 0.0, RootChoice::Plus}; }
  static RefactorMode scalar() { return {Kind::Scalar, 0.0, RootChoice::Plus}; }
  static RefactorMode theorem_exact(double lipschitz, RootChoice root = RootChoice::Plus);
  static RefactorMode scalar_theorem_exact(double lipschitz, RootChoice root = RootChoice::Plus);

  bool is_scalar() const { return kind == Kind::Scalar || kind == Kind::ScalarTheoremExact; }
  bool is_theorem_exact() const {
    return kind == Kind::TheoremExact || kind == Kind::ScalarTheoremExact;
  }
};

enum class Branch {
  Balanced,
  SmallEtaPlus,
  SmallEtaMinus,
  /// Identity mode: S = I, no optimization performed.
  Unrefactored,
};

std::string_view to_string(Branch b);

struct RefactorResult {
  /// r x r SPD matrix for the matrix modes, positive scalar for the scalar modes.
  std::variant<double, SpdMatrix> s = 0.0;
  Branch branch = Branch::Balanced;
  /// 2 ||A B^T||_* for the matrix modes; 2 ||A||_F ||B||_F for the scalar modes.
  double c_tilde = 0.0;
  /// g(S) = ||A S^{1/2}||_F^2 + ||B S^{-1/2}||_F^2 at the returned S.
  double g_value = 0.0;

  bool is_scalar() const { return std::holds_alternative<double>(s); }
  const SpdMatrix& matrix() const { return std::get<SpdMatrix>(s); }
  double scalar() const { return std::get<double>(s); }
  /// The refactoring as an r x r SPD matrix (s I for scalar results).
  SpdMatrix as_matrix(Index rank) const;
};

/// Matrix geometric mean S~ = (A^T A)^{-1} # (B^T B), i.e. the unique SPD solution of
/// S A^T A S = B^T B, computed as
///   X^{-1/2} (X^{1/2} Y X^{1/2})^{1/2} X^{-1/2},  X = A^T A, Y = B^T B.
/// Throws RankDeficient unless both factors have full column rank.
SpdMatrix geometric_mean_s(const LowRankFactors& f);

/// Same as geometric_mean_s from precomputed Gram matrices.
SpdMatrix geometric_mean_s(const SpdMatrix& gram_a, const SpdMatrix& gram_b);

/// C~ = 2 ||A B^T||_*. Uses the SVD of the m x n product when min(m, n) <= 512,
/// otherwise the r x r route sigma_i(A B^T) = lambda_i(X^{1/2} Y X^{1/2})^{1/2}.
double c_tilde(const LowRankFactors& f);

/// Optimal S for the matrix modes (BalancedAlways, TheoremExact, Identity).
/// Scalar modes are forwarded to optimal_scalar.
///
/// TheoremExact keeps S~ when eta >= 1 / (C~ L) or eta < 0; for 0 < eta < 1 / (C~ L)
/// it returns gamma S~ with gamma = q +- sqrt(q^2 - 1), q = 1 / (C~ L eta), so that
/// g(gamma S~) = 1 / (L eta). Throws InvalidEta for eta == 0 in theorem-exact modes.
RefactorResult optimal_s(const LowRankFactors& f, double eta, const RefactorMode& mode);

/// Optimal scalar s (S = s I). Scalar: s = ||B||_F / ||A||_F. ScalarTheoremExact adds the
/// small-eta branch s = [c +- sqrt(c^2 - 4 ||A||^2 ||B||^2)] / (2 ||A||^2), c = 1 / (L eta),
/// taken when 0 < eta < 1 / (2 ||A||_F ||B||_F L). Throws ZeroFactor on a zero factor.
RefactorResult optimal_scalar(const LowRankFactors& f, double eta, const RefactorMode& mode);

/// g(S) = ||A S^{1/2}||_F^2 + ||B S^{-1/2}||_F^2 = tr(A S A^T) + tr(B S^{-1} B^T).
double g_objective(const LowRankFactors& f, const SpdMatrix& s);

/// Truncated loss upper bound
///   (L eta^2 / 2) ||grad||_2^2 (g(S) - 1 / (L eta))^2 + const_terms.
/// The O(L eta^3) remainder is not included; see quadratic_bound_terms in harness.hpp for
/// the exact constants and remainder of quadratic losses. At eta == 0 the first term is
/// dropped and const_terms is returned unchanged.
double upper_bound_eval(const LowRankFactors& f, const SpdMatrix& s, double eta, double lipschitz,
                        double grad_spec_norm, double const_terms);

namespace testing {
/// Flips the sign of the outer exponent in geometric_mean_s while alive (X^{+1/2} instead
/// of X^{-1/2}). Only for exercising invariant checks; not thread-safe with other users.
class ScopedGeometricMeanFault {
 public:
  ScopedGeometricMeanFault();
  ~ScopedGeometricMeanFault();
  ScopedGeometricMeanFault(const ScopedGeometricMeanFault&) = delete;
  ScopedGeometricMeanFault& operator=(const ScopedGeometricMeanFault&) = delete;
};
}  // namespace testing

}  // namespace reflora
