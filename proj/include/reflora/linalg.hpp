#pragma once

#include <Eigen/Dense>

#include "reflora/errors.hpp"

namespace reflora {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Eigenvalue ratio below which inversion and inverse roots are refused.
inline constexpr double kConditionFloor = 1e-14;

/// Symmetric positive definite matrix with its eigendecomposition cached.
///
/// Construction checks symmetry entrywise, |M(i,j) - M(j,i)| <= 1e-12 (1 + |M(i,j)|),
/// and strict positivity of the spectrum; either failure raises NonSpdInput.
/// The stored matrix is the symmetrized input. Values are immutable.
class SpdMatrix {
 public:
  explicit SpdMatrix(const Matrix& m);

  static SpdMatrix identity(Index dim);
  static SpdMatrix scaled_identity(Index dim, double s);

  /// Builds V diag(evals) V^T without re-running the eigensolver. The caller
  /// guarantees V is orthogonal and every eigenvalue is positive.
  static SpdMatrix from_eigen(Vector eigenvalues, Matrix eigenvectors);

  const Matrix& matrix() const { return m_; }
  Index dim() const { return m_.rows(); }

  /// Ascending eigenvalues and matching orthonormal eigenvectors.
  const Vector& eigenvalues() const { return evals_; }
  const Matrix& eigenvectors() const { return evecs_; }

  double min_eigenvalue() const { return evals_(0); }
  double max_eigenvalue() const { return evals_(evals_.size() - 1); }
  double condition_ratio() const { return min_eigenvalue() / max_eigenvalue(); }

  SpdMatrix scaled(double s) const;

 private:
  SpdMatrix() = default;

  Matrix m_;
  Vector evals_;
  Matrix evecs_;
};

/// Throws DimensionMismatch unless the matrix is square.
void require_square(const Matrix& m, const char* what);

/// True when every entry is finite.
bool all_finite(const Matrix& m);

/// Throws Error when any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

/// Gram matrix M^T M as an SpdMatrix (NonSpdInput when M lacks full column rank).
SpdMatrix gram(const Matrix& m);

/// Principal square root; R R = M and R is SPD.
SpdMatrix spd_sqrt(const SpdMatrix& m);

/// Inverse principal square root; R M R = I.
/// Throws IllConditioned when lambda_min / lambda_max < kConditionFloor.
SpdMatrix spd_inv_sqrt(const SpdMatrix& m);

/// Inverse of an SPD matrix, with the same conditioning guard.
SpdMatrix spd_inverse(const SpdMatrix& m);

/// Square root of the product X Y of two SPD matrices.
///
/// X Y is similar to the SPD matrix X^{1/2} Y X^{1/2}, so it has a real positive
/// spectrum and a unique square root with the same property:
///   (X Y)^{1/2} = X^{1/2} (X^{1/2} Y X^{1/2})^{1/2} X^{-1/2}.
/// The result is generally not symmetric.
Matrix nonsym_psd_sqrt(const SpdMatrix& x, const SpdMatrix& y);

/// Sum of singular values.
double nuclear_norm(const Matrix& m);

/// Largest singular value.
double spectral_norm(const Matrix& m);

/// Frobenius inner product <X, Y>_F.
double frobenius_dot(const Matrix& x, const Matrix& y);

/// Relative Frobenius distance ||x - y||_F / max(||y||_F, tiny).
double relative_error(const Matrix& x, const Matrix& y);

}  // namespace reflora
