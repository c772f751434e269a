#include "reflora/linalg.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace reflora {
namespace {

constexpr double kSymmetryTol = 1e-12;

template <typename Fn>
SpdMatrix apply_spectral(const SpdMatrix& m, Fn&& fn) {
  Vector mapped = m.eigenvalues().unaryExpr(fn);
  return SpdMatrix::from_eigen(std::move(mapped), m.eigenvectors());
}

void require_conditioned(const SpdMatrix& m, const char* op) {
  if (m.condition_ratio() < kConditionFloor) {
    std::ostringstream os;
    os << op << ": eigenvalue ratio " << m.condition_ratio() << " below " << kConditionFloor;
    throw IllConditioned(os.str());
  }
}

}  // namespace

SpdMatrix::SpdMatrix(const Matrix& m) {
  require_square(m, "SpdMatrix");
  if (m.size() == 0) throw DimensionMismatch("SpdMatrix: empty matrix");
  if (!all_finite(m)) throw NonSpdInput("SpdMatrix: non-finite entry");
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = i + 1; j < m.cols(); ++j) {
      if (std::abs(m(i, j) - m(j, i)) > kSymmetryTol * (1.0 + std::abs(m(i, j)))) {
        std::ostringstream os;
        os << "SpdMatrix: asymmetric at (" << i << ", " << j << ")";
        throw NonSpdInput(os.str());
      }
    }
  }
  m_ = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(m_);
  if (es.info() != Eigen::Success) throw NonSpdInput("SpdMatrix: eigensolver failed");
  evals_ = es.eigenvalues();
  evecs_ = es.eigenvectors();
  if (!(evals_(0) > 0.0)) {
    std::ostringstream os;
    os << "SpdMatrix: non-positive eigenvalue " << evals_(0);
    throw NonSpdInput(os.str());
  }
}

SpdMatrix SpdMatrix::identity(Index dim) { return scaled_identity(dim, 1.0); }

SpdMatrix SpdMatrix::scaled_identity(Index dim, double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw NonSpdInput("scaled_identity: scale must be positive");
  return from_eigen(Vector::Constant(dim, s), Matrix::Identity(dim, dim));
}

SpdMatrix SpdMatrix::from_eigen(Vector eigenvalues, Matrix eigenvectors) {
  SpdMatrix out;
  Matrix m = eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  out.m_ = 0.5 * (m + m.transpose());
  out.evals_ = std::move(eigenvalues);
  out.evecs_ = std::move(eigenvectors);
  // Keep the ascending-order contract even when a mapping reversed it.
  if (out.evals_.size() > 1 && out.evals_(0) > out.evals_(out.evals_.size() - 1)) {
    out.evals_.reverseInPlace();
    out.evecs_ = out.evecs_.rowwise().reverse().eval();
  }
  return out;
}

SpdMatrix SpdMatrix::scaled(double s) const {
  if (!(s > 0.0) || !std::isfinite(s)) throw NonSpdInput("SpdMatrix::scaled: scale must be positive");
  return from_eigen(evals_ * s, evecs_);
}

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected square matrix, got " << m.rows() << "x" << m.cols();
    throw DimensionMismatch(os.str());
  }
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) throw Error(std::string(what) + ": non-finite entry");
}

SpdMatrix gram(const Matrix& m) {
  Matrix g = m.transpose() * m;
  return SpdMatrix(0.5 * (g + g.transpose()));
}

SpdMatrix spd_sqrt(const SpdMatrix& m) {
  return apply_spectral(m, [](double v) { return std::sqrt(v); });
}

SpdMatrix spd_inv_sqrt(const SpdMatrix& m) {
  require_conditioned(m, "spd_inv_sqrt");
  return apply_spectral(m, [](double v) { return 1.0 / std::sqrt(v); });
}

SpdMatrix spd_inverse(const SpdMatrix& m) {
  require_conditioned(m, "spd_inverse");
  return apply_spectral(m, [](double v) { return 1.0 / v; });
}

Matrix nonsym_psd_sqrt(const SpdMatrix& x, const SpdMatrix& y) {
  if (x.dim() != y.dim()) throw DimensionMismatch("nonsym_psd_sqrt: factor dimensions differ");
  const SpdMatrix xh = spd_sqrt(x);
  const SpdMatrix xih = spd_inv_sqrt(x);
  const Matrix inner = xh.matrix() * y.matrix() * xh.matrix();
  const SpdMatrix inner_sqrt = spd_sqrt(SpdMatrix(0.5 * (inner + inner.transpose())));
  return xh.matrix() * inner_sqrt.matrix() * xih.matrix();
}

double nuclear_norm(const Matrix& m) {
  require_finite(m, "nuclear_norm");
  if (m.size() == 0) return 0.0;
  Eigen::BDCSVD<Matrix> svd(m);
  return svd.singularValues().sum();
}

double spectral_norm(const Matrix& m) {
  require_finite(m, "spectral_norm");
  if (m.size() == 0) return 0.0;
  Eigen::BDCSVD<Matrix> svd(m);
  return svd.singularValues()(0);
}

double frobenius_dot(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw DimensionMismatch("frobenius_dot: shapes differ");
  }
  return x.cwiseProduct(y).sum();
}

double relative_error(const Matrix& x, const Matrix& y) {
  const double denom = std::max(y.norm(), std::numeric_limits<double>::min());
  return (x - y).norm() / denom;
}

}  // namespace reflora
