#include "reflora/problems.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <vector>

namespace reflora {
namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Parses "key=value" tokens of an instance header into the expected keys, in order.
std::vector<std::uint64_t> parse_header(std::istream& is, std::string_view kind,
                                        std::initializer_list<std::string_view> keys) {
  std::string line;
  while (std::getline(is, line) && (line.empty() || line[0] == '#')) {
  }
  std::istringstream ls(line);
  std::string tag, got_kind;
  ls >> tag >> got_kind;
  if (tag != "reflora-instance" || got_kind != kind) {
    throw ConfigError("instance file: expected 'reflora-instance " + std::string(kind) + "'");
  }
  std::vector<std::uint64_t> values;
  for (std::string_view key : keys) {
    std::string token;
    ls >> token;
    const auto eq = token.find('=');
    if (eq == std::string::npos || token.substr(0, eq) != key) {
      throw ConfigError("instance file: expected key '" + std::string(key) + "'");
    }
    values.push_back(std::stoull(token.substr(eq + 1)));
  }
  return values;
}

}  // namespace

Problem::Problem(Matrix w_pretrained, std::optional<double> lipschitz, double adapter_scale)
    : w_pretrained_(std::move(w_pretrained)), lipschitz_(lipschitz), adapter_scale_(adapter_scale) {
  if (!(adapter_scale_ > 0.0) || !std::isfinite(adapter_scale_)) {
    throw ConfigError("adapter scale must be finite and positive");
  }
}

void Problem::require_factor_shapes(const LowRankFactors& f) const {
  if (f.m() != rows() || f.n() != cols()) {
    std::ostringstream os;
    os << name() << ": factors imply a " << f.m() << "x" << f.n() << " weight, problem is "
       << rows() << "x" << cols();
    throw DimensionMismatch(os.str());
  }
}

Matrix Problem::weight(const LowRankFactors& f) const {
  require_factor_shapes(f);
  return w_pretrained_ + adapter_scale_ * f.product();
}

MatrixFactorizationProblem::MatrixFactorizationProblem(MfInstance instance, double adapter_scale)
    : Problem(Matrix::Zero(instance.m, instance.n), 1.0, adapter_scale),
      instance_(std::move(instance)) {}

double MatrixFactorizationProblem::loss(const Matrix& w) const {
  return 0.5 * (instance_.y - w).squaredNorm();
}

Matrix MatrixFactorizationProblem::gradient(const Matrix& w) const { return w - instance_.y; }

GradientPair MatrixFactorizationProblem::grad_pair(const LowRankFactors& f) const {
  require_factor_shapes(f);
  // grad(W) B = c A (B^T B) - Y B  and  grad(W)^T A = c B (A^T A) - Y^T A, W_pt = 0.
  const double c = adapter_scale();
  const Matrix& a = f.a();
  const Matrix& b = f.b();
  GradientPair g;
  g.g_a = c * (c * (a * (b.transpose() * b)) - instance_.y * b);
  g.g_b = c * (c * (b * (a.transpose() * a)) - instance_.y.transpose() * a);
  return g;
}

LinearRegressionProblem::LinearRegressionProblem(LinRegInstance instance, Matrix w_pretrained,
                                                 double adapter_scale)
    : Problem(std::move(w_pretrained),
              Eigen::SelfAdjointEigenSolver<Matrix>(instance.x * instance.x.transpose(),
                                                    Eigen::EigenvaluesOnly)
                  .eigenvalues()
                  .maxCoeff(),
              adapter_scale),
      instance_(std::move(instance)) {
  if (instance_.x.rows() != cols() || instance_.y.rows() != rows() ||
      instance_.x.cols() != instance_.y.cols()) {
    throw DimensionMismatch("linreg: X must be n x k, Y m x k, W_pt m x n");
  }
}

double LinearRegressionProblem::loss(const Matrix& w) const {
  return 0.5 * (instance_.y - w * instance_.x).squaredNorm();
}

Matrix LinearRegressionProblem::gradient(const Matrix& w) const {
  return (w * instance_.x - instance_.y) * instance_.x.transpose();
}

GradientPair LinearRegressionProblem::grad_pair(const LowRankFactors& f) const {
  require_factor_shapes(f);
  // R = W X - Y formed as W_pt X + c A (B^T X); grad(W) = R X^T is never materialized.
  const double c = adapter_scale();
  const Matrix& x = instance_.x;
  const Matrix residual = w_pretrained() * x + c * (f.a() * (f.b().transpose() * x)) - instance_.y;
  GradientPair g;
  g.g_a = c * (residual * (x.transpose() * f.b()));
  g.g_b = c * (x * (residual.transpose() * f.a()));
  return g;
}

MfSetup make_mf(Index m, Index n, Index r, std::uint64_t seed, double adapter_scale) {
  if (m < 1 || n < 1 || r < 1 || r > std::min(m, n)) {
    std::ostringstream os;
    os << "make_mf: need 1 <= r <= min(m, n), got m = " << m << ", n = " << n << ", r = " << r;
    throw ConfigError(os.str());
  }
  CounterRng rng = CounterRng(seed).split(CounterRng::kInstanceStream);
  const Matrix full = gaussian_matrix(rng, m, n);
  Eigen::JacobiSVD<Matrix> svd(full, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Matrix y = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
                   svd.matrixV().leftCols(r).transpose();
  MfInstance inst{m, n, r, seed, y};
  auto problem = std::make_shared<const MatrixFactorizationProblem>(inst, adapter_scale);
  return {std::move(inst), std::move(problem)};
}

LinRegSetup make_linreg(Index m, Index n, Index k, std::uint64_t seed, double init_sigma_a,
                        double init_sigma_b, Index rank, double adapter_scale) {
  if (m < 1 || n < 1 || k < 1) throw ConfigError("make_linreg: dimensions must be positive");
  if (rank < 1 || rank > std::min(m, n)) throw ConfigError("make_linreg: need 1 <= r <= min(m, n)");
  if (!(init_sigma_a >= 0.0) || !(init_sigma_b >= 0.0)) {
    throw ConfigError("make_linreg: init standard deviations must be nonnegative");
  }
  const CounterRng root(seed);
  CounterRng data = root.split(CounterRng::kInstanceStream);
  LinRegInstance inst{m, n, k, seed, Matrix(), Matrix()};
  inst.x = gaussian_matrix(data, n, k);
  inst.y = gaussian_matrix(data, m, k);

  CounterRng init = root.split(CounterRng::kInitStream);
  Matrix a0 = gaussian_matrix(init, m, rank, init_sigma_a);
  Matrix b0 = gaussian_matrix(init, n, rank, init_sigma_b);

  auto problem =
      std::make_shared<const LinearRegressionProblem>(inst, Matrix::Zero(m, n), adapter_scale);
  return {std::move(inst), std::move(problem), LowRankFactors(std::move(a0), std::move(b0))};
}

void write_matrix(std::ostream& os, std::string_view name, const Matrix& m) {
  os << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j > 0) os << ' ';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

Matrix read_matrix(std::istream& is, std::string_view expected_name) {
  std::string tag, name;
  Index rows = 0, cols = 0;
  if (!(is >> tag >> name >> rows >> cols) || tag != "matrix") {
    throw ConfigError("read_matrix: malformed block header");
  }
  if (name != expected_name) {
    throw ConfigError("read_matrix: expected matrix '" + std::string(expected_name) + "', found '" +
                      name + "'");
  }
  if (rows < 0 || cols < 0) throw ConfigError("read_matrix: negative dimensions");
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      std::string token;
      if (!(is >> token)) throw ConfigError("read_matrix: truncated data for '" + name + "'");
      m(i, j) = std::stod(token);
    }
  }
  return m;
}

void write_instance(std::ostream& os, const MfInstance& inst) {
  os << "reflora-instance mf m=" << inst.m << " n=" << inst.n << " r=" << inst.r
     << " seed=" << inst.seed << '\n';
  write_matrix(os, "Y", inst.y);
}

void write_instance(std::ostream& os, const LinRegInstance& inst) {
  os << "reflora-instance linreg m=" << inst.m << " n=" << inst.n << " k=" << inst.k
     << " seed=" << inst.seed << '\n';
  write_matrix(os, "X", inst.x);
  write_matrix(os, "Y", inst.y);
}

MfInstance read_mf_instance(std::istream& is) {
  const auto v = parse_header(is, "mf", {"m", "n", "r", "seed"});
  MfInstance inst{static_cast<Index>(v[0]), static_cast<Index>(v[1]), static_cast<Index>(v[2]),
                  v[3], Matrix()};
  inst.y = read_matrix(is, "Y");
  if (inst.y.rows() != inst.m || inst.y.cols() != inst.n) {
    throw ConfigError("instance file: Y shape disagrees with header");
  }
  return inst;
}

LinRegInstance read_linreg_instance(std::istream& is) {
  const auto v = parse_header(is, "linreg", {"m", "n", "k", "seed"});
  LinRegInstance inst{static_cast<Index>(v[0]), static_cast<Index>(v[1]),
                      static_cast<Index>(v[2]), v[3], Matrix(), Matrix()};
  inst.x = read_matrix(is, "X");
  inst.y = read_matrix(is, "Y");
  if (inst.x.rows() != inst.n || inst.x.cols() != inst.k || inst.y.rows() != inst.m ||
      inst.y.cols() != inst.k) {
    throw ConfigError("instance file: X/Y shapes disagree with header");
  }
  return inst;
}

}  // namespace reflora
