#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "reflora/optim.hpp"
#include "reflora/random.hpp"

namespace reflora {

/// Differentiable loss over an m x n weight, W = W_pt + scale * A B^T.
///
/// `adapter_scale` is alpha / r; it is 1 unless an explicit alpha is configured.
class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string_view name() const = 0;
  virtual double loss(const Matrix& w) const = 0;
  virtual Matrix gradient(const Matrix& w) const = 0;
  /// Factor gradients; implementations avoid forming grad(W) where the structure permits.
  virtual GradientPair grad_pair(const LowRankFactors& f) const = 0;

  Index rows() const { return w_pretrained_.rows(); }
  Index cols() const { return w_pretrained_.cols(); }
  const Matrix& w_pretrained() const { return w_pretrained_; }
  std::optional<double> lipschitz() const { return lipschitz_; }
  double adapter_scale() const { return adapter_scale_; }

  Matrix weight(const LowRankFactors& f) const;
  double loss_at(const LowRankFactors& f) const { return loss(weight(f)); }

 protected:
  Problem(Matrix w_pretrained, std::optional<double> lipschitz, double adapter_scale);

  void require_factor_shapes(const LowRankFactors& f) const;

 private:
  Matrix w_pretrained_;
  std::optional<double> lipschitz_;
  double adapter_scale_;
};

/// Rank-r target Y for 1/2 ||Y - W||_F^2.
struct MfInstance {
  Index m = 0;
  Index n = 0;
  Index r = 0;
  std::uint64_t seed = 0;
  Matrix y;
};

/// Data for 1/2 ||Y - W X||_F^2 with X n x k and Y m x k.
struct LinRegInstance {
  Index m = 0;
  Index n = 0;
  Index k = 0;
  std::uint64_t seed = 0;
  Matrix x;
  Matrix y;
};

/// loss = 1/2 ||Y - W||_F^2, grad = W - Y, L = 1.
class MatrixFactorizationProblem final : public Problem {
 public:
  explicit MatrixFactorizationProblem(MfInstance instance, double adapter_scale = 1.0);

  std::string_view name() const override { return "mf"; }
  double loss(const Matrix& w) const override;
  Matrix gradient(const Matrix& w) const override;
  GradientPair grad_pair(const LowRankFactors& f) const override;

  const MfInstance& instance() const { return instance_; }

 private:
  MfInstance instance_;
};

/// loss = 1/2 ||Y - W X||_F^2, grad = (W X - Y) X^T, L = ||X X^T||_2.
class LinearRegressionProblem final : public Problem {
 public:
  LinearRegressionProblem(LinRegInstance instance, Matrix w_pretrained, double adapter_scale = 1.0);

  std::string_view name() const override { return "linreg"; }
  double loss(const Matrix& w) const override;
  Matrix gradient(const Matrix& w) const override;
  GradientPair grad_pair(const LowRankFactors& f) const override;

  const LinRegInstance& instance() const { return instance_; }

 private:
  LinRegInstance instance_;
};

struct MfSetup {
  MfInstance instance;
  std::shared_ptr<const MatrixFactorizationProblem> problem;
};

struct LinRegSetup {
  LinRegInstance instance;
  std::shared_ptr<const LinearRegressionProblem> problem;
  /// A_0 ~ N(0, init_sigma_a^2), B_0 ~ N(0, init_sigma_b^2), drawn from the init stream.
  LowRankFactors initial;
};

/// Y from a standard Gaussian m x n matrix truncated to its top r singular values,
/// drawn from the instance stream of `seed`.
MfSetup make_mf(Index m, Index n, Index r, std::uint64_t seed, double adapter_scale = 1.0);

/// X, Y standard Gaussian from the instance stream, W_pt = 0, initial factors of rank `rank`
/// from the init stream.
LinRegSetup make_linreg(Index m, Index n, Index k, std::uint64_t seed, double init_sigma_a,
                        double init_sigma_b, Index rank = 1, double adapter_scale = 1.0);

/// Convenience wrapper around Problem::grad_pair.
inline GradientPair grad_pair(const Problem& problem, const LowRankFactors& f) {
  return problem.grad_pair(f);
}

// Text format, one block per matrix:
//   matrix <name> <rows> <cols>
//   <cols decimal values, 17 significant digits>   (one line per row)
// Instance files start with a header line, then their matrix blocks:
//   reflora-instance mf m=<m> n=<n> r=<r> seed=<seed>        followed by block Y
//   reflora-instance linreg m=<m> n=<n> k=<k> seed=<seed>    followed by blocks X, Y
void write_matrix(std::ostream& os, std::string_view name, const Matrix& m);
/// Reads one block; throws ConfigError on malformed input or a name mismatch.
Matrix read_matrix(std::istream& is, std::string_view expected_name);

void write_instance(std::ostream& os, const MfInstance& inst);
void write_instance(std::ostream& os, const LinRegInstance& inst);
MfInstance read_mf_instance(std::istream& is);
LinRegInstance read_linreg_instance(std::istream& is);

}  // namespace reflora
