#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <utility>

#include "reflora/refactor.hpp"

namespace reflora {

/// Factor gradients g_A = grad(W) B and g_B = grad(W)^T A.
struct GradientPair {
  Matrix g_a;
  Matrix g_b;
};

enum class Method { LoRaGd, RefLoRa, RefLoRaS, ScaledGd };
enum class OptimizerKind { Gd, Adam, AdamW };

std::string_view to_string(Method m);
std::string_view to_string(OptimizerKind o);
Method parse_method(std::string_view name);
OptimizerKind parse_optimizer(std::string_view name);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moment accumulators of one parameter matrix.
struct MomentSlice {
  Matrix first;
  Matrix second;
};

struct OptimizerState {
  MomentSlice a;
  MomentSlice b;
  std::size_t step = 0;
  AdamHyper hyper;

  static OptimizerState zeros(Index m, Index n, Index r, const AdamHyper& hyper = {});
};

struct StepConfig {
  double eta = 0.01;
  Method method = Method::RefLoRa;
  OptimizerKind optimizer = OptimizerKind::Gd;
  RefactorMode refactor_mode = RefactorMode::balanced();
  /// Iterations during which a rank-deficient pair falls back to a plain LoRA step.
  std::size_t warmup_steps = 1;

  /// Throws ConfigError for eta <= 0, non-finite eta, or an unsupported combination.
  void validate() const;
};

struct StepResult {
  LowRankFactors factors;
  std::optional<OptimizerState> state;
  /// False when the step fell back to plain LoRA during warmup.
  bool refactored = false;
};

/// A_{t+1} = A - eta g_A,  B_{t+1} = B - eta g_B.
LowRankFactors lora_gd_step(const LowRankFactors& f, const GradientPair& g, double eta);

/// A_+ B_+^T - A B^T.
Matrix delta_w(const LowRankFactors& before, const LowRankFactors& after);

/// A - eta g_A S^{-1},  B - eta g_B S: a GD step on (A S^{1/2}, B S^{-1/2}) mapped back to
/// the original axes.
LowRankFactors preconditioned_step(const LowRankFactors& f, const GradientPair& g, double eta,
                                   const SpdMatrix& s);

/// RefLoRA step with the matrix refactoring chosen by cfg.refactor_mode. With Gd this is the
/// preconditioned step above; with Adam/AdamW the preconditioned gradients g_A S^{-1} and
/// g_B S are handed to the adaptive rule. `iteration` is the zero-based loop counter used for
/// the warmup fallback.
StepResult reflora_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                        std::optional<OptimizerState> state, std::size_t iteration);

/// RefLoRA-S step: rescale (A, B) to (sqrt(s) A, B / sqrt(s)) and take a GD or adaptive step
/// on the rescaled pair. Adaptive moments are carried over scaled by 1/sqrt(s) and 1/s for A,
/// sqrt(s) and s for B.
StepResult reflora_s_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                          std::optional<OptimizerState> state, std::size_t iteration);

/// A - eta g_A (B^T B)^{-1},  B - eta g_B (A^T A)^{-1}.
LowRankFactors scaledgd_step(const LowRankFactors& f, const GradientPair& g, double eta);

/// Bias-corrected Adam on one parameter matrix. `step` is the 1-based count after the
/// increment for this update. With `decoupled`, the parameter is first shrunk by
/// (1 - eta * weight_decay) (AdamW); otherwise weight decay is added to the gradient.
Matrix adam_update(const Matrix& param, const Matrix& grad, MomentSlice& slice, std::size_t step,
                   double eta, const AdamHyper& hyper, bool decoupled);

/// One step of the configured method, with the warmup fallback.
StepResult take_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                     std::optional<OptimizerState> state, std::size_t iteration);

/// Largest |g-metric inner product| between the update (dA, dB) and the vertical directions
/// (A X, -B X^T) for X ranging over the r^2 elementary matrices, divided by the g-norm of the
/// update. The metric is g((G_A, G_B), (Z_A, Z_B)) = <G_A S~, Z_A> + <G_B S~^{-1}, Z_B>.
/// Returns 0 for a zero update.
double horizontal_check(const LowRankFactors& f, const std::pair<Matrix, Matrix>& update);

}  // namespace reflora
