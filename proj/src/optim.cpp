#include "reflora/optim.hpp"

#include <cmath>
#include <sstream>

namespace reflora {
namespace {

void require_shapes(const LowRankFactors& f, const GradientPair& g, const char* op) {
  if (g.g_a.rows() != f.a().rows() || g.g_a.cols() != f.a().cols() ||
      g.g_b.rows() != f.b().rows() || g.g_b.cols() != f.b().cols()) {
    std::ostringstream os;
    os << op << ": gradient shapes " << g.g_a.rows() << "x" << g.g_a.cols() << ", "
       << g.g_b.rows() << "x" << g.g_b.cols() << " do not match factors " << f.m() << "x"
       << f.rank() << ", " << f.n() << "x" << f.rank();
    throw DimensionMismatch(os.str());
  }
}

/// Adaptive update of both factors with the given (possibly preconditioned) gradients.
StepResult adaptive_step(const Matrix& a, const Matrix& b, const Matrix& grad_a,
                         const Matrix& grad_b, const StepConfig& cfg, OptimizerState state,
                         bool refactored) {
  const bool decoupled = cfg.optimizer == OptimizerKind::AdamW;
  ++state.step;
  Matrix a_next = adam_update(a, grad_a, state.a, state.step, cfg.eta, state.hyper, decoupled);
  Matrix b_next = adam_update(b, grad_b, state.b, state.step, cfg.eta, state.hyper, decoupled);
  return {LowRankFactors(std::move(a_next), std::move(b_next)), std::move(state), refactored};
}

OptimizerState require_state(std::optional<OptimizerState>& state, const LowRankFactors& f,
                             const char* op) {
  if (!state) throw ConfigError(std::string(op) + ": adaptive optimizer needs an OptimizerState");
  if (state->a.first.rows() != f.m() || state->b.first.rows() != f.n() ||
      state->a.first.cols() != f.rank()) {
    throw DimensionMismatch(std::string(op) + ": optimizer state shape does not match factors");
  }
  return std::move(*state);
}

/// Plain LoRA step under the configured optimizer; used by LoRaGd and by every warmup fallback.
StepResult lora_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                     std::optional<OptimizerState> state) {
  if (cfg.optimizer == OptimizerKind::Gd) return {lora_gd_step(f, g, cfg.eta), std::move(state), false};
  OptimizerState st = require_state(state, f, "lora_step");
  return adaptive_step(f.a(), f.b(), g.g_a, g.g_b, cfg, std::move(st), false);
}

[[noreturn]] void rank_error_past_warmup(const char* op, std::size_t iteration,
                                         std::size_t warmup) {
  std::ostringstream os;
  os << op << ": factors lack full column rank at iteration " << iteration
     << " (warmup_steps = " << warmup << ")";
  throw RankDeficient(os.str());
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::LoRaGd: return "lora";
    case Method::RefLoRa: return "reflora";
    case Method::RefLoRaS: return "reflora-s";
    case Method::ScaledGd: return "scaledgd";
  }
  return "?";
}

std::string_view to_string(OptimizerKind o) {
  switch (o) {
    case OptimizerKind::Gd: return "gd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::AdamW: return "adamw";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  if (name == "lora") return Method::LoRaGd;
  if (name == "reflora") return Method::RefLoRa;
  if (name == "reflora-s") return Method::RefLoRaS;
  if (name == "scaledgd") return Method::ScaledGd;
  throw ConfigError("unknown method '" + std::string(name) +
                    "' (expected lora, reflora, reflora-s, scaledgd)");
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "gd") return OptimizerKind::Gd;
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected gd, adam, adamw)");
}

OptimizerState OptimizerState::zeros(Index m, Index n, Index r, const AdamHyper& hyper) {
  if (!(hyper.beta1 >= 0.0 && hyper.beta1 < 1.0 && hyper.beta2 >= 0.0 && hyper.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  OptimizerState s;
  s.a = {Matrix::Zero(m, r), Matrix::Zero(m, r)};
  s.b = {Matrix::Zero(n, r), Matrix::Zero(n, r)};
  s.hyper = hyper;
  return s;
}

void StepConfig::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) {
    std::ostringstream os;
    os << "learning rate must be finite and positive, got " << eta;
    throw ConfigError(os.str());
  }
  if (method == Method::ScaledGd && optimizer != OptimizerKind::Gd) {
    throw ConfigError("scaledgd supports the gd optimizer only");
  }
  if (method == Method::RefLoRa && refactor_mode.is_scalar()) {
    throw ConfigError("reflora needs a matrix refactoring mode (balanced, theorem-exact, identity)");
  }
  if (method == Method::RefLoRaS && !refactor_mode.is_scalar()) {
    throw ConfigError("reflora-s needs a scalar refactoring mode");
  }
}

LowRankFactors lora_gd_step(const LowRankFactors& f, const GradientPair& g, double eta) {
  require_shapes(f, g, "lora_gd_step");
  return LowRankFactors(f.a() - eta * g.g_a, f.b() - eta * g.g_b);
}

Matrix delta_w(const LowRankFactors& before, const LowRankFactors& after) {
  if (before.m() != after.m() || before.n() != after.n()) {
    throw DimensionMismatch("delta_w: factor shapes differ");
  }
  return after.product() - before.product();
}

LowRankFactors preconditioned_step(const LowRankFactors& f, const GradientPair& g, double eta,
                                   const SpdMatrix& s) {
  require_shapes(f, g, "preconditioned_step");
  if (s.dim() != f.rank()) throw DimensionMismatch("preconditioned_step: S does not match rank");
  const SpdMatrix s_inv = spd_inverse(s);
  return LowRankFactors(f.a() - eta * (g.g_a * s_inv.matrix()), f.b() - eta * (g.g_b * s.matrix()));
}

StepResult reflora_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                        std::optional<OptimizerState> state, std::size_t iteration) {
  require_shapes(f, g, "reflora_step");
  if (cfg.refactor_mode.is_scalar()) {
    throw ConfigError("reflora_step: scalar modes belong to reflora_s_step");
  }
  if (cfg.refactor_mode.kind != RefactorMode::Kind::Identity && !is_full_rank(f)) {
    if (iteration < cfg.warmup_steps) return lora_step(f, g, cfg, std::move(state));
    rank_error_past_warmup("reflora_step", iteration, cfg.warmup_steps);
  }

  // The balanced mode skips optimal_s so no nuclear norm is formed on the hot path.
  const SpdMatrix s = cfg.refactor_mode.kind == RefactorMode::Kind::BalancedAlways
                          ? geometric_mean_s(f)
                          : optimal_s(f, cfg.eta, cfg.refactor_mode).matrix();

  if (cfg.optimizer == OptimizerKind::Gd) {
    return {preconditioned_step(f, g, cfg.eta, s), std::move(state), true};
  }
  OptimizerState st = require_state(state, f, "reflora_step");
  const SpdMatrix s_inv = spd_inverse(s);
  return adaptive_step(f.a(), f.b(), g.g_a * s_inv.matrix(), g.g_b * s.matrix(), cfg,
                       std::move(st), true);
}

StepResult reflora_s_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                          std::optional<OptimizerState> state, std::size_t iteration) {
  require_shapes(f, g, "reflora_s_step");
  if (!cfg.refactor_mode.is_scalar()) {
    throw ConfigError("reflora_s_step: needs a scalar refactoring mode");
  }
  if (!(f.a().squaredNorm() > 0.0 && f.b().squaredNorm() > 0.0) && iteration < cfg.warmup_steps) {
    return lora_step(f, g, cfg, std::move(state));
  }
  const double s = optimal_scalar(f, cfg.eta, cfg.refactor_mode).scalar();
  const double root = std::sqrt(s);

  const Matrix a_tilde = root * f.a();
  const Matrix b_tilde = f.b() / root;
  // grad(W) B~ = g_A / sqrt(s),  grad(W)^T A~ = sqrt(s) g_B.
  const Matrix grad_a = g.g_a / root;
  const Matrix grad_b = root * g.g_b;

  if (cfg.optimizer == OptimizerKind::Gd) {
    return {LowRankFactors(a_tilde - cfg.eta * grad_a, b_tilde - cfg.eta * grad_b),
            std::move(state), true};
  }
  OptimizerState st = require_state(state, f, "reflora_s_step");
  st.a.first /= root;
  st.a.second /= s;
  st.b.first *= root;
  st.b.second *= s;
  return adaptive_step(a_tilde, b_tilde, grad_a, grad_b, cfg, std::move(st), true);
}

LowRankFactors scaledgd_step(const LowRankFactors& f, const GradientPair& g, double eta) {
  require_shapes(f, g, "scaledgd_step");
  require_full_rank(f, "scaledgd_step");
  const SpdMatrix gram_a_inv = spd_inverse(gram(f.a()));
  const SpdMatrix gram_b_inv = spd_inverse(gram(f.b()));
  return LowRankFactors(f.a() - eta * (g.g_a * gram_b_inv.matrix()),
                        f.b() - eta * (g.g_b * gram_a_inv.matrix()));
}

Matrix adam_update(const Matrix& param, const Matrix& grad, MomentSlice& slice, std::size_t step,
                   double eta, const AdamHyper& hyper, bool decoupled) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
      slice.first.rows() != param.rows() || slice.first.cols() != param.cols()) {
    throw DimensionMismatch("adam_update: shapes differ");
  }
  if (step == 0) throw ConfigError("adam_update: step counts from 1");

  Matrix effective_grad = grad;
  Matrix base = param;
  if (hyper.weight_decay != 0.0) {
    if (decoupled) {
      base *= (1.0 - eta * hyper.weight_decay);
    } else {
      effective_grad += hyper.weight_decay * param;
    }
  }
  slice.first = hyper.beta1 * slice.first + (1.0 - hyper.beta1) * effective_grad;
  slice.second =
      hyper.beta2 * slice.second + (1.0 - hyper.beta2) * effective_grad.cwiseAbs2();

  const double t = static_cast<double>(step);
  const double bias1 = 1.0 - std::pow(hyper.beta1, t);
  const double bias2 = 1.0 - std::pow(hyper.beta2, t);
  const Matrix m_hat = slice.first / bias1;
  const Matrix v_hat = slice.second / bias2;
  return base - eta * m_hat.cwiseQuotient((v_hat.cwiseSqrt().array() + hyper.eps).matrix());
}

StepResult take_step(const LowRankFactors& f, const GradientPair& g, const StepConfig& cfg,
                     std::optional<OptimizerState> state, std::size_t iteration) {
  switch (cfg.method) {
    case Method::LoRaGd:
      return lora_step(f, g, cfg, std::move(state));
    case Method::RefLoRa:
      return reflora_step(f, g, cfg, std::move(state), iteration);
    case Method::RefLoRaS:
      return reflora_s_step(f, g, cfg, std::move(state), iteration);
    case Method::ScaledGd:
      if (!is_full_rank(f)) {
        if (iteration < cfg.warmup_steps) return lora_step(f, g, cfg, std::move(state));
        rank_error_past_warmup("scaledgd_step", iteration, cfg.warmup_steps);
      }
      return {scaledgd_step(f, g, cfg.eta), std::move(state), true};
  }
  throw ConfigError("take_step: unknown method");
}

double horizontal_check(const LowRankFactors& f, const std::pair<Matrix, Matrix>& update) {
  const auto& [d_a, d_b] = update;
  if (d_a.rows() != f.m() || d_a.cols() != f.rank() || d_b.rows() != f.n() ||
      d_b.cols() != f.rank()) {
    throw DimensionMismatch("horizontal_check: update shapes do not match factors");
  }
  const SpdMatrix s = geometric_mean_s(f);
  const SpdMatrix s_inv = spd_inverse(s);

  const double norm2 = frobenius_dot(d_a * s.matrix(), d_a) + frobenius_dot(d_b * s_inv.matrix(), d_b);
  if (!(norm2 > 0.0)) return 0.0;

  // For X = e_i e_j^T:  <A X S~, dA> = (A^T dA S~)_ij  and  <B X^T S~^{-1}, dB> = (B^T dB S~^{-1})_ji.
  const Matrix along_a = f.a().transpose() * d_a * s.matrix();
  const Matrix along_b = f.b().transpose() * d_b * s_inv.matrix();
  const Matrix inner = along_a - along_b.transpose();
  return inner.cwiseAbs().maxCoeff() / std::sqrt(norm2);
}

}  // namespace reflora
