#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperfusion/encoder.hpp"
#include "hyperfusion/fusion.hpp"
#include "hyperfusion/ops.hpp"

namespace hyperfusion {

inline constexpr double kProbClamp = 1e-12;

// Which terms make up the training objective.
enum class LossKind { bce, wbce, bce_sp, wbce_sp };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::bce: return "bce";
    case LossKind::wbce: return "wbce";
    case LossKind::bce_sp: return "bce+sp";
    case LossKind::wbce_sp: return "wbce+sp";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view name) {
  for (LossKind k : {LossKind::bce, LossKind::wbce, LossKind::bce_sp, LossKind::wbce_sp})
    if (to_string(k) == name) return k;
  throw ParameterError("unknown loss '" + std::string(name) + "'");
}

struct LossConfig {
  LossKind kind = LossKind::wbce_sp;
  double mu = 0.01;
  std::vector<double> lambda{1.0, 1.0, 1.0, 1.0};
  std::size_t sp_layers = 4;

  bool balanced() const { return kind == LossKind::wbce || kind == LossKind::wbce_sp; }
  bool structural() const { return kind == LossKind::bce_sp || kind == LossKind::wbce_sp; }

  void validate() const {
    if (!(mu >= 0.0)) throw ParameterError("LossConfig: mu must be >= 0");
    if (lambda.size() < sp_layers)
      throw ParameterError("LossConfig: need " + std::to_string(sp_layers) + " lambda values, got " +
                           std::to_string(lambda.size()));
    for (double l : lambda)
      if (!(l >= 0.0)) throw ParameterError("LossConfig: lambda values must be >= 0");
  }
};

namespace detail {

inline void check_pred_gt(const char* op, const Tensor& pred, const Tensor& gt) {
  if (pred.dims() != gt.dims()) shape_fail(op, pred.dims(), gt.dims());
  for (double g : gt.values())
    if (g != 0.0 && g != 1.0) throw ParameterError(std::string(op) + ": ground truth must be binary");
}

// Class-weighted cross-entropy; weights (w_pos, w_neg) per sample.
inline Tensor weighted_ce(Tape& tape, const char* op, const Tensor& pred, const Tensor& gt,
                          std::vector<std::pair<double, double>> weights) {
  const std::size_t n = weights.size(), per = pred.numel() / n;
  Tensor out = make_output({1}, pred.requires_grad());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double p = std::clamp(pred[j], kProbClamp, 1.0 - kProbClamp);
      total -= gt[j] == 1.0 ? weights[i].first * std::log(p) : weights[i].second * std::log(1.0 - p);
    }
  out[0] = total;
  if (pred.requires_grad()) {
    tape.record(op, {pred}, out, [pred, gt, out, weights = std::move(weights), n, per]() mutable {
      const double g = out.grad()[0];
      auto gp = pred.grad_mut();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
          const double p = pred[j];
          if (p < kProbClamp || p > 1.0 - kProbClamp) continue;
          gp[j] += gt[j] == 1.0 ? -g * weights[i].first / p : g * weights[i].second / (1.0 - p);
        }
    });
  }
  return out;
}

}  // namespace detail

/// -Σ_{fg} log p - Σ_{bg} log(1-p), probabilities clamped to [1e-12, 1-1e-12].
inline Tensor bce_loss(Tape& tape, const Tensor& pred, const Tensor& gt) {
  detail::check_pred_gt("bce_loss", pred, gt);
  return detail::weighted_ce(tape, "bce_loss", pred, gt, {{1.0, 1.0}});
}

/// Fraction of background pixels in each sample (the foreground weight).
inline std::vector<double> class_balance(const Tensor& gt) {
  const std::size_t n = gt.dim(0), per = gt.numel() / n;
  std::vector<double> beta(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t bg = 0;
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) bg += gt[j] == 0.0;
    beta[i] = static_cast<double>(bg) / static_cast<double>(per);
  }
  return beta;
}

/// Class-balanced cross-entropy: foreground terms weighted by beta =
/// |background| / |all| of the sample, background terms by 1 - beta.
/// `forced_beta` overrides the per-sample balance.
inline Tensor wbce_loss(Tape& tape, const Tensor& pred, const Tensor& gt, std::optional<double> forced_beta = {}) {
  detail::check_pred_gt("wbce_loss", pred, gt);
  std::vector<std::pair<double, double>> weights;
  if (forced_beta) {
    weights.assign(pred.dim(0), {*forced_beta, 1.0 - *forced_beta});
  } else {
    for (double b : class_balance(gt)) weights.emplace_back(b, 1.0 - b);
  }
  return detail::weighted_ce(tape, "wbce_loss", pred, gt, std::move(weights));
}

/// Frozen convolutional feature stack used by the structure-perceptual loss.
/// Single-channel maps are replicated to three channels on entry.
class SPExtractor {
 public:
  explicit SPExtractor(std::uint64_t seed = 20180917, std::vector<std::size_t> widths = {8, 8, 16, 16}) {
    std::mt19937_64 rng(seed);
    std::size_t in = 3;
    for (std::size_t w : widths) {
      ConvParams c = make_conv(in, w, 3, rng);
      c.kernel.set_requires_grad(false);
      c.bias.set_requires_grad(false);
      layers_.push_back(std::move(c));
      in = w;
    }
  }

  std::size_t depth() const { return layers_.size(); }
  const std::vector<ConvParams>& layers() const { return layers_; }

  /// Outputs of the first `count` conv+relu layers.
  std::vector<Tensor> features(Tape& tape, const Tensor& map, std::size_t count) const {
    if (count > layers_.size())
      throw ParameterError("SPExtractor: " + std::to_string(count) + " taps requested, extractor has " +
                           std::to_string(layers_.size()));
    std::vector<Tensor> taps;
    Tensor x = map.dim(1) == 1 ? repeat_channels(tape, map, 3) : map;
    for (std::size_t l = 0; l < count; ++l) {
      x = relu(tape, conv2d(tape, x, layers_[l].kernel, layers_[l].bias));
      taps.push_back(x);
    }
    return taps;
  }

 private:
  std::vector<ConvParams> layers_;
};

/// Σ_l λ_l Σ_n ||φ_l(gt_n) - φ_l(pred_n)||_2 (unsquared norm per layer).
inline Tensor sp_loss(Tape& tape, const Tensor& pred, const Tensor& gt, const SPExtractor& extractor,
                      const LossConfig& cfg) {
  if (pred.dims() != gt.dims()) detail::shape_fail("sp_loss", pred.dims(), gt.dims());
  cfg.validate();
  const auto fp = extractor.features(tape, pred, cfg.sp_layers);
  const auto fg = extractor.features(tape, gt.detach(), cfg.sp_layers);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < cfg.sp_layers; ++l) {
    if (cfg.lambda[l] == 0.0) continue;
    total = add(tape, total, scale(tape, sample_l2_distance(tape, fg[l], fp[l]), cfg.lambda[l]));
  }
  return total;
}

struct LossTerms {
  Tensor total;
  Tensor cross_entropy;  // bce or wbce
  Tensor structural;     // μ-unscaled sp term; zero when unused
};

/// cross-entropy term (+ μ · sp when the loss kind includes it).
inline LossTerms total_loss(Tape& tape, const Tensor& pred, const Tensor& gt, const SPExtractor& extractor,
                            const LossConfig& cfg) {
  cfg.validate();
  LossTerms t;
  t.cross_entropy = cfg.balanced() ? wbce_loss(tape, pred, gt) : bce_loss(tape, pred, gt);
  if (cfg.structural() && cfg.mu > 0.0) {
    t.structural = sp_loss(tape, pred, gt, extractor, cfg);
    t.total = add(tape, t.cross_entropy, scale(tape, t.structural, cfg.mu));
  } else {
    t.structural = Tensor::scalar(0.0);
    t.total = t.cross_entropy;
  }
  return t;
}

struct OptimState {
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 4;
  std::vector<Tensor> velocity;  // parallel to the parameter list
};

/// SGD with momentum and L2 weight decay:
///   v <- momentum v + grad + weight_decay p ;  p <- p - lr v
/// Tensors that do not require grad are skipped.
inline void sgd_step(std::span<const NamedTensor> params, OptimState& state) {
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.tensor.dims());
  }
  if (state.velocity.size() != params.size())
    throw ContractError("sgd_step: optimizer holds " + std::to_string(state.velocity.size()) +
                        " velocity buffers for " + std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    if (!p.requires_grad()) continue;
    if (!p.has_grad()) throw ContractError("sgd_step: parameter '" + params[i].name + "' has no gradient");
    Tensor& v = state.velocity[i];
    if (v.dims() != p.dims()) detail::shape_fail("sgd_step", p.dims(), v.dims(), params[i].name);
    const auto g = p.grad();
    auto pv = p.values();
    auto vv = v.values();
    for (std::size_t j = 0; j < pv.size(); ++j) {
      vv[j] = state.momentum * vv[j] + g[j] + state.weight_decay * pv[j];
      pv[j] -= state.lr * vv[j];
    }
  }
}

}  // namespace hyperfusion
