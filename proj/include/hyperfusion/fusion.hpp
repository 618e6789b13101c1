#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hyperfusion/encoder.hpp"
#include "hyperfusion/ops.hpp"

namespace hyperfusion {

// Fusion topologies compared in the ablation study.
enum class FusionVariant { input, early, late, adhoc, hyper };

inline constexpr FusionVariant kAllVariants[] = {FusionVariant::input, FusionVariant::early, FusionVariant::late,
                                                 FusionVariant::adhoc, FusionVariant::hyper};

inline std::string_view to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::input: return "input";
    case FusionVariant::early: return "early";
    case FusionVariant::late: return "late";
    case FusionVariant::adhoc: return "adhoc";
    case FusionVariant::hyper: return "hyper";
  }
  return "?";
}

inline FusionVariant parse_variant(std::string_view name) {
  for (FusionVariant v : kAllVariants)
    if (to_string(v) == name) return v;
  throw ParameterError("unknown fusion variant '" + std::string(name) + "'");
}

struct FusionConfig {
  FusionVariant variant = FusionVariant::hyper;
  // Output channels of g per block; empty means "same as the encoder block".
  std::vector<std::size_t> fuse_channels;
  // Channels each integrator emits; the prediction conv sees a multiple of this.
  std::size_t head_channels = 8;

  std::size_t fuse_width(const EncoderConfig& enc, std::size_t block) const {
    return fuse_channels.empty() ? enc.blocks[block].channels : fuse_channels.at(block);
  }

  void validate(const EncoderConfig& enc) const {
    if (!fuse_channels.empty() && fuse_channels.size() != enc.block_count())
      throw ParameterError("FusionConfig: fuse_channels needs one entry per encoder block (" +
                           std::to_string(enc.block_count()) + "), got " + std::to_string(fuse_channels.size()));
    for (std::size_t c : fuse_channels)
      if (c == 0) throw ParameterError("FusionConfig: fuse_channels must be positive");
    if (head_channels == 0) throw ParameterError("FusionConfig: head_channels must be positive");
  }
};

/// Lowest and highest tapped level index of every block.
inline std::vector<std::pair<std::size_t, std::size_t>> block_bounds(const EncoderConfig& enc) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t level = 0;
  for (const auto& b : enc.blocks) {
    const std::size_t taps = enc.taps == TapMode::every_conv ? b.conv_count : 1;
    out.emplace_back(level, level + taps - 1);
    level += taps;
  }
  return out;
}

struct NetworkConfig {
  EncoderConfig encoder;
  FusionConfig fusion;

  void validate() const {
    encoder.validate();
    fusion.validate(encoder);
  }
};

/// h: a 1x1 conv followed by as many 2x deconvolutions as needed to reach the
/// input resolution.
struct Integrator {
  ConvParams reduce;
  std::vector<Tensor> upsample;  // [head,head,4,4] each
};

struct NetworkParams {
  // Two-branch encoder (hyper, late, adhoc: every block; early: block 0 only).
  StitchedWeights stitched;
  // Single-stream encoder layers (input: every block; early: blocks 1..M-1).
  std::vector<ConvParams> single_conv;
  std::vector<NormState> single_norm;
  // g nodes; hyper: per block, per tapped level (lowest first). Other
  // variants use one node in block slot 0.
  std::vector<std::vector<ConvParams>> fuse_nodes;
  // hyper: handoff[m] lifts block m+1's fused output to block m's resolution.
  std::vector<Tensor> handoff;
  std::vector<Integrator> integrators;
  ConvParams head;
};

struct FusionNodeRecord {
  enum class Kind { within_block, integration } kind;
  std::size_t block;
  std::size_t level;
  std::size_t in_channels;
};

/// f-hat per block (at the block's lowest tapped level) and f-tilde at input
/// resolution, plus the nodes visited while building them.
struct FusedStack {
  std::vector<Tensor> per_block;
  std::vector<Tensor> integrated;
  std::vector<FusionNodeRecord> graph;
};

namespace detail {

// Bilinear 2x upsampling filter placed on the channel diagonal.
inline Tensor bilinear_upsample_kernel(std::size_t channels) {
  static constexpr double f[4] = {0.25, 0.75, 0.75, 0.25};
  Tensor k({channels, channels, 4, 4}, 0.0, true);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) k[((c * channels + c) * 4 + y) * 4 + x] = f[y] * f[x];
  return k;
}

inline Integrator make_integrator(std::size_t in, std::size_t out, std::size_t steps, std::mt19937_64& rng) {
  Integrator h{make_conv(in, out, 1, rng), {}};
  for (std::size_t s = 0; s < steps; ++s) h.upsample.push_back(bilinear_upsample_kernel(out));
  return h;
}

inline void append_single_stream(NetworkParams& p, const EncoderConfig& enc, std::size_t first_block,
                                 std::size_t in, std::mt19937_64& rng) {
  for (std::size_t b = first_block; b < enc.block_count(); ++b)
    for (std::size_t j = 0; j < enc.blocks[b].conv_count; ++j) {
      p.single_conv.push_back(make_conv(in, enc.blocks[b].channels, enc.kernel, rng));
      p.single_norm.emplace_back(enc.blocks[b].channels);
      in = enc.blocks[b].channels;
    }
}

inline Tensor run_integrator(Tape& tape, const Tensor& x, const Integrator& h) {
  Tensor y = conv2d(tape, x, h.reduce.kernel, h.reduce.bias);
  for (const auto& k : h.upsample) y = upsample2x(tape, y, k);
  return y;
}

inline Tensor fuse_node(Tape& tape, std::span<const Tensor> inputs, const ConvParams& g) {
  return relu(tape, conv2d(tape, concat_channels(tape, inputs), g.kernel, g.bias));
}

}  // namespace detail

/// Allocates and initializes every parameter the configured variant uses.
inline NetworkParams init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& enc = cfg.encoder;
  const auto& fus = cfg.fusion;
  const std::size_t blocks = enc.block_count(), last = blocks - 1, head = fus.head_channels;
  const std::size_t k = enc.kernel;
  NetworkParams p;
  p.stitched = init_weights(enc, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  switch (fus.variant) {
    case FusionVariant::hyper: {
      const auto bounds = block_bounds(enc);
      p.fuse_nodes.resize(blocks);
      for (std::size_t m = 0; m < blocks; ++m) {
        const std::size_t c = enc.blocks[m].channels, fc = fus.fuse_width(enc, m);
        const std::size_t count = bounds[m].second - bounds[m].first + 1;
        for (std::size_t j = 0; j < count; ++j) {
          const bool top = (j + 1 == count);
          std::size_t carried = top ? (m < last ? fus.fuse_width(enc, m + 1) : 0) : fc;
          p.fuse_nodes[m].push_back(make_conv(2 * c + carried, fc, k, rng));
        }
      }
      for (std::size_t m = 0; m < last; ++m) p.handoff.push_back(detail::bilinear_upsample_kernel(fus.fuse_width(enc, m + 1)));
      for (std::size_t m = 0; m < blocks; ++m)
        p.integrators.push_back(detail::make_integrator(fus.fuse_width(enc, m), head, m, rng));
      p.head = make_conv(blocks * head, 2, k, rng);
      break;
    }
    case FusionVariant::late: {
      p.fuse_nodes.push_back({make_conv(2 * enc.blocks[last].channels, fus.fuse_width(enc, last), k, rng)});
      p.integrators.push_back(detail::make_integrator(fus.fuse_width(enc, last), head, last, rng));
      p.head = make_conv(head, 2, k, rng);
      break;
    }
    case FusionVariant::early: {
      const std::size_t first_layers = enc.blocks[0].conv_count;
      p.stitched.conv.resize(first_layers);
      p.stitched.norm_T.resize(first_layers);
      p.stitched.norm_R.resize(first_layers);
      p.fuse_nodes.push_back({make_conv(2 * enc.blocks[0].channels, fus.fuse_width(enc, 0), k, rng)});
      detail::append_single_stream(p, enc, 1, fus.fuse_width(enc, 0), rng);
      const std::size_t c = blocks > 1 ? enc.blocks[last].channels : fus.fuse_width(enc, 0);
      p.integrators.push_back(detail::make_integrator(c, head, last, rng));
      p.head = make_conv(head, 2, k, rng);
      break;
    }
    case FusionVariant::input: {
      p.stitched = {};
      detail::append_single_stream(p, enc, 0, 2 * enc.in_channels, rng);
      p.integrators.push_back(detail::make_integrator(enc.blocks[last].channels, head, last, rng));
      p.head = make_conv(head, 2, k, rng);
      break;
    }
    case FusionVariant::adhoc: {
      for (std::size_t stream = 0; stream < 2; ++stream)
        for (std::size_t m = 0; m < blocks; ++m)
          p.integrators.push_back(detail::make_integrator(enc.blocks[m].channels, head, m, rng));
      p.fuse_nodes.push_back({make_conv(2 * blocks * head, head, k, rng)});
      p.head = make_conv(head, 2, k, rng);
      break;
    }
  }
  return p;
}

/// Within-block top-down fusion of the two pyramids. Each block is walked
/// from its highest tapped level down; the coarser block's result enters the
/// next finer block's top node after a learned 2x upsampling.
inline FusedStack fuse_hyper(Tape& tape, const FeaturePyramid& pyr_T, const FeaturePyramid& pyr_R,
                             const NetworkParams& params) {
  if (pyr_T.levels.size() != pyr_R.levels.size())
    throw ShapeError("fuse_hyper: pyramids have " + std::to_string(pyr_T.levels.size()) + " and " +
                     std::to_string(pyr_R.levels.size()) + " levels");
  for (std::size_t i = 0; i < pyr_T.levels.size(); ++i) {
    const auto& a = pyr_T.levels[i];
    const auto& b = pyr_R.levels[i];
    if (a.block != b.block || a.features.dims() != b.features.dims())
      detail::shape_fail("fuse_hyper", a.features.dims(), b.features.dims(),
                         "level " + std::to_string(i) + " differs between branches");
  }
  const std::size_t blocks = pyr_T.block_count();
  if (params.fuse_nodes.size() != blocks || params.handoff.size() + 1 != blocks)
    throw ShapeError("fuse_hyper: parameters built for " + std::to_string(params.fuse_nodes.size()) +
                     " blocks, pyramid has " + std::to_string(blocks));

  FusedStack stack;
  stack.per_block.resize(blocks);
  Tensor carried;
  for (std::size_t m = blocks; m-- > 0;) {
    const auto [lo, hi] = pyr_T.block_bounds(m);
    if (params.fuse_nodes[m].size() != hi - lo + 1)
      throw ShapeError("fuse_hyper: block " + std::to_string(m) + " has " + std::to_string(hi - lo + 1) +
                       " tapped levels but " + std::to_string(params.fuse_nodes[m].size()) + " fusion nodes");
    for (std::size_t l = hi + 1; l-- > lo;) {
      std::vector<Tensor> inputs{pyr_T.levels[l].features};
      if (carried.defined()) inputs.push_back(carried);
      inputs.push_back(pyr_R.levels[l].features);
      std::size_t in_channels = 0;
      for (const auto& t : inputs) in_channels += t.dim(1);
      carried = detail::fuse_node(tape, inputs, params.fuse_nodes[m][l - lo]);
      stack.graph.push_back({FusionNodeRecord::Kind::within_block, m, l, in_channels});
    }
    stack.per_block[m] = carried;
    if (m > 0) carried = upsample2x(tape, carried, params.handoff[m - 1]);
  }
  return stack;
}

/// Brings every block's fused output to input resolution and concatenates
/// them channel-wise.
inline Tensor integrate(Tape& tape, FusedStack& stack, const NetworkParams& params) {
  if (params.integrators.size() != stack.per_block.size())
    throw ShapeError("integrate: " + std::to_string(params.integrators.size()) + " integrators for " +
                     std::to_string(stack.per_block.size()) + " blocks");
  stack.integrated.clear();
  for (std::size_t m = 0; m < stack.per_block.size(); ++m) {
    stack.integrated.push_back(detail::run_integrator(tape, stack.per_block[m], params.integrators[m]));
    stack.graph.push_back({FusionNodeRecord::Kind::integration, m, m, stack.per_block[m].dim(1)});
  }
  return concat_channels(tape, std::span<const Tensor>(stack.integrated));
}

/// 3x3 conv to two logits per pixel, then the foreground probability.
inline Tensor predict_saliency(Tape& tape, const Tensor& integrated, const ConvParams& head) {
  return pixel_softmax2(tape, conv2d(tape, integrated, head.kernel, head.bias));
}

/// Full forward pass of the configured variant on an NCHW reflective pair
/// batch. Returns the saliency map [N,1,H,W].
inline Tensor fuse_variant(Tape& tape, const ReflectivePair& batch, NetworkParams& params, const NetworkConfig& cfg,
                           bool training, FusedStack* trace = nullptr) {
  const auto& enc = cfg.encoder;
  const std::size_t blocks = enc.block_count();
  switch (cfg.fusion.variant) {
    case FusionVariant::hyper: {
      auto [pt, pr] = encode_pair(tape, batch, params.stitched, enc, training);
      FusedStack stack = fuse_hyper(tape, pt, pr, params);
      Tensor fused = integrate(tape, stack, params);
      Tensor out = predict_saliency(tape, fused, params.head);
      if (trace) *trace = std::move(stack);
      return out;
    }
    case FusionVariant::late: {
      auto [pt, pr] = encode_pair(tape, batch, params.stitched, enc, training);
      const Tensor inputs[] = {pt.levels.back().features, pr.levels.back().features};
      Tensor fused = detail::fuse_node(tape, inputs, params.fuse_nodes[0][0]);
      return predict_saliency(tape, detail::run_integrator(tape, fused, params.integrators[0]), params.head);
    }
    case FusionVariant::early: {
      auto pt = encode_blocks(tape, batch.transmitted, params.stitched.conv, params.stitched.norm_T, enc, 0, 1, training);
      auto pr = encode_blocks(tape, batch.reflected, params.stitched.conv, params.stitched.norm_R, enc, 0, 1, training);
      const Tensor inputs[] = {pt.levels.back().features, pr.levels.back().features};
      Tensor x = detail::fuse_node(tape, inputs, params.fuse_nodes[0][0]);
      if (blocks > 1) x = encode_blocks(tape, x, params.single_conv, params.single_norm, enc, 1, blocks, training)
                              .levels.back()
                              .features;
      return predict_saliency(tape, detail::run_integrator(tape, x, params.integrators[0]), params.head);
    }
    case FusionVariant::input: {
      const Tensor halves[] = {batch.transmitted, batch.reflected};
      Tensor x = concat_channels(tape, halves);
      auto pyr = encode_blocks(tape, x, params.single_conv, params.single_norm, enc, 0, blocks, training);
      return predict_saliency(tape, detail::run_integrator(tape, pyr.levels.back().features, params.integrators[0]),
                              params.head);
    }
    case FusionVariant::adhoc: {
      auto [pt, pr] = encode_pair(tape, batch, params.stitched, enc, training);
      std::vector<Tensor> dense;
      std::size_t i = 0;
      for (const FeaturePyramid* pyr : {&pt, &pr})
        for (std::size_t m = 0; m < blocks; ++m, ++i) {
          const std::size_t top = pyr->block_bounds(m).second;
          dense.push_back(detail::run_integrator(tape, pyr->levels[top].features, params.integrators[i]));
        }
      Tensor fused = detail::fuse_node(tape, dense, params.fuse_nodes[0][0]);
      return predict_saliency(tape, fused, params.head);
    }
  }
  throw ParameterError("fuse_variant: unknown variant");
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Every tensor that makes up the network state, in a stable order. With
/// `include_buffers` the normalization running statistics are listed too.
inline std::vector<NamedTensor> named_tensors(const NetworkParams& p, bool include_buffers) {
  std::vector<NamedTensor> out;
  auto conv = [&](const std::string& prefix, const ConvParams& c) {
    out.push_back({prefix + ".kernel", c.kernel});
    out.push_back({prefix + ".bias", c.bias});
  };
  auto norm = [&](const std::string& prefix, const NormState& n) {
    out.push_back({prefix + ".gamma", n.gamma});
    out.push_back({prefix + ".beta", n.beta});
    if (include_buffers) {
      out.push_back({prefix + ".running_mean", n.running_mean});
      out.push_back({prefix + ".running_var", n.running_var});
    }
  };
  for (std::size_t i = 0; i < p.stitched.conv.size(); ++i) conv("encoder.conv" + std::to_string(i), p.stitched.conv[i]);
  for (std::size_t i = 0; i < p.stitched.norm_T.size(); ++i) norm("encoder.norm_T" + std::to_string(i), p.stitched.norm_T[i]);
  for (std::size_t i = 0; i < p.stitched.norm_R.size(); ++i) norm("encoder.norm_R" + std::to_string(i), p.stitched.norm_R[i]);
  for (std::size_t i = 0; i < p.single_conv.size(); ++i) conv("single.conv" + std::to_string(i), p.single_conv[i]);
  for (std::size_t i = 0; i < p.single_norm.size(); ++i) norm("single.norm" + std::to_string(i), p.single_norm[i]);
  for (std::size_t m = 0; m < p.fuse_nodes.size(); ++m)
    for (std::size_t j = 0; j < p.fuse_nodes[m].size(); ++j)
      conv("fusion.node" + std::to_string(m) + "_" + std::to_string(j), p.fuse_nodes[m][j]);
  for (std::size_t m = 0; m < p.handoff.size(); ++m) out.push_back({"fusion.handoff" + std::to_string(m), p.handoff[m]});
  for (std::size_t i = 0; i < p.integrators.size(); ++i) {
    const std::string prefix = "fusion.integrate" + std::to_string(i);
    conv(prefix + ".reduce", p.integrators[i].reduce);
    for (std::size_t j = 0; j < p.integrators[i].upsample.size(); ++j)
      out.push_back({prefix + ".up" + std::to_string(j), p.integrators[i].upsample[j]});
  }
  conv("head", p.head);
  return out;
}

inline std::size_t parameter_count(const NetworkParams& p) {
  std::size_t n = 0;
  for (const auto& t : named_tensors(p, false)) n += t.tensor.numel();
  return n;
}

}  // namespace hyperfusion
