#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperfusion/ops.hpp"
#include "hyperfusion/reflect.hpp"

namespace hyperfusion {

struct BlockSpec {
  std::size_t conv_count = 2;
  std::size_t channels = 8;
};

// Which activations of a block are exposed to fusion.
enum class TapMode {
  block_output,  // last conv+norm+relu of each block, before pooling
  every_conv,    // every conv+norm+relu in the block
};

struct EncoderConfig {
  std::vector<BlockSpec> blocks{{2, 8}, {2, 16}, {2, 32}};
  std::size_t kernel = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t in_channels = 3;
  TapMode taps = TapMode::block_output;

  std::size_t block_count() const { return blocks.size(); }

  std::size_t conv_layer_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.conv_count;
    return n;
  }

  // First flattened conv-layer index of block b.
  std::size_t first_layer(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < b; ++i) n += blocks[i].conv_count;
    return n;
  }

  std::size_t block_height(std::size_t b) const { return height >> b; }
  std::size_t block_width(std::size_t b) const { return width >> b; }

  void validate() const {
    if (blocks.empty()) throw ParameterError("EncoderConfig: at least one block required");
    if (kernel % 2 == 0) throw ParameterError("EncoderConfig: kernel size must be odd");
    if (in_channels == 0) throw ParameterError("EncoderConfig: in_channels must be positive");
    for (const auto& b : blocks)
      if (b.conv_count < 1 || b.channels < 1)
        throw ParameterError("EncoderConfig: every block needs conv_count >= 1 and channels >= 1");
    const std::size_t div = std::size_t{1} << (blocks.size() - 1);
    if (height == 0 || width == 0 || height % div || width % div)
      throw ParameterError("EncoderConfig: input " + std::to_string(height) + "x" + std::to_string(width) +
                           " not divisible by " + std::to_string(div));
  }
};

struct ConvParams {
  Tensor kernel;  // [O,C,K,K]
  Tensor bias;    // [O]
};

/// Zero-mean Gaussian with variance 2 / fan_in ("msra" initialization).
inline Tensor msra_tensor(const Shape& dims, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(dims, 0.0, true);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline ConvParams make_conv(std::size_t in, std::size_t out, std::size_t k, std::mt19937_64& rng) {
  return {msra_tensor({out, in, k, k}, in * k * k, rng), Tensor({out}, 0.0, true)};
}

/// Convolution weights shared by both branches, plus one normalization set
/// per branch. Each kernel has exactly one storage location.
struct StitchedWeights {
  std::vector<ConvParams> conv;
  std::vector<NormState> norm_T;
  std::vector<NormState> norm_R;
};

inline StitchedWeights init_weights(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  StitchedWeights w;
  std::size_t in = config.in_channels;
  for (const auto& block : config.blocks) {
    for (std::size_t j = 0; j < block.conv_count; ++j) {
      w.conv.push_back(make_conv(in, block.channels, config.kernel, rng));
      w.norm_T.emplace_back(block.channels);
      w.norm_R.emplace_back(block.channels);
      in = block.channels;
    }
  }
  return w;
}

struct FeatureLevel {
  std::size_t block = 0;
  Tensor features;  // [N,C,H,W]
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
};

/// Tapped activations of one branch, finest level first.
struct FeaturePyramid {
  std::vector<FeatureLevel> levels;

  /// [first, last] level indices belonging to block b.
  std::pair<std::size_t, std::size_t> block_bounds(std::size_t b) const {
    std::size_t first = levels.size(), last = 0;
    for (std::size_t i = 0; i < levels.size(); ++i)
      if (levels[i].block == b) {
        first = std::min(first, i);
        last = i;
      }
    if (first == levels.size()) throw ContractError("FeaturePyramid: no level tapped in block " + std::to_string(b));
    return {first, last};
  }

  std::size_t block_count() const { return levels.empty() ? 0 : levels.back().block + 1; }
};

/// Runs blocks [begin, end) of one branch. For begin > 0 the input is the
/// previous block's activation and is pooled first. `layers` and `norms`
/// cover exactly the conv layers of those blocks.
inline FeaturePyramid encode_blocks(Tape& tape, Tensor x, std::span<const ConvParams> layers,
                                    std::span<NormState> norms, const EncoderConfig& config, std::size_t begin,
                                    std::size_t end, bool training) {
  FeaturePyramid pyr;
  std::size_t li = 0;
  for (std::size_t b = begin; b < end; ++b) {
    if (b > 0) x = maxpool2d(tape, x);
    const auto& spec = config.blocks[b];
    for (std::size_t j = 0; j < spec.conv_count; ++j, ++li) {
      if (li >= layers.size() || li >= norms.size())
        throw ContractError("encode_blocks: weights cover fewer layers than blocks [" + std::to_string(begin) +
                            "," + std::to_string(end) + ")");
      x = conv2d(tape, x, layers[li].kernel, layers[li].bias);
      x = batchnorm(tape, x, norms[li], training);
      x = relu(tape, x);
      if (config.taps == TapMode::every_conv || j + 1 == spec.conv_count)
        pyr.levels.push_back({b, x, x.dim(2), x.dim(3), x.dim(1)});
    }
  }
  return pyr;
}

inline FeaturePyramid encode_branch(Tape& tape, const Tensor& x, std::span<const ConvParams> conv,
                                    std::span<NormState> norms, const EncoderConfig& config, bool training) {
  if (x.rank() != 4 || x.dim(1) != config.in_channels || x.dim(2) != config.height || x.dim(3) != config.width)
    detail::shape_fail("encode_branch", x.dims(), Shape{0, config.in_channels, config.height, config.width},
                       "input must match the configured resolution");
  return encode_blocks(tape, x, conv, norms, config, 0, config.block_count(), training);
}

/// Both weight-stitching branches: `pair` holds NCHW batches. Branch T reads
/// (conv, norm_T), branch R reads (conv, norm_R).
inline std::pair<FeaturePyramid, FeaturePyramid> encode_pair(Tape& tape, const ReflectivePair& pair,
                                                             StitchedWeights& weights, const EncoderConfig& config,
                                                             bool training) {
  if (pair.transmitted.dims() != pair.reflected.dims())
    detail::shape_fail("encode_pair", pair.transmitted.dims(), pair.reflected.dims(), "pair halves differ");
  return {encode_branch(tape, pair.transmitted, weights.conv, weights.norm_T, config, training),
          encode_branch(tape, pair.reflected, weights.conv, weights.norm_R, config, training)};
}

}  // namespace hyperfusion
