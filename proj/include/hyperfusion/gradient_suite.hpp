#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hyperfusion/fusion.hpp"
#include "hyperfusion/gradcheck.hpp"
#include "hyperfusion/objective.hpp"
#include "hyperfusion/reflect.hpp"

namespace hyperfusion {

struct GradientCase {
  std::string name;
  GradcheckReport report;
  double seconds = 0.0;
};

struct GradientSuiteOptions {
  bool full = false;  // every coordinate of the network check instead of a sample
  std::size_t sampled_coords = 24;
  GradcheckOptions check{.kink_refinements = 2};
  std::uint64_t seed = 7;
};

namespace detail {

inline Tensor uniform_tensor(const Shape& dims, std::mt19937_64& rng, double lo, double hi, bool grad) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(dims, 0.0, grad);
  for (double& v : t.values()) v = d(rng);
  return t;
}

// Fixed random linear functional, so every output coordinate is exercised.
inline Tensor random_probe(Tape& tape, const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> w(out.numel());
  for (double& v : w) v = d(rng);
  return weighted_sum(tape, out, std::move(w));
}

}  // namespace detail

/// The toy network used by the whole-network check: 16x16 input, two blocks.
inline NetworkConfig gradient_toy_network() {
  NetworkConfig cfg;
  cfg.encoder.blocks = {{2, 4}, {2, 8}};
  cfg.encoder.height = cfg.encoder.width = 16;
  cfg.fusion.head_channels = 4;
  return cfg;
}

/// Finite-difference checks of every primitive op, every loss, and the whole
/// toy network under the full objective.
inline std::vector<GradientCase> run_gradient_suite(const GradientSuiteOptions& opts = {}) {
  using detail::random_probe;
  using detail::uniform_tensor;
  std::mt19937_64 rng(opts.seed);
  std::vector<GradientCase> out;
  auto run = [&](std::string name, const std::function<Tensor(Tape&)>& f,
                 std::vector<std::pair<std::string, Tensor>> leaves, GradcheckOptions o) {
    const auto t0 = std::chrono::steady_clock::now();
    GradientCase c{std::move(name), gradcheck(f, std::move(leaves), o), 0.0};
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(c));
  };
  const GradcheckOptions o = opts.check;

  {
    Tensor x = uniform_tensor({2, 3, 5, 6}, rng, -1, 1, true);
    Tensor k = uniform_tensor({4, 3, 3, 3}, rng, -1, 1, true);
    Tensor b = uniform_tensor({4}, rng, -1, 1, true);
    run("conv2d", [=](Tape& t) { return random_probe(t, conv2d(t, x, k, b), 1); }, {{"x", x}, {"k", k}, {"b", b}}, o);
  }
  {
    Tensor x = uniform_tensor({2, 3, 3, 4}, rng, -1, 1, true);
    Tensor k = uniform_tensor({3, 2, 4, 4}, rng, -1, 1, true);
    run("upsample2x", [=](Tape& t) { return random_probe(t, upsample2x(t, x, k), 2); }, {{"x", x}, {"k", k}}, o);
  }
  {
    Tensor x = uniform_tensor({2, 2, 4, 6}, rng, -1, 1, true);
    run("maxpool2d", [=](Tape& t) { return random_probe(t, maxpool2d(t, x), 3); }, {{"x", x}}, o);
  }
  {
    Tensor a = uniform_tensor({2, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = uniform_tensor({2, 3, 3, 3}, rng, -1, 1, true);
    run("concat_channels/slice_channels",
        [=](Tape& t) {
          const Tensor c = concat_channels(t, {a, b});
          return add(t, random_probe(t, c, 4), random_probe(t, slice_channels(t, c, 1, 3), 5));
        },
        {{"a", a}, {"b", b}}, o);
  }
  {
    Tensor x = uniform_tensor({2, 1, 3, 3}, rng, -1, 1, true);
    run("repeat_channels", [=](Tape& t) { return random_probe(t, repeat_channels(t, x, 3), 6); }, {{"x", x}}, o);
  }
  {
    Tensor x = uniform_tensor({2, 2, 3, 3}, rng, -1, 1, true);
    run("relu", [=](Tape& t) { return random_probe(t, relu(t, x), 7); }, {{"x", x}}, o);
  }
  {
    Tensor a = uniform_tensor({2, 3, 4}, rng, -1, 1, true);
    Tensor b = uniform_tensor({2, 3, 4}, rng, -1, 1, true);
    run("add/sub/mul/scale/sum",
        [=](Tape& t) {
          const Tensor m = mul(t, add(t, a, b), sub(t, a, scale(t, b, 0.7)));
          return add(t, random_probe(t, m, 8), scale(t, sum(t, m), 0.3));
        },
        {{"a", a}, {"b", b}}, o);
  }
  {
    Tensor a = uniform_tensor({2, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = uniform_tensor({2, 2, 3, 3}, rng, -1, 1, true);
    run("sample_l2_distance", [=](Tape& t) { return sample_l2_distance(t, a, b); }, {{"a", a}, {"b", b}}, o);
  }
  {
    Tensor s = uniform_tensor({2, 2, 3, 4}, rng, -3, 3, true);
    run("pixel_softmax2", [=](Tape& t) { return random_probe(t, pixel_softmax2(t, s), 9); }, {{"s", s}}, o);
  }
  {
    Tensor x = uniform_tensor({3, 2, 3, 3}, rng, -1, 1, true);
    NormState st(2);
    st.gamma = uniform_tensor({2}, rng, 0.5, 1.5, true);
    st.beta = uniform_tensor({2}, rng, -0.5, 0.5, true);
    run("batchnorm(train)", [=](Tape& t) mutable { return random_probe(t, batchnorm(t, x, st, true), 10); },
        {{"x", x}, {"gamma", st.gamma}, {"beta", st.beta}}, o);
    run("batchnorm(eval)", [=](Tape& t) mutable { return random_probe(t, batchnorm(t, x, st, false), 11); },
        {{"x", x}, {"gamma", st.gamma}, {"beta", st.beta}}, o);
  }
  {
    Tensor p = uniform_tensor({2, 1, 4, 4}, rng, 0.05, 0.95, true);
    Tensor gt({2, 1, 4, 4});
    for (std::size_t i = 0; i < gt.numel(); ++i) gt[i] = static_cast<double>((i * 7 + 3) % 5 < 2);
    run("bce_loss", [=](Tape& t) { return bce_loss(t, p, gt); }, {{"pred", p}}, o);
    run("wbce_loss", [=](Tape& t) { return wbce_loss(t, p, gt); }, {{"pred", p}}, o);
    const SPExtractor ex;
    LossConfig cfg;
    cfg.lambda = {1.0, 0.5, 0.25, 0.125};
    run("sp_loss", [=](Tape& t) { return sp_loss(t, p, gt, ex, cfg); }, {{"pred", p}}, o);
  }

  {
    // Whole network, full objective, normalized per pixel as in training.
    const NetworkConfig cfg = gradient_toy_network();
    NetworkParams params = init_network(cfg, opts.seed);
    const std::size_t n = 2, h = cfg.encoder.height, w = cfg.encoder.width;
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < n; ++i) images.push_back(uniform_tensor({h, w, 3}, rng, 0, 1, false));
    const Tensor mean = dataset_mean(images);
    std::vector<ReflectivePair> pairs;
    for (const auto& img : images) pairs.push_back(separate(img, {1.0, mean}));
    const ReflectivePair batch = to_nchw(std::span<const ReflectivePair>(pairs));
    Tensor gt({n, 1, h, w});
    for (std::size_t i = 0; i < gt.numel(); ++i) {
      const std::size_t x = i % w, y = (i / w) % h;
      gt[i] = (x > 3 && x < 12 && y > 4 && y < 13) ? 1.0 : 0.0;
    }
    const SPExtractor extractor;
    const LossConfig loss_cfg;
    const double norm = 1.0 / static_cast<double>(gt.numel());
    std::vector<std::pair<std::string, Tensor>> leaves;
    for (const auto& nt : named_tensors(params, false)) leaves.emplace_back(nt.name, nt.tensor);
    GradcheckOptions no = o;
    no.max_coords_per_leaf = opts.full ? 0 : opts.sampled_coords;
    run(opts.full ? "network (all coordinates)" : "network (sampled coordinates)",
        [=](Tape& t) mutable {
          const Tensor pred = fuse_variant(t, batch, params, cfg, true);
          return scale(t, total_loss(t, pred, gt, extractor, loss_cfg).total, norm);
        },
        leaves, no);
  }
  return out;
}

}  // namespace hyperfusion
