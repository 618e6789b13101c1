#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "hyperfusion/tape.hpp"

namespace hyperfusion {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-3;
  // 0 checks every coordinate; otherwise a seeded sample per leaf.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0x5eed;
  // When the relu/maxpool selection pattern differs between the two probes,
  // retry with the step divided by 10, at most this many times.
  std::size_t kink_refinements = 0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t refined = 0;  // coordinates whose stencil straddled a kink
  std::string worst;  // "<leaf>[index] analytic=.. numeric=.."

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

inline double gradcheck_relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Branch decisions of every relu and maxpool node on the tape.
inline std::vector<std::uint8_t> activation_pattern(const Tape& tape) {
  std::vector<std::uint8_t> bits;
  for (const auto& node : tape.nodes()) {
    if (node.op == "relu") {
      for (double v : node.inputs[0].values()) bits.push_back(v > 0.0);
    } else if (node.op == "maxpool2d") {
      const Tensor& x = node.inputs[0];
      const std::size_t h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
      for (std::size_t o = 0; o < node.output.numel(); ++o) {
        const std::size_t plane = o / (oh * ow), oy = (o / ow) % oh, ox = o % ow;
        std::uint8_t pick = 0;
        for (std::uint8_t d = 0; d < 4; ++d)
          if (x[plane * h * w + (2 * oy + d / 2) * w + 2 * ox + d % 2] == node.output[o]) {
            pick = d;
            break;
          }
        bits.push_back(pick);
      }
    }
  }
  return bits;
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for each named leaf.
inline GradcheckReport gradcheck(const std::function<Tensor(Tape&)>& loss_fn,
                                 std::vector<std::pair<std::string, Tensor>> leaves,
                                 const GradcheckOptions& opts = {}) {
  for (auto& [name, t] : leaves) {
    if (!t.requires_grad()) throw ContractError("gradcheck: leaf '" + name + "' does not require grad");
    t.drop_grad();
  }
  {
    Tape tape;
    Tensor loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : leaves)
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.numel(), 0.0));

  auto eval = [&](std::vector<std::uint8_t>* pattern) {
    Tape tape;
    const double v = loss_fn(tape).item();
    if (pattern) *pattern = activation_pattern(tape);
    return v;
  };

  GradcheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& [name, t] = leaves[li];
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_leaf && coords.size() > opts.max_coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double saved = t[idx];
      double step = opts.step, numeric = 0.0;
      for (std::size_t attempt = 0;; ++attempt) {
        std::vector<std::uint8_t> pu, pd;
        const bool watch = attempt < opts.kink_refinements;
        t[idx] = saved + step;
        const double up = eval(watch ? &pu : nullptr);
        t[idx] = saved - step;
        const double down = eval(watch ? &pd : nullptr);
        t[idx] = saved;
        numeric = (up - down) / (2.0 * step);
        if (!watch || pu == pd) break;
        if (attempt == 0) ++report.refined;
        step /= 10.0;
      }
      const double a = analytic[li][idx];
      const double err = gradcheck_relative_error(a, numeric, opts.denominator_floor);
      ++report.coordinates;
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = name + "[" + std::to_string(idx) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  for (auto& [name, t] : leaves) t.drop_grad();
  return report;
}

}  // namespace hyperfusion
