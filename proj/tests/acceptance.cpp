// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "hyperfusion/allocator.hpp"
#include "hyperfusion/checkpoint.hpp"
#include "hyperfusion/dataset.hpp"
#include "hyperfusion/gradient_suite.hpp"
#include "hyperfusion/netpbm.hpp"
#include "hyperfusion/training.hpp"
#include "metric_oracles.hpp"

using namespace hyperfusion;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) {
    if (pass) detail += (detail.empty() ? "" : "; ") + s;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::uint64_t bits(double v) { return std::bit_cast<std::uint64_t>(v); }

fs::path scratch_root() {
  const fs::path p = fs::temp_directory_path() / ("hyperfusion_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor random_tensor(const Shape& dims, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(dims);
  for (double& v : t.values()) v = u(rng);
  return t;
}

TrainConfig toy_config() { return load_config(std::string(HYPERFUSION_SOURCE_DIR) + "/configs/toy.json"); }

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
  Outcome o;
  GradientSuiteOptions opts;
  opts.full = true;
  const double t0 = cpu_seconds();
  const auto cases = run_gradient_suite(opts);
  const double seconds = cpu_seconds() - t0;
  double worst = 0.0;
  std::size_t coords = 0;
  for (const auto& c : cases) {
    o.require(c.report.max_rel_error < 1e-5, c.name + " max rel err " + fmt("%.3e", c.report.max_rel_error));
    worst = std::max(worst, c.report.max_rel_error);
    coords += c.report.coordinates;
  }
  o.require(seconds < 120.0, "runtime " + fmt("%.1f s", seconds));
  o.note(std::to_string(cases.size()) + " cases, " + std::to_string(coords) + " coordinates, max rel err " +
         fmt("%.2e", worst) + ", " + fmt("%.1f s", seconds));
  return o;
}

// ------------------------------------------------------------------ 2

Outcome weight_stitching(const DatasetManifest& data) {
  Outcome o;
  TrainConfig cfg = toy_config();
  Trainer trainer(cfg, data);
  for (int i = 0; i < 100; ++i) trainer.step();
  Model& m = trainer.model();
  auto& w = m.params.stitched;

  // Conv kernels read by the transmitted and reflected branches in one forward pass.
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < 2; ++i) images.push_back(load_sample(data.entries[i]).image);
  std::vector<ReflectivePair> pairs;
  for (const auto& img : images) pairs.push_back(network_input(img, m.mean, cfg));
  const ReflectivePair batch = to_nchw(std::span<const ReflectivePair>(pairs));
  o.require(batch.transmitted.numel() == batch.reflected.numel(), "batch shapes");
  bool distinct = false;
  for (std::size_t i = 0; i < batch.transmitted.numel(); ++i) distinct |= batch.transmitted[i] != batch.reflected[i];
  o.require(distinct, "T and R inputs differ");

  Tape tape;
  auto [pt, pr] = encode_pair(tape, batch, w, cfg.network.encoder, false);
  std::vector<std::vector<Tensor>> seen(w.conv.size());
  for (const auto& node : tape.nodes()) {
    if (node.op != "conv2d") continue;
    for (std::size_t l = 0; l < w.conv.size(); ++l)
      if (node.inputs.size() > 1 && node.inputs[1].same_storage(w.conv[l].kernel)) seen[l].push_back(node.inputs[1]);
  }
  std::size_t compared = 0;
  for (std::size_t l = 0; l < w.conv.size(); ++l) {
    o.require(seen[l].size() == 2, "conv" + std::to_string(l) + " read by both branches");
    if (seen[l].size() != 2) continue;
    for (std::size_t i = 0; i < seen[l][0].numel(); ++i, ++compared)
      if (bits(seen[l][0][i]) != bits(seen[l][1][i])) {
        o.require(false, "conv" + std::to_string(l) + " differs between branches");
        break;
      }
  }
  double max_gap = 0.0;
  for (std::size_t l = 0; l < w.norm_T.size(); ++l)
    for (std::size_t c = 0; c < w.norm_T[l].running_mean.numel(); ++c)
      max_gap = std::max(max_gap, std::abs(w.norm_T[l].running_mean[c] - w.norm_R[l].running_mean[c]));
  o.require(max_gap > 1e-6, "running means differ, max gap " + fmt("%.3e", max_gap));
  o.note(std::to_string(w.conv.size()) + " conv layers, " + std::to_string(compared) +
         " kernel values identical across branches; max |mean_T - mean_R| " + fmt("%.3e", max_gap));
  return o;
}

// ------------------------------------------------------------------ 3

Outcome reflection_identities() {
  Outcome o;
  std::mt19937_64 rng(3);
  std::size_t checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor img = random_tensor({9, 11, 3}, rng, 0.0, 1.0);
    Tensor mean = random_tensor({3}, rng, 0.0, 1.0);
    for (double& v : img.values()) v = to_grid(v);
    for (double& v : mean.values()) v = to_grid(v);
    const auto pair = separate(img, {1.0, mean});
    for (std::size_t i = 0; i < img.numel(); ++i, ++checked) {
      if (pair.transmitted[i] + pair.reflected[i] != 0.0) {
        o.require(false, "T + R == 0");
        return o;
      }
      if (pair.transmitted[i] + mean[i % 3] != img[i]) {
        o.require(false, "T + mean == X");
        return o;
      }
    }
    Tensor flat({9, 11, 3});
    for (std::size_t i = 0; i < flat.numel(); ++i) flat[i] = mean[i % 3];
    const auto zero = separate(flat, {1.0, mean});
    for (std::size_t i = 0; i < flat.numel(); ++i)
      if (zero.transmitted[i] != 0.0 || zero.reflected[i] != 0.0) {
        o.require(false, "separate(mean) == (0, 0)");
        return o;
      }
    const auto full = separate(img, {1.0, img.clone()});
    for (std::size_t i = 0; i < img.numel(); ++i)
      if (full.transmitted[i] != 0.0 || full.reflected[i] != 0.0) {
        o.require(false, "separate with full mean image == (0, 0)");
        return o;
      }
  }
  o.note(std::to_string(checked) + " pixels exact for T + R == 0 and T + mean == X; mean maps to (0, 0)");
  return o;
}

// ------------------------------------------------------------------ 4

Outcome fusion_topology() {
  Outcome o;
  std::mt19937_64 rng(4);
  for (FusionVariant v : kAllVariants) {
    NetworkConfig cfg = toy_config().network;
    cfg.fusion.variant = v;
    NetworkParams params = init_network(cfg, 11);
    const Shape s{2, 3, cfg.encoder.height, cfg.encoder.width};
    const ReflectivePair batch{random_tensor(s, rng, -1, 1), random_tensor(s, rng, -1, 1)};
    Tape tape;
    FusedStack stack;
    const Tensor pred = fuse_variant(tape, batch, params, cfg, true, &stack);
    const std::string name(to_string(v));
    o.require(pred.dims() == Shape({2, 1, cfg.encoder.height, cfg.encoder.width}), name + " prediction shape");
    if (v == FusionVariant::hyper) {
      o.require(stack.integrated.size() == cfg.encoder.block_count(), "one integrated map per block");
      for (const auto& t : stack.integrated)
        o.require(t.dims() == Shape({2, cfg.fusion.head_channels, cfg.encoder.height, cfg.encoder.width}),
                  "integrated map at input resolution");
      std::size_t within = 0, integration = 0;
      for (const auto& n : stack.graph) (n.kind == FusionNodeRecord::Kind::within_block ? within : integration)++;
      // Block-output taps: one node per block; every-conv taps: one per conv plus one.
      std::size_t closed = 0;
      for (const auto& b : cfg.encoder.blocks) closed += cfg.encoder.taps == TapMode::every_conv ? b.conv_count + 1 : 1;
      o.require(within == closed, "fusion node count " + std::to_string(within) + " vs " + std::to_string(closed));
      o.require(integration == cfg.encoder.block_count(), "integration node count");
      o.note("hyper: " + std::to_string(within) + " fusion nodes, " + std::to_string(stack.integrated.size()) +
             " maps at 64x64");
    }
    std::mt19937_64 prng(5);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> wts(pred.numel());
    for (double& x : wts) x = u(prng);
    tape.backward(weighted_sum(tape, pred, std::move(wts)));
    std::size_t missing = 0;
    for (const auto& nt : named_tensors(params, false)) {
      missing += !nt.tensor.has_grad();
      if (nt.tensor.has_grad())
        for (double g : nt.tensor.grad()) o.require(std::isfinite(g), name + " finite gradient in " + nt.name);
    }
    o.require(missing == 0, name + ": " + std::to_string(missing) + " parameters without gradient");
  }
  o.note("all 5 variants ran forward and backward");
  return o;
}

// ------------------------------------------------------------------ 5

Outcome metric_oracles() {
  Outcome o;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_f = 0.0, worst_mae = 0.0, worst_pr = 0.0, worst_s = 0.0, min_self = 1.0;
  for (int trial = 0; trial < 50; ++trial) {
    SaliencyMap m{16, 16, std::vector<double>(256)};
    for (double& v : m.values) v = u(rng);
    GroundTruthMask g{16, 16, std::vector<std::uint8_t>(256)};
    std::bernoulli_distribution fg(0.1 + 0.01 * trial);
    do {
      for (auto& v : g.values) v = fg(rng);
    } while (g.foreground() == 0 || g.foreground() == 256);

    double sum = 0.0, abs_err = 0.0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        sum += m.at(y, x);
        abs_err += std::abs(m.at(y, x) - (g.at(y, x) ? 1.0 : 0.0));
      }
    const double thr = std::min(2.0 * sum / 256.0, 1.0);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const bool p = m.at(y, x) >= thr, t = g.at(y, x);
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
      }
    const double prec = tp + fp == 0 ? 1.0 : tp / (tp + fp), rec = tp / (tp + fn);
    const double f = prec + rec == 0 ? 0.0 : 1.3 * prec * rec / (0.3 * prec + rec);
    worst_f = std::max(worst_f, std::abs(adaptive_f_measure(m, g).f - f));
    worst_mae = std::max(worst_mae, std::abs(mae(m, g) - abs_err / 256.0));

    const auto curve = pr_curve(m, g);
    for (int t = 0; t < 256; ++t) {
      double ctp = 0, cfp = 0, cfn = 0;
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          const bool p = std::lround(m.at(y, x) * 255.0) > t, gt = g.at(y, x);
          ctp += p && gt;
          cfp += p && !gt;
          cfn += !p && gt;
        }
      const double cp = ctp + cfp == 0 ? 1.0 : ctp / (ctp + cfp), cr = ctp / (ctp + cfn);
      worst_pr = std::max({worst_pr, std::abs(curve[t].precision - cp), std::abs(curve[t].recall - cr)});
    }
    worst_s = std::max(worst_s, std::abs(s_measure(m, g) - hftest::oracle::s_measure(m, g, 0.5)));
    SaliencyMap gm{16, 16, {}};
    for (auto v : g.values) gm.values.push_back(v);
    min_self = std::min(min_self, s_measure(gm, g));
  }
  o.require(worst_f <= 1e-12, "F_eta oracle gap " + fmt("%.3e", worst_f));
  o.require(worst_mae <= 1e-12, "MAE oracle gap " + fmt("%.3e", worst_mae));
  o.require(worst_pr <= 1e-12, "PR oracle gap " + fmt("%.3e", worst_pr));
  o.require(worst_s <= 1e-9, "S oracle gap " + fmt("%.3e", worst_s));
  o.require(min_self >= 1.0 - 1e-9, "s_measure(gt, gt) " + fmt("%.17g", min_self));
  o.note("50 pairs; gaps F " + fmt("%.1e", worst_f) + ", MAE " + fmt("%.1e", worst_mae) + ", PR " +
         fmt("%.1e", worst_pr) + ", S " + fmt("%.1e", worst_s) + "; min s(gt,gt) " + fmt("%.12f", min_self));
  return o;
}

// ------------------------------------------------------------------ 6

Outcome loss_identities() {
  Outcome o;
  std::mt19937_64 rng(6);
  auto value = [](const std::function<Tensor(Tape&)>& f) {
    Tape t;
    return f(t).item();
  };
  const SPExtractor ex;
  double worst_half = 0.0, worst_sp = 0.0, worst_sum = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor gt({2, 1, 8, 8});
    std::bernoulli_distribution fg(0.3);
    for (double& v : gt.values()) v = fg(rng);
    Tensor pred = random_tensor(gt.dims(), rng, 0.02, 0.98);
    const double w = value([&](Tape& t) { return wbce_loss(t, pred, gt, 0.5); });
    const double b = value([&](Tape& t) { return bce_loss(t, pred, gt); });
    worst_half = std::max(worst_half, std::abs(w - 0.5 * b));
    worst_sp = std::max(worst_sp, std::abs(value([&](Tape& t) { return sp_loss(t, pred, pred.clone(), ex, LossConfig{}); })));
    for (LossKind kind : {LossKind::bce, LossKind::wbce, LossKind::bce_sp, LossKind::wbce_sp}) {
      LossConfig cfg;
      cfg.kind = kind;
      Tape tape;
      const auto terms = total_loss(tape, pred, gt, ex, cfg);
      // Each term recomputed from scratch on its own tape.
      const double ce = value([&](Tape& t) { return cfg.balanced() ? wbce_loss(t, pred, gt) : bce_loss(t, pred, gt); });
      const double sp = cfg.structural() ? value([&](Tape& t) { return sp_loss(t, pred, gt, ex, cfg); }) : 0.0;
      worst_sum = std::max(worst_sum, std::abs(terms.total.item() - (ce + cfg.mu * sp)));
    }
  }
  const Tensor gt4 = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 0});
  const Tensor p4 = Tensor::from({1, 1, 2, 2}, {0.8, 0.3, 0.2, 0.1});
  const double worked = value([&](Tape& t) { return wbce_loss(t, p4, gt4); });
  const double direct = -(0.75 * std::log(0.8) + 0.25 * (std::log(0.7) + std::log(0.8) + std::log(0.9)));
  o.require(worst_half <= 1e-12, "wbce(0.5) vs bce/2 gap " + fmt("%.3e", worst_half));
  o.require(worst_sp == 0.0, "sp_loss(x, x) " + fmt("%.3e", worst_sp));
  o.require(worst_sum <= 1e-12, "total recomposition gap " + fmt("%.3e", worst_sum));
  o.require(std::abs(worked - 0.3386) <= 1e-4, "worked example " + fmt("%.6f", worked));
  o.require(std::abs(worked - direct) <= 1e-12, "worked example vs direct sum");
  o.note("wbce(0.5)-bce/2 " + fmt("%.1e", worst_half) + ", sp(x,x) " + fmt("%g", worst_sp) + ", recomposition " +
         fmt("%.1e", worst_sum) + ", 4-pixel wbce " + fmt("%.6f", worked));
  return o;
}

// ------------------------------------------------------------------ 7

struct OverfitRun {
  TrainResult result;
  std::string checkpoint;
  EvalReport report;
  double cpu = 0.0;
  double wall = 0.0;
};

OverfitRun overfit_once(const DatasetManifest& data, const fs::path& dir) {
  OverfitRun r;
  TrainConfig cfg = toy_config();
  cfg.log_every = 1;  // keep every step of the loss curve
  const double c0 = cpu_seconds();
  const auto w0 = std::chrono::steady_clock::now();
  r.result = train(cfg, data, {}, (dir / "model.ckpt").string());
  infer(r.result.model, image_paths(data), (dir / "maps").string());
  r.report = evaluate_dataset(data, (dir / "maps").string(), cfg.eta2);
  r.cpu = cpu_seconds() - c0;
  r.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
  r.checkpoint = detail::read_file((dir / "model.ckpt").string());
  return r;
}

Outcome overfit(const DatasetManifest& data, const fs::path& root) {
  Outcome o;
  const TrainConfig cfg = toy_config();
  o.require(cfg.max_steps <= 2000, "step budget");
  o.require(data.entries.size() == 8 && cfg.seed == 42, "8 images, seed 42");
  const OverfitRun a = overfit_once(data, root / "overfit_a");
  const OverfitRun b = overfit_once(data, root / "overfit_b");
  o.require(a.report.f_eta >= 0.95, "F_eta " + fmt("%.4f", a.report.f_eta));
  o.require(a.report.mae <= 0.05, "MAE " + fmt("%.4f", a.report.mae));
  o.require(a.cpu < 600.0, "runtime " + fmt("%.0f s", a.cpu));
  bool same = a.result.log.size() == b.result.log.size();
  for (std::size_t i = 0; same && i < a.result.log.size(); ++i) {
    const auto &x = a.result.log[i], &y = b.result.log[i];
    same = x.step == y.step && bits(x.total) == bits(y.total) && bits(x.cross_entropy) == bits(y.cross_entropy) &&
           bits(x.structural) == bits(y.structural) && bits(x.lr) == bits(y.lr);
  }
  o.require(same, "loss curves bitwise identical");
  o.require(a.checkpoint == b.checkpoint, "checkpoints byte-identical");
  o.note(std::to_string(a.result.model.step) + " steps (" + a.result.stop_reason + "), F_eta " +
         fmt("%.4f", a.report.f_eta) + ", MAE " + fmt("%.4f", a.report.mae) + ", S " + fmt("%.4f", a.report.s_lambda) +
         ", " + fmt("%.0f s cpu", a.cpu) + fmt(" (%.0f s wall)", a.wall) + "; second run bitwise identical over " +
         std::to_string(a.result.log.size()) + " logged steps");
  return o;
}

// ------------------------------------------------------------------ 8

std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  if (std::getline(in, line)) header = split(line);
  while (std::getline(in, line)) {
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(row);
  }
  return rows;
}

Outcome ablation(const fs::path& root) {
  Outcome o;
  const auto data = gen_dataset(3, 16, 8, (root / "ablation_data").string());
  TrainConfig cfg = toy_config();
  cfg.network.encoder.blocks = {{1, 4}, {1, 8}};
  cfg.network.encoder.height = cfg.network.encoder.width = 16;
  cfg.network.fusion.head_channels = 4;
  cfg.batch_size = 2;
  cfg.max_steps = 5;
  const fs::path out = root / "ablation";
  ablate(cfg, data, data, out.string());

  const auto loss = read_csv((out / "loss_ablation.csv").string());
  const auto fusion = read_csv((out / "fusion_ablation.csv").string());
  o.require(loss.size() == 5, "loss table has 4 variants + full, got " + std::to_string(loss.size()));
  o.require(fusion.size() == 6, "fusion table has 5 variants + RGB/TR contrast, got " + std::to_string(fusion.size()));
  bool rgb = false, tr = false;
  for (const auto& r : fusion) {
    rgb |= r.at("model") == "hyper+RGB";
    tr |= r.at("model") == "hyper+TR";
  }
  o.require(rgb && tr, "+RGB and +TR rows present");

  double worst = 0.0;
  std::size_t cells = 0;
  for (const auto* table : {&loss, &fusion})
    for (const auto& r : *table) {
      for (const char* col : {"f_eta", "mae", "s_lambda"})
        o.require(r.count(col) == 1, std::string("column ") + col);
      const fs::path report = out / (r.at("maps") + "_report.csv");
      const std::string cmd = std::string("\"") + HYPERFUSION_CLI + "\" eval --manifest \"" +
                              (root / "ablation_data" / "manifest.json").string() + "\" --maps \"" +
                              (out / r.at("maps")).string() + "\" --out \"" + report.string() + "\" > /dev/null";
      if (std::system(cmd.c_str()) != 0) {
        o.require(false, "eval failed for " + r.at("maps"));
        continue;
      }
      const auto rep = read_csv(report.string());
      const auto& mean = rep.back();
      for (const char* col : {"f_eta", "mae", "s_lambda"}) {
        worst = std::max(worst, std::abs(std::stod(r.at(col)) - std::stod(mean.at(col))));
        ++cells;
      }
    }
  o.require(worst <= 1e-12, "recomputed cells differ by " + fmt("%.3e", worst));
  o.note(std::to_string(loss.size()) + " loss rows, " + std::to_string(fusion.size()) + " fusion rows; " +
         std::to_string(cells) + " cells recomputed via the eval command, max gap " + fmt("%.1e", worst));
  return o;
}

// ------------------------------------------------------------------ 9

Outcome persistence(const fs::path& root) {
  Outcome o;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < 1000; ++i) {
    Shape dims(1 + rng() % 4);
    for (auto& d : dims) d = 1 + rng() % 6;
    Tensor t(dims);
    for (double& v : t.values()) v = rng() % 16 == 0 ? std::bit_cast<double>(rng()) : u(rng);
    tensors.push_back({"tensor/" + std::to_string(i), t});
  }
  const std::string path = (root / "fuzz.ckpt").string();
  save_checkpoint(path, tensors);
  const auto back = load_checkpoint(path);
  bool exact = back.size() == tensors.size();
  for (std::size_t i = 0; exact && i < tensors.size(); ++i) {
    exact = back[i].name == tensors[i].name && back[i].tensor.dims() == tensors[i].tensor.dims();
    for (std::size_t j = 0; exact && j < tensors[i].tensor.numel(); ++j)
      exact = bits(back[i].tensor[j]) == bits(tensors[i].tensor[j]);
  }
  o.require(exact, "1000-tensor checkpoint round-trip bit-exact");

  std::size_t images = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t c = i % 2 ? 3 : 1;
    Image8 img{1 + rng() % 24, 1 + rng() % 24, c, {}};
    img.data.resize(img.width * img.height * c);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng());
    const std::string p = (root / (c == 3 ? "fuzz.ppm" : "fuzz.pgm")).string();
    save_netpbm(p, img);
    const Image8 r = load_netpbm(p);
    if (r.width != img.width || r.height != img.height || r.channels != c || r.data != img.data ||
        detail::read_file(p) != encode_netpbm(img)) {
      o.require(false, "netpbm round-trip " + std::to_string(i));
      break;
    }
    ++images;
  }

  // Corrupted inputs must raise a format error carrying a message, nothing else.
  std::size_t rejected = 0, accepted = 0;
  auto probe = [&](const std::function<void()>& f) {
    try {
      f();
      ++accepted;
    } catch (const FormatError& e) {
      ++rejected;
      if (std::string(e.what()).empty()) o.require(false, "empty diagnostic");
    } catch (const std::exception& e) {
      o.require(false, std::string("unexpected exception: ") + e.what());
    }
  };
  const std::vector<NamedTensor> small(tensors.begin(), tensors.begin() + 20);
  const std::string ckpt = encode_checkpoint(small);
  for (std::size_t cut = 0; cut < ckpt.size(); cut += 1 + cut / 64)
    probe([&] { decode_checkpoint(std::string_view(ckpt).substr(0, cut)); });
  for (int i = 0; i < 5000; ++i) {
    std::string bad = ckpt;
    for (int f = 0; f < 1 + i % 3; ++f) bad[rng() % bad.size()] = static_cast<char>(rng());
    probe([&] { decode_checkpoint(bad); });
  }
  Image8 img{5, 4, 3, std::vector<std::uint8_t>(60, 7)};
  const std::string ppm = encode_netpbm(img);
  for (std::size_t cut = 0; cut < ppm.size(); ++cut) probe([&] { parse_netpbm(ppm.substr(0, cut)); });
  for (int i = 0; i < 5000; ++i) {
    std::string bad = ppm;
    bad[rng() % 16] = static_cast<char>(rng());
    probe([&] { parse_netpbm(bad); });
  }
  o.require(rejected > 0, "corruptions rejected");
  o.note("1000 tensors and " + std::to_string(images) + " images round-trip exactly; " + std::to_string(rejected) +
         " corrupt inputs rejected with a format error, " + std::to_string(accepted) +
         " benign corruptions parsed, no other failure");
  return o;
}

}  // namespace

int main() {
  tune_allocator();
  const fs::path root = scratch_root();
  const DatasetManifest toy_data = gen_dataset(8, 64, 42, (root / "toy_data").string());

  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"gradient suite", gradient_suite},
      {"weight stitching", [&] { return weight_stitching(toy_data); }},
      {"reflection identities", reflection_identities},
      {"fusion topology", fusion_topology},
      {"metric oracles", metric_oracles},
      {"loss identities", loss_identities},
      {"overfit run", [&] { return overfit(toy_data, root); }},
      {"ablation harness", [&] { return ablation(root); }},
      {"persistence", [&] { return persistence(root); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::printf("%s  %zu. %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(root);
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
