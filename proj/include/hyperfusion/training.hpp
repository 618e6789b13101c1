#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hyperfusion/checkpoint.hpp"
#include "hyperfusion/config.hpp"
#include "hyperfusion/dataset.hpp"
#include "hyperfusion/fusion.hpp"
#include "hyperfusion/metrics.hpp"
#include "hyperfusion/objective.hpp"

namespace hyperfusion {

/// Trained network plus everything needed to preprocess its inputs.
struct Model {
  TrainConfig config;
  NetworkParams params;
  Tensor mean;  // [3], cached dataset mean
  std::size_t step = 0;
  OptimState optim;
};

/// Losses are per pixel: the summed objective divided by N·H·W.
struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double cross_entropy = 0.0;
  double structural = 0.0;
  double total = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<TrainLogEntry> log;
  std::string stop_reason;
};

// ------------------------------------------------------------ preprocessing

inline Sample resize_sample(const Sample& s, std::size_t height, std::size_t width) {
  if (s.image.dim(0) == height && s.image.dim(1) == width) return s;
  Tensor m({s.mask.height, s.mask.width, 1});
  for (std::size_t i = 0; i < s.mask.values.size(); ++i) m[i] = s.mask.values[i];
  Sample out{resize_bilinear(s.image, 0, 0, s.image.dim(0), s.image.dim(1), height, width),
             {width, height, std::vector<std::uint8_t>(height * width)}};
  const Tensor mr = resize_bilinear(m, 0, 0, s.mask.height, s.mask.width, height, width);
  for (std::size_t i = 0; i < out.mask.values.size(); ++i) out.mask.values[i] = mr[i] >= 0.5 ? 1 : 0;
  return out;
}

inline std::vector<Sample> load_training_set(const DatasetManifest& m, const EncoderConfig& enc) {
  std::vector<Sample> out;
  for (const auto& e : m.entries) out.push_back(resize_sample(load_sample(e), enc.height, enc.width));
  return out;
}

/// Per-channel dataset mean, snapped to the pixel grid.
inline Tensor cached_mean(std::span<const Sample> samples) {
  std::vector<Tensor> images;
  for (const auto& s : samples) images.push_back(s.image);
  Tensor mean = dataset_mean(images);
  for (double& v : mean.values()) v = to_grid(v);
  return mean;
}

/// Network input for one image: the reflective pair, or (X - E, X - E) when
/// reflection is disabled.
inline ReflectivePair network_input(const Tensor& image, const Tensor& mean, const TrainConfig& cfg) {
  ReflectivePair p = separate(image, {cfg.k, mean});
  if (!cfg.reflect) p.reflected = p.transmitted.clone();
  return p;
}

inline Tensor mask_batch(std::span<const GroundTruthMask> masks) {
  const std::size_t h = masks.front().height, w = masks.front().width;
  Tensor gt({masks.size(), 1, h, w});
  for (std::size_t n = 0; n < masks.size(); ++n)
    for (std::size_t i = 0; i < h * w; ++i) gt[n * h * w + i] = masks[n].values[i];
  return gt;
}

/// First recorded tensor holding a non-finite value, or "" if all are finite.
inline std::string first_non_finite(const Tape& tape) {
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    const auto& node = tape.nodes()[i];
    if (!node.output.all_finite())
      return "node " + std::to_string(i) + " (" + node.op + ", shape " + shape_string(node.output.dims()) + ")";
  }
  return {};
}

// ------------------------------------------------------------ checkpoints

inline Tensor encode_text(const std::string& s) {
  Tensor t({std::max<std::size_t>(s.size(), 1)});
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

inline std::string decode_text(const Tensor& t) {
  std::string s;
  for (double v : t.values())
    if (v != 0.0) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return s;
}

/// Network tensors and running statistics, then "meta.*" entries and the
/// optimizer velocity as "optim.velocity.<parameter>".
inline std::vector<NamedTensor> model_tensors(const Model& m) {
  auto out = named_tensors(m.params, true);
  out.push_back({"meta.mean", m.mean});
  out.push_back({"meta.config_json", encode_text(to_json(m.config).dump())});
  out.push_back({"meta.step", Tensor::scalar(static_cast<double>(m.step))});
  out.push_back({"meta.lr", Tensor::scalar(m.optim.lr)});
  if (!m.optim.velocity.empty()) {
    const auto params = named_tensors(m.params, false);
    for (std::size_t i = 0; i < params.size(); ++i)
      out.push_back({"optim.velocity." + params[i].name, m.optim.velocity[i]});
  }
  return out;
}

inline OptimState make_optimizer(const TrainConfig& c) {
  return {c.lr, c.momentum, c.weight_decay, c.batch_size, {}};
}

inline Model model_from_tensors(const std::vector<NamedTensor>& tensors, const std::string& source) {
  std::map<std::string, const Tensor*, std::less<>> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
  auto fetch = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(source + ": checkpoint lacks tensor '" + name + "'", 0);
    return *it->second;
  };
  Model m;
  try {
    m.config = config_from_json(nlohmann::json::parse(decode_text(fetch("meta.config_json"))));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": unreadable config snapshot: " + e.what(), 0);
  } catch (const ParameterError& e) {
    throw FormatError(source + ": invalid config snapshot: " + e.what(), 0);
  }
  m.params = init_network(m.config.network, m.config.seed);
  auto assign = [&](const std::string& name, Tensor dst) {
    const Tensor& src = fetch(name);
    if (src.dims() != dst.dims())
      throw FormatError(source + ": tensor '" + name + "' has shape " + shape_string(src.dims()) + ", network expects " +
                            shape_string(dst.dims()),
                        0);
    std::copy(src.values().begin(), src.values().end(), dst.values().begin());
  };
  for (const auto& nt : named_tensors(m.params, true)) assign(nt.name, nt.tensor);
  m.mean = fetch("meta.mean").clone();
  if (m.mean.rank() != 1 || m.mean.numel() != m.config.network.encoder.in_channels)
    throw FormatError(source + ": meta.mean has shape " + shape_string(m.mean.dims()), 0);
  m.step = static_cast<std::size_t>(fetch("meta.step").item());
  m.optim = make_optimizer(m.config);
  m.optim.lr = fetch("meta.lr").item();
  const auto params = named_tensors(m.params, false);
  if (by_name.count("optim.velocity." + params.front().name)) {
    for (const auto& p : params) {
      Tensor v(p.tensor.dims());
      assign("optim.velocity." + p.name, v);
      m.optim.velocity.push_back(v);
    }
  }
  return m;
}

inline void save_model(const std::string& path, const Model& m, StorageType dtype = StorageType::f64) {
  save_checkpoint(path, model_tensors(m), dtype);
}

inline Model load_model(const std::string& path) { return model_from_tensors(load_checkpoint(path), path); }

// ------------------------------------------------------------ training

namespace detail {

/// Moving-average convergence test over consecutive windows.
class PlateauDetector {
 public:
  PlateauDetector(std::size_t window, double tolerance) : window_(window), tolerance_(tolerance) {}

  /// True when the latest window's mean improved on the previous window's
  /// mean by less than `tolerance` (relative).
  bool push(double loss) {
    history_.push_back(loss);
    if (history_.size() < 2 * window_) return false;
    const auto end = history_.end();
    const double cur = std::accumulate(end - static_cast<std::ptrdiff_t>(window_), end, 0.0);
    const double prev = std::accumulate(end - static_cast<std::ptrdiff_t>(2 * window_),
                                        end - static_cast<std::ptrdiff_t>(window_), 0.0);
    return prev - cur < tolerance_ * std::abs(prev);
  }

  void reset() { history_.clear(); }

 private:
  std::size_t window_;
  double tolerance_;
  std::vector<double> history_;
};

}  // namespace detail

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// One SGD run over a fixed training set. Batches cycle through a seeded
/// permutation per epoch. The first loss plateau divides the learning rate by
/// 10; the second one marks the run as converged.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const DatasetManifest& manifest)
      : samples_(load_training_set(manifest, cfg.network.encoder)),
        extractor_(cfg.sp_seed),
        rng_(cfg.seed),
        plateau_(cfg.plateau_window, cfg.plateau_tolerance) {
    cfg.validate();
    model_.config = cfg;
    model_.mean = cached_mean(samples_);
    model_.params = init_network(cfg.network, cfg.seed);
    model_.optim = make_optimizer(cfg);
    params_ = named_tensors(model_.params, false);
    order_.resize(samples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = order_.size();
  }

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  bool converged() const { return converged_; }

  /// Runs one step. Throws NumericError naming the first non-finite tensor if
  /// the loss or a gradient is not finite; parameters are then left untouched.
  TrainLogEntry step() {
    const TrainConfig& cfg = model_.config;
    const std::size_t step = model_.step + 1;
    std::vector<ReflectivePair> pairs;
    std::vector<GroundTruthMask> masks;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      const Sample& s = samples_[order_[cursor_++]];
      const Sample aug = cfg.augment ? augment(s, rng_) : s;
      pairs.push_back(network_input(aug.image, model_.mean, cfg));
      masks.push_back(aug.mask);
    }
    const ReflectivePair batch = to_nchw(std::span<const ReflectivePair>(pairs));
    const Tensor gt = mask_batch(masks);
    const double norm = 1.0 / static_cast<double>(gt.numel());

    for (const auto& p : params_) p.tensor.drop_grad();
    Tape tape;
    const Tensor pred = fuse_variant(tape, batch, model_.params, cfg.network, true);
    const LossTerms terms = total_loss(tape, pred, gt, extractor_, cfg.loss);
    const Tensor loss = scale(tape, terms.total, norm);
    if (!std::isfinite(loss.item())) {
      const std::string where = first_non_finite(tape);
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + "; first non-finite tensor: " +
                         (where.empty() ? std::string("loss") : where));
    }
    tape.backward(loss);
    for (const auto& p : params_)
      if (p.tensor.has_grad() && !std::all_of(p.tensor.grad().begin(), p.tensor.grad().end(),
                                              [](double g) { return std::isfinite(g); }))
        throw NumericError("train: non-finite gradient at step " + std::to_string(step) + " in " + p.name);
    sgd_step(params_, model_.optim);
    model_.step = step;

    const TrainLogEntry entry{step, model_.optim.lr, terms.cross_entropy.item() * norm,
                              terms.structural.item() * norm, loss.item()};
    if (plateau_.push(entry.total)) {
      if (decayed_) {
        converged_ = true;
      } else {
        decayed_ = true;
        model_.optim.lr *= 0.1;
        plateau_.reset();
      }
    }
    return entry;
  }

 private:
  std::vector<Sample> samples_;
  SPExtractor extractor_;
  std::mt19937_64 rng_;
  detail::PlateauDetector plateau_;
  Model model_;
  std::vector<NamedTensor> params_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  bool decayed_ = false;
  bool converged_ = false;
};

/// Trains until convergence or `max_steps`. With a checkpoint path the model
/// is saved every `checkpoint_every` steps and at the end.
inline TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const TrainCallback& on_log = {},
                         const std::string& checkpoint_path = {}) {
  Trainer trainer(cfg, manifest);
  TrainResult result;
  result.stop_reason = "max_steps";
  const std::size_t every = std::max<std::size_t>(cfg.log_every, 1);
  while (trainer.model().step < cfg.max_steps) {
    const TrainLogEntry entry = trainer.step();
    result.log.push_back(entry);
    if (on_log && (entry.step == 1 || entry.step % every == 0)) on_log(entry);
    if (!checkpoint_path.empty() && cfg.checkpoint_every && entry.step % cfg.checkpoint_every == 0)
      save_model(checkpoint_path, trainer.model());
    if (trainer.converged()) {
      result.stop_reason = "converged";
      break;
    }
  }
  if (on_log && !result.log.empty() && result.log.back().step % every != 0 && result.log.back().step != 1)
    on_log(result.log.back());
  if (!checkpoint_path.empty()) save_model(checkpoint_path, trainer.model());
  result.model = std::move(trainer.model());
  return result;
}

// ------------------------------------------------------------ inference

/// Saliency map for one [H,W,3] image at the model's input resolution,
/// resized back to the image's own size.
inline SaliencyMap predict(Model& model, const Tensor& image) {
  const auto& enc = model.config.network.encoder;
  const std::size_t h = image.dim(0), w = image.dim(1);
  Tensor x = image;
  if (h != enc.height || w != enc.width) x = resize_bilinear(image, 0, 0, h, w, enc.height, enc.width);
  const ReflectivePair pair = network_input(x, model.mean, model.config);
  const ReflectivePair batch = to_nchw(std::span<const ReflectivePair>(&pair, 1));
  Tape tape;
  Tensor p = fuse_variant(tape, batch, model.params, model.config.network, false);
  p = p.reshaped({enc.height, enc.width, 1});
  if (h != enc.height || w != enc.width) p = resize_bilinear(p, 0, 0, enc.height, enc.width, h, w);
  return {w, h, std::vector<double>(p.values().begin(), p.values().end())};
}

inline std::string map_name(const std::string& image_path) {
  return std::filesystem::path(image_path).stem().string() + ".pgm";
}

/// Writes `<image stem>.pgm` for each image into `out_dir`; returns the paths.
inline std::vector<std::string> infer(Model& model, std::span<const std::string> image_paths,
                                      const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw InputError("infer: cannot create " + out_dir + ": " + ec.message());
  std::vector<std::string> written;
  for (const auto& path : image_paths) {
    const SaliencyMap map = predict(model, image_to_tensor(load_netpbm(path)));
    const std::string out = (std::filesystem::path(out_dir) / map_name(path)).string();
    save_netpbm(out, saliency_to_image(map));
    written.push_back(out);
  }
  return written;
}

inline std::vector<std::string> infer(const std::string& checkpoint, std::span<const std::string> image_paths,
                                      const std::string& out_dir) {
  Model model = load_model(checkpoint);
  return infer(model, image_paths, out_dir);
}

inline std::vector<std::string> image_paths(const DatasetManifest& m) {
  std::vector<std::string> out;
  for (const auto& e : m.entries) out.push_back(e.image);
  return out;
}

// ------------------------------------------------------------ evaluation

/// Scores `<maps_dir>/<image stem>.pgm` against every manifest mask.
inline EvalReport evaluate_dataset(const DatasetManifest& manifest, const std::string& maps_dir, double eta2 = kDefaultEta2) {
  std::vector<ImageScores> scores;
  for (const auto& e : manifest.entries) {
    const auto map_path = std::filesystem::path(maps_dir) / map_name(e.image);
    if (!std::filesystem::exists(map_path))
      throw InputError("eval: no saliency map for " + e.image + " (expected " + map_path.string() + ")");
    const SaliencyMap map = image_to_saliency(load_netpbm(map_path.string()));
    const GroundTruthMask gt = image_to_mask(load_netpbm(e.mask));
    scores.push_back(score_image(std::filesystem::path(e.image).stem().string(), map, gt, eta2));
  }
  return summarize(std::move(scores), eta2);
}

// ------------------------------------------------------------ ablation

struct AblationRow {
  std::string table;  // "loss" or "fusion"
  std::string model;
  TrainConfig config;
  std::string maps_dir;
  double f_eta = 0.0;
  double mae = 0.0;
  double s_lambda = 0.0;
};

/// Loss rows: the concatenation-only network with bce, then the hyper network
/// under bce, wbce, bce+sp and the full objective. Fusion rows: the five
/// variants under the base objective, plus hyper fed (X - E, X - E).
inline std::vector<AblationRow> ablation_plan(const TrainConfig& base) {
  std::vector<AblationRow> rows;
  auto with = [&](std::string table, std::string name, FusionVariant v, LossKind loss, bool reflect) {
    AblationRow r;
    r.table = std::move(table);
    r.model = std::move(name);
    r.config = base;
    r.config.network.fusion.variant = v;
    r.config.loss.kind = loss;
    r.config.reflect = reflect;
    rows.push_back(std::move(r));
  };
  with("loss", "ICNN-hf+bce", FusionVariant::late, LossKind::bce, true);
  with("loss", "ICNN+bce", FusionVariant::hyper, LossKind::bce, true);
  with("loss", "ICNN+wbce", FusionVariant::hyper, LossKind::wbce, true);
  with("loss", "ICNN+bce+sp", FusionVariant::hyper, LossKind::bce_sp, true);
  with("loss", "full", FusionVariant::hyper, LossKind::wbce_sp, true);
  const LossKind kind = base.loss.kind;
  with("fusion", "input", FusionVariant::input, kind, true);
  with("fusion", "early", FusionVariant::early, kind, true);
  with("fusion", "late", FusionVariant::late, kind, true);
  with("fusion", "adhoc", FusionVariant::adhoc, kind, true);
  with("fusion", "hyper+RGB", FusionVariant::hyper, kind, false);
  with("fusion", "hyper+TR", FusionVariant::hyper, kind, true);
  return rows;
}

inline void write_ablation_csv(const std::string& path, std::span<const AblationRow> rows, const std::string& table) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "model,fusion_variant,loss,reflect,f_eta,mae,s_lambda,maps\n";
  for (const auto& r : rows) {
    if (r.table != table) continue;
    out << r.model << ',' << to_string(r.config.network.fusion.variant) << ',' << to_string(r.config.loss.kind) << ','
        << (r.config.reflect ? "true" : "false") << ',' << r.f_eta << ',' << r.mae << ',' << r.s_lambda << ','
        << r.maps_dir << '\n';
  }
  detail::write_file(path, out.str());
}

/// Trains every ablation row on `train_set` with the same seed and budget,
/// writes its maps for `eval_set` under `out_dir/maps/<table>_<model>/` and
/// the two tables as loss_ablation.csv and fusion_ablation.csv. Rows with
/// identical configurations share one training run.
inline std::vector<AblationRow> ablate(const TrainConfig& base, const DatasetManifest& train_set,
                                       const DatasetManifest& eval_set, const std::string& out_dir,
                                       const std::function<void(const std::string&)>& progress = {}) {
  auto rows = ablation_plan(base);
  const auto root = std::filesystem::path(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(root / "maps", ec);
  if (ec) throw InputError("ablate: cannot create " + out_dir + ": " + ec.message());
  std::map<std::string, std::string> trained;  // config json -> maps dir
  const auto images = image_paths(eval_set);
  for (auto& r : rows) {
    const std::string key = to_json(r.config).dump();
    std::string dir = (root / "maps" / (r.table + "_" + r.model)).string();
    if (auto it = trained.find(key); it != trained.end()) {
      dir = it->second;
    } else {
      if (progress) progress("training " + r.table + "/" + r.model);
      TrainResult t = train(r.config, train_set);
      infer(t.model, images, dir);
      trained.emplace(key, dir);
    }
    r.maps_dir = std::filesystem::relative(dir, root).generic_string();
    const EvalReport rep = evaluate_dataset(eval_set, dir, base.eta2);
    r.f_eta = rep.f_eta;
    r.mae = rep.mae;
    r.s_lambda = rep.s_lambda;
  }
  write_ablation_csv((root / "loss_ablation.csv").string(), rows, "loss");
  write_ablation_csv((root / "fusion_ablation.csv").string(), rows, "fusion");
  return rows;
}

}  // namespace hyperfusion
