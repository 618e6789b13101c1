#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hyperfusion/allocator.hpp"
#include "hyperfusion/dataset.hpp"
#include "hyperfusion/gradient_suite.hpp"
#include "hyperfusion/training.hpp"

namespace hf = hyperfusion;

namespace {

int cmd_gen_data(std::size_t count, std::uint64_t seed, std::size_t canvas, const std::string& out) {
  const auto m = hf::gen_dataset(count, canvas, seed, out);
  std::cout << "wrote " << m.entries.size() << " scenes and "
            << (std::filesystem::path(out) / "manifest.json").string() << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& manifest, const std::string& out,
              const std::string& log_path) {
  const auto cfg = hf::load_config(config);
  const auto m = hf::load_manifest(manifest);
  std::FILE* log = nullptr;
  if (!log_path.empty()) {
    log = std::fopen(log_path.c_str(), "w");
    if (!log) throw hf::InputError("cannot write " + log_path);
    std::fprintf(log, "step,lr,cross_entropy,structural,total\n");
  }
  std::printf("%8s %10s %14s %14s %14s\n", "step", "lr", "ce", "sp", "total");
  const auto result = hf::train(
      cfg, m,
      [](const hf::TrainLogEntry& e) {
        std::printf("%8zu %10.3g %14.8f %14.8f %14.8f\n", e.step, e.lr, e.cross_entropy, e.structural, e.total);
        std::fflush(stdout);
      },
      out);
  if (log) {
    for (const auto& e : result.log)
      std::fprintf(log, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.step, e.lr, e.cross_entropy, e.structural, e.total);
    std::fclose(log);
  }
  std::cout << "stopped after " << result.model.step << " steps (" << result.stop_reason << "); checkpoint " << out
            << "\n";
  return 0;
}

int cmd_infer(const std::string& ckpt, const std::vector<std::string>& images, const std::string& out) {
  const auto written = hf::infer(ckpt, images, out);
  for (const auto& p : written) std::cout << p << "\n";
  return 0;
}

int cmd_eval(const std::string& manifest, const std::string& maps, const std::string& out, std::string pr_out,
             double eta2) {
  const auto report = hf::evaluate_dataset(hf::load_manifest(manifest), maps, eta2);
  if (pr_out.empty()) pr_out = (std::filesystem::path(out).parent_path() / "pr_curve.csv").string();
  hf::write_report_csv(out, report);
  hf::write_pr_csv(pr_out, report);
  std::printf("images %zu  F_eta %.6f  F_max %.6f  MAE %.6f  S_lambda %.6f\n", report.images.size(), report.f_eta,
              report.f_max, report.mae, report.s_lambda);
  return 0;
}

int cmd_gradcheck(bool full) {
  hf::GradientSuiteOptions opts;
  opts.full = full;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& c : hf::run_gradient_suite(opts)) {
    const bool pass = c.report.passed(opts.check.tolerance);
    ok = ok && pass;
    std::printf("%-4s %-30s coords %6zu (kink-refined %3zu)  max rel err %.3e  %.2fs\n", pass ? "ok" : "FAIL",
                c.name.c_str(), c.report.coordinates, c.report.refined, c.report.max_rel_error, c.seconds);
    if (!pass) std::printf("     worst: %s\n", c.report.worst.c_str());
  }
  std::printf("total %.2fs\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return ok ? 0 : 1;
}

int cmd_ablate(const std::string& config, const std::string& manifest, const std::string& eval_manifest,
               const std::string& out) {
  const auto cfg = hf::load_config(config);
  const auto train_set = hf::load_manifest(manifest);
  const auto eval_set = eval_manifest.empty() ? train_set : hf::load_manifest(eval_manifest);
  const auto rows = hf::ablate(cfg, train_set, eval_set, out, [](const std::string& msg) {
    std::cout << msg << std::endl;
  });
  for (const auto& r : rows)
    std::printf("%-7s %-12s F_eta %.4f  MAE %.4f  S_lambda %.4f\n", r.table.c_str(), r.model.c_str(), r.f_eta, r.mae,
                r.s_lambda);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  hf::tune_allocator();
  CLI::App app{"Reflective-pair saliency network: data, training, inference and evaluation"};
  app.require_subcommand(1);

  std::size_t count = 8, canvas = 64;
  std::uint64_t seed = 42;
  std::string out, config, manifest, ckpt, maps, log_path, pr_out, eval_manifest;
  std::vector<std::string> images;
  double eta2 = hf::kDefaultEta2;
  bool full = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic image/mask dataset");
  gen->add_option("--count", count, "Number of scenes")->required();
  gen->add_option("--seed", seed, "Random seed")->required();
  gen->add_option("--canvas", canvas, "Image side length in pixels");
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a network and write a checkpoint");
  tr->add_option("--config", config, "JSON training config")->required()->check(CLI::ExistingFile);
  tr->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--log", log_path, "Write the per-step loss curve as CSV");

  auto* inf = app.add_subcommand("infer", "Write saliency maps for images");
  inf->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--images", images, "Input P6 images")->required();
  inf->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Score saliency maps against manifest masks");
  ev->add_option("--manifest", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--maps", maps, "Directory of <stem>.pgm maps")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", out, "Report CSV")->required();
  ev->add_option("--pr-out", pr_out, "PR curve CSV (default: pr_curve.csv next to the report)");
  ev->add_option("--eta2", eta2, "F-measure weight");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_flag("--full", full, "Check every network coordinate");

  auto* ab = app.add_subcommand("ablate", "Train the loss and fusion ablation rows");
  ab->add_option("--config", config, "Base JSON config")->required()->check(CLI::ExistingFile);
  ab->add_option("--manifest", manifest, "Training manifest")->required()->check(CLI::ExistingFile);
  ab->add_option("--eval-manifest", eval_manifest, "Evaluation manifest (default: the training manifest)");
  ab->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(count, seed, canvas, out);
    if (*tr) return cmd_train(config, manifest, out, log_path);
    if (*inf) return cmd_infer(ckpt, images, out);
    if (*ev) return cmd_eval(manifest, maps, out, pr_out, eta2);
    if (*gc) return cmd_gradcheck(full);
    if (*ab) return cmd_ablate(config, manifest, eval_manifest, out);
  } catch (const hf::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const hf::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 4;
  } catch (const hf::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
