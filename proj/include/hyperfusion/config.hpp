#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "hyperfusion/fusion.hpp"
#include "hyperfusion/objective.hpp"

namespace hyperfusion {

/// Everything needed to reproduce a training run.
struct TrainConfig {
  NetworkConfig network;
  LossConfig loss;
  double k = 1.0;
  // false feeds (X - E, X - E) to both branches instead of the reflective pair.
  bool reflect = true;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 4;
  std::size_t max_steps = 2000;
  double eta2 = 0.3;
  std::uint64_t seed = 42;
  std::uint64_t sp_seed = 20180917;
  bool augment = true;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t log_every = 50;
  std::size_t plateau_window = 200;
  double plateau_tolerance = 1e-3;

  void validate() const {
    network.validate();
    loss.validate();
    if (!(k > 0.0)) throw ParameterError("config: k must be positive");
    if (!(lr >= 0.0)) throw ParameterError("config: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("config: momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ParameterError("config: weight_decay must be >= 0");
    if (batch_size == 0) throw ParameterError("config: batch_size must be positive");
    if (!(eta2 > 0.0)) throw ParameterError("config: eta2 must be positive");
    if (plateau_window == 0) throw ParameterError("config: plateau_window must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.network.encoder.blocks) blocks.push_back({b.conv_count, b.channels});
  return {
      {"input_size", {c.network.encoder.height, c.network.encoder.width}},
      {"blocks", blocks},
      {"taps", c.network.encoder.taps == TapMode::every_conv ? "every_conv" : "block_output"},
      {"fuse_channels", c.network.fusion.fuse_channels},
      {"head_channels", c.network.fusion.head_channels},
      {"fusion_variant", std::string(to_string(c.network.fusion.variant))},
      {"loss", std::string(to_string(c.loss.kind))},
      {"k", c.k},
      {"reflect", c.reflect},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"max_steps", c.max_steps},
      {"mu", c.loss.mu},
      {"lambda_l", c.loss.lambda},
      {"sp_layers", c.loss.sp_layers},
      {"eta2", c.eta2},
      {"seed", c.seed},
      {"sp_seed", c.sp_seed},
      {"augment", c.augment},
      {"checkpoint_every", c.checkpoint_every},
      {"log_every", c.log_every},
      {"plateau_window", c.plateau_window},
      {"plateau_tolerance", c.plateau_tolerance},
  };
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParameterError("config: top level must be a JSON object");
  static const std::set<std::string> known = {
      "input_size", "blocks",     "taps",      "fuse_channels", "head_channels",    "fusion_variant", "loss",
      "k",          "reflect",    "lr",        "momentum",      "weight_decay",     "batch_size",     "max_steps",
      "mu",         "lambda_l",   "sp_layers", "eta2",          "seed",             "sp_seed",        "augment",
      "checkpoint_every", "log_every", "plateau_window", "plateau_tolerance"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ParameterError("config: unknown key '" + key + "'");

  TrainConfig c;
  try {
    auto& enc = c.network.encoder;
    if (j.contains("input_size")) {
      const auto& s = j.at("input_size");
      if (s.is_number()) {
        enc.height = enc.width = s.get<std::size_t>();
      } else {
        enc.height = s.at(0).get<std::size_t>();
        enc.width = s.at(1).get<std::size_t>();
      }
    }
    if (j.contains("blocks")) {
      enc.blocks.clear();
      for (const auto& b : j.at("blocks")) enc.blocks.push_back({b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>()});
    }
    if (j.contains("taps")) {
      const auto t = j.at("taps").get<std::string>();
      if (t == "every_conv") enc.taps = TapMode::every_conv;
      else if (t == "block_output") enc.taps = TapMode::block_output;
      else throw ParameterError("config: unknown taps '" + t + "'");
    }
    auto& fus = c.network.fusion;
    if (j.contains("fuse_channels")) fus.fuse_channels = j.at("fuse_channels").get<std::vector<std::size_t>>();
    if (j.contains("head_channels")) fus.head_channels = j.at("head_channels").get<std::size_t>();
    if (j.contains("fusion_variant")) fus.variant = parse_variant(j.at("fusion_variant").get<std::string>());
    if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
    if (j.contains("mu")) c.loss.mu = j.at("mu").get<double>();
    if (j.contains("lambda_l")) c.loss.lambda = j.at("lambda_l").get<std::vector<double>>();
    if (j.contains("sp_layers")) c.loss.sp_layers = j.at("sp_layers").get<std::size_t>();
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("k", c.k);
    get("reflect", c.reflect);
    get("lr", c.lr);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("batch_size", c.batch_size);
    get("max_steps", c.max_steps);
    get("eta2", c.eta2);
    get("seed", c.seed);
    get("sp_seed", c.sp_seed);
    get("augment", c.augment);
    get("checkpoint_every", c.checkpoint_every);
    get("log_every", c.log_every);
    get("plateau_window", c.plateau_window);
    get("plateau_tolerance", c.plateau_tolerance);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what(), e.byte);
  }
  return config_from_json(j);
}

}  // namespace hyperfusion
