#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmseg/data.hpp"
#include "dmseg/mf_decoder.hpp"
#include "dmseg/phantom.hpp"

// Plain-text run configuration: one `section.key = value` per line, '#'
// starts a comment. Unknown keys are errors.
namespace dmseg {

enum class Precision { Float32, Float64 };

struct TrainConfig {
  // K matches the default phantom class count so an empty config is valid
  ModelConfig model = [] {
    ModelConfig m;
    m.decoder.num_classes = 3;
    return m;
  }();
  // optimisation
  double lr0 = 1e-4;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  index_t epochs = 1;
  index_t steps_per_epoch = 100;
  Triple crop{32, 32, 32};
  std::uint64_t seed = 0;
  index_t batch_size = 1;
  Precision precision = Precision::Float32;
  index_t val_every = 0;      // 0: validate only at the end
  double target_dice = 0.0;   // > 0: stop once validation mean dice reaches it
  std::string eval_on = "val";  // val | train
  std::string out;            // output directory; empty writes nothing
  // data
  std::string manifest;       // empty: generate phantoms in memory
  NormalizeScheme normalize = NormalizeScheme::zscore();
  std::array<double, 3> split{0.7, 0.1, 0.2};
  index_t phantom_count = 8;
  PhantomSpec phantom;

  index_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (!(lr0 >= 0)) throw InvalidInput("train.lr0 must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidInput("train.momentum must lie in [0, 1)");
    if (!(poly_power > 0)) throw InvalidInput("train.poly_power must be positive");
    if (weight_decay < 0) throw InvalidInput("train.weight_decay must be non-negative");
    if (epochs < 1 || steps_per_epoch < 1) throw InvalidInput("train.epochs and train.steps_per_epoch must be positive");
    if (batch_size < 1) throw InvalidInput("train.batch_size must be positive");
    for (auto c : crop)
      if (c <= 0 || c % model.encoder.divisor() != 0) {
        throw InvalidInput("train.crop must be positive multiples of " + std::to_string(model.encoder.divisor()));
      }
    if (eval_on != "val" && eval_on != "train") throw InvalidInput("train.eval_on must be val or train");
    if (model.decoder.num_classes < 2) throw InvalidInput("model.num_classes must be at least 2");
    if (manifest.empty()) {
      phantom.validate();
      if (phantom.num_classes > model.decoder.num_classes) {
        throw InvalidInput("data.phantom_classes exceeds model.num_classes");
      }
      if (phantom_count < 3) throw InvalidInput("data.phantom_count must be at least 3");
    }
  }
};

namespace detail {

template <typename Int>
Int parse_int(const std::string& s, const std::string& key) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw InvalidInput(key + ": not an integer '" + s + "'");
  }
  if (used != s.size()) throw InvalidInput(key + ": not an integer '" + s + "'");
  return static_cast<Int>(v);
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw InvalidInput(key + ": expected on/off, got '" + s + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename Seq>
std::string join(const Seq& values) {
  std::string s;
  for (const auto& v : values) {
    if (!s.empty()) s += ',';
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>) {
      s += fmt(v);
    } else {
      s += std::to_string(v);
    }
  }
  return s;
}

struct Key {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::map<std::string, Key>& config_keys() {
  using C = TrainConfig;
  using S = const std::string&;
  auto onoff = [](bool b) { return std::string(b ? "on" : "off"); };
  static const std::map<std::string, Key> keys = {
      {"model.in_channels", {[](C& c, S v) { c.model.encoder.in_channels = parse_int<index_t>(v, "model.in_channels"); },
                             [](const C& c) { return std::to_string(c.model.encoder.in_channels); }}},
      {"model.base_channels",
       {[](C& c, S v) { c.model.encoder.base_channels = parse_int<index_t>(v, "model.base_channels"); },
        [](const C& c) { return std::to_string(c.model.encoder.base_channels); }}},
      {"model.blocks",
       {[](C& c, S v) {
          std::vector<index_t> b;
          for (const auto& p : split(v, ',')) b.push_back(parse_int<index_t>(p, "model.blocks"));
          if (b.empty()) throw InvalidInput("model.blocks is empty");
          for (auto n : b)
            if (n < 1) throw InvalidInput("model.blocks entries must be positive");
          c.model.encoder.blocks_per_stage = b;
        },
        [](const C& c) { return join(c.model.encoder.blocks_per_stage); }}},
      {"model.decoder_channels",
       {[](C& c, S v) { c.model.decoder.channels = parse_int<index_t>(v, "model.decoder_channels"); },
        [](const C& c) { return std::to_string(c.model.decoder.channels); }}},
      {"model.num_classes",
       {[](C& c, S v) { c.model.decoder.num_classes = parse_int<index_t>(v, "model.num_classes"); },
        [](const C& c) { return std::to_string(c.model.decoder.num_classes); }}},
      {"model.inject_context",
       {[](C& c, S v) { c.model.decoder.inject_context = parse_bool(v, "model.inject_context"); },
        [onoff](const C& c) { return onoff(c.model.decoder.inject_context); }}},
      {"model.state_dim",
       {[](C& c, S v) { c.model.encoder.qsm.mamba.state_dim = parse_int<index_t>(v, "model.state_dim"); },
        [](const C& c) { return std::to_string(c.model.encoder.qsm.mamba.state_dim); }}},
      {"model.expand", {[](C& c, S v) { c.model.encoder.qsm.mamba.expand = parse_int<index_t>(v, "model.expand"); },
                        [](const C& c) { return std::to_string(c.model.encoder.qsm.mamba.expand); }}},
      {"model.conv_width",
       {[](C& c, S v) { c.model.encoder.qsm.mamba.conv_width = parse_int<index_t>(v, "model.conv_width"); },
        [](const C& c) { return std::to_string(c.model.encoder.qsm.mamba.conv_width); }}},
      {"ablation.gsc", {[](C& c, S v) { c.model.encoder.gsc_enabled = parse_bool(v, "ablation.gsc"); },
                        [onoff](const C& c) { return onoff(c.model.encoder.gsc_enabled); }}},
      {"ablation.qss", {[](C& c, S v) { c.model.encoder.qsm.quad_directional = parse_bool(v, "ablation.qss"); },
                        [onoff](const C& c) { return onoff(c.model.encoder.qsm.quad_directional); }}},
      {"gsc.tied_g_weights", {[](C& c, S v) { c.model.encoder.gsc.tied_g_weights = parse_bool(v, "gsc.tied_g_weights"); },
                              [onoff](const C& c) { return onoff(c.model.encoder.gsc.tied_g_weights); }}},
      {"gsc.single_conv", {[](C& c, S v) { c.model.encoder.gsc.single_conv = parse_bool(v, "gsc.single_conv"); },
                           [onoff](const C& c) { return onoff(c.model.encoder.gsc.single_conv); }}},
      {"qsm.fusion",
       {[](C& c, S v) {
          if (v == "sum") {
            c.model.encoder.qsm.fusion = QsmFusion::Sum;
          } else if (v == "concat_gate") {
            c.model.encoder.qsm.fusion = QsmFusion::ConcatGate;
          } else {
            throw InvalidInput("qsm.fusion: expected sum or concat_gate, got '" + v + "'");
          }
        },
        [](const C& c) { return std::string(c.model.encoder.qsm.fusion == QsmFusion::Sum ? "sum" : "concat_gate"); }}},
      {"train.lr0", {[](C& c, S v) { c.lr0 = parse_double(v, "train.lr0"); }, [](const C& c) { return fmt(c.lr0); }}},
      {"train.poly_power", {[](C& c, S v) { c.poly_power = parse_double(v, "train.poly_power"); },
                            [](const C& c) { return fmt(c.poly_power); }}},
      {"train.momentum", {[](C& c, S v) { c.momentum = parse_double(v, "train.momentum"); },
                          [](const C& c) { return fmt(c.momentum); }}},
      {"train.weight_decay", {[](C& c, S v) { c.weight_decay = parse_double(v, "train.weight_decay"); },
                              [](const C& c) { return fmt(c.weight_decay); }}},
      {"train.epochs", {[](C& c, S v) { c.epochs = parse_int<index_t>(v, "train.epochs"); },
                        [](const C& c) { return std::to_string(c.epochs); }}},
      {"train.steps_per_epoch", {[](C& c, S v) { c.steps_per_epoch = parse_int<index_t>(v, "train.steps_per_epoch"); },
                                 [](const C& c) { return std::to_string(c.steps_per_epoch); }}},
      {"train.crop",
       {[](C& c, S v) {
          const auto p = split(v, ',');
          if (p.size() == 1) {
            const auto s = parse_int<index_t>(p[0], "train.crop");
            c.crop = {s, s, s};
          } else if (p.size() == 3) {
            for (std::size_t a = 0; a < 3; ++a) c.crop[a] = parse_int<index_t>(p[a], "train.crop");
          } else {
            throw InvalidInput("train.crop: expected S or D,H,W");
          }
        },
        [](const C& c) { return join(c.crop); }}},
      {"train.seed", {[](C& c, S v) { c.seed = parse_int<std::uint64_t>(v, "train.seed"); },
                      [](const C& c) { return std::to_string(c.seed); }}},
      {"train.batch_size", {[](C& c, S v) { c.batch_size = parse_int<index_t>(v, "train.batch_size"); },
                            [](const C& c) { return std::to_string(c.batch_size); }}},
      {"train.precision",
       {[](C& c, S v) {
          if (v == "float32") {
            c.precision = Precision::Float32;
          } else if (v == "float64") {
            c.precision = Precision::Float64;
          } else {
            throw InvalidInput("train.precision: expected float32 or float64, got '" + v + "'");
          }
        },
        [](const C& c) { return std::string(c.precision == Precision::Float32 ? "float32" : "float64"); }}},
      {"train.val_every", {[](C& c, S v) { c.val_every = parse_int<index_t>(v, "train.val_every"); },
                           [](const C& c) { return std::to_string(c.val_every); }}},
      {"train.target_dice", {[](C& c, S v) { c.target_dice = parse_double(v, "train.target_dice"); },
                             [](const C& c) { return fmt(c.target_dice); }}},
      {"train.eval_on", {[](C& c, S v) { c.eval_on = v; }, [](const C& c) { return c.eval_on; }}},
      {"train.out", {[](C& c, S v) { c.out = v; }, [](const C& c) { return c.out; }}},
      {"data.manifest", {[](C& c, S v) { c.manifest = v; }, [](const C& c) { return c.manifest; }}},
      {"data.normalize",
       {[](C& c, S v) {
          if (v == "zscore") {
            c.normalize.kind = NormalizeScheme::Kind::ZScore;
          } else if (v == "window") {
            c.normalize.kind = NormalizeScheme::Kind::Window;
          } else if (v == "none") {
            c.normalize.kind = NormalizeScheme::Kind::None;
          } else {
            throw InvalidInput("data.normalize: expected zscore, window or none, got '" + v + "'");
          }
        },
        [](const C& c) {
          switch (c.normalize.kind) {
            case NormalizeScheme::Kind::ZScore: return std::string("zscore");
            case NormalizeScheme::Kind::Window: return std::string("window");
            default: return std::string("none");
          }
        }}},
      {"data.window",
       {[](C& c, S v) {
          const auto p = split(v, ',');
          if (p.size() != 2) throw InvalidInput("data.window: expected lo,hi");
          c.normalize.lo = parse_double(p[0], "data.window");
          c.normalize.hi = parse_double(p[1], "data.window");
        },
        [](const C& c) { return fmt(c.normalize.lo) + "," + fmt(c.normalize.hi); }}},
      {"data.split",
       {[](C& c, S v) {
          const auto p = split(v, ',');
          if (p.size() != 3) throw InvalidInput("data.split: expected train,val,test fractions");
          for (std::size_t k = 0; k < 3; ++k) c.split[k] = parse_double(p[k], "data.split");
        },
        [](const C& c) { return join(c.split); }}},
      {"data.phantom_count", {[](C& c, S v) { c.phantom_count = parse_int<index_t>(v, "data.phantom_count"); },
                              [](const C& c) { return std::to_string(c.phantom_count); }}},
      {"data.phantom_size", {[](C& c, S v) { c.phantom.size = parse_int<index_t>(v, "data.phantom_size"); },
                             [](const C& c) { return std::to_string(c.phantom.size); }}},
      {"data.phantom_classes",
       {[](C& c, S v) { c.phantom.num_classes = parse_int<std::int32_t>(v, "data.phantom_classes"); },
        [](const C& c) { return std::to_string(c.phantom.num_classes); }}},
      {"data.phantom_noise", {[](C& c, S v) { c.phantom.noise_sigma = parse_double(v, "data.phantom_noise"); },
                              [](const C& c) { return fmt(c.phantom.noise_sigma); }}},
      {"data.phantom_seed", {[](C& c, S v) { c.phantom.seed = parse_int<std::uint64_t>(v, "data.phantom_seed"); },
                             [](const C& c) { return std::to_string(c.phantom.seed); }}},
  };
  return keys;
}

}  // namespace detail

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw InvalidInput("unknown config key '" + key + "'");
  it->second.set(cfg, value);
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InvalidInput("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const InvalidInput& e) {
      throw InvalidInput("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Every key, so parse_config(to_text(c)) rebuilds c.
inline std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, k] : detail::config_keys()) out += key + " = " + k.get(cfg) + "\n";
  return out;
}

// Only the keys that shape the network and its parameter set.
inline std::string model_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, k] : detail::config_keys()) {
    const auto section = key.substr(0, key.find('.'));
    if (section == "model" || section == "ablation" || section == "gsc" || section == "qsm" || key == "train.precision") {
      out += key + " = " + k.get(cfg) + "\n";
    }
  }
  return out;
}

}  // namespace dmseg
