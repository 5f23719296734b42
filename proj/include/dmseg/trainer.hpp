#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "dmseg/checkpoint.hpp"
#include "dmseg/config.hpp"
#include "dmseg/loss.hpp"
#include "dmseg/metrics.hpp"

namespace dmseg {

// lr0 * (1 - step / total)^p
inline double poly_lr(index_t step, index_t total_steps, double lr0, double power) {
  if (total_steps <= 0) throw InvalidInput("poly_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw InvalidInput("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  return lr0 * std::pow(1.0 - double(step) / double(total_steps), power);
}

// v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
template <typename T>
void sgd_step(std::span<T> w, std::span<const T> g, std::span<T> v, double lr, double momentum, double weight_decay) {
  if (w.size() != g.size() || w.size() != v.size()) {
    throw InvalidInput("sgd_step: parameter, gradient and velocity sizes differ");
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = mu * v[i] + (g[i] + wd * w[i]);
    w[i] -= rate * v[i];
  }
}

// Loads the manifest (or generates phantoms in memory when none is set),
// normalizes intensities and splits by the training seed.
template <typename T>
std::array<std::vector<Case<T>>, 3> load_dataset(const TrainConfig& cfg) {
  std::vector<Case<T>> cases;
  if (cfg.manifest.empty()) {
    Rng rng(cfg.phantom.seed);
    for (index_t n = 0; n < cfg.phantom_count; ++n) {
      auto ph = generate_phantom<T>(cfg.phantom, rng);
      char id[32];
      std::snprintf(id, sizeof id, "case_%03d", static_cast<int>(n));
      cases.push_back(Case<T>{id, std::move(ph.image), std::move(ph.label), Spacing{1.0, 1.0, 1.0}});
    }
  } else {
    for (const auto& rec : read_manifest(cfg.manifest)) cases.push_back(load_case<T>(rec));
  }
  for (auto& c : cases) {
    if (c.image.dim(0) != cfg.model.encoder.in_channels) {
      throw InvalidInput(c.id + ": has " + std::to_string(c.image.dim(0)) + " modalities, model expects " +
                         std::to_string(cfg.model.encoder.in_channels));
    }
    for (auto l : c.label.data)
      if (l >= cfg.model.decoder.num_classes) throw InvalidInput(c.id + ": label exceeds model.num_classes");
    c.image = intensity_normalize(c.image, cfg.normalize);
  }
  return split_dataset(std::move(cases), cfg.split, cfg.seed);
}

// Copies stored "param/<name>" tensors into the network.
template <typename T>
void load_parameters(const NamedParams<T>& params, const CheckpointData& ck) {
  for (const auto& [name, p] : params) {
    const auto* stored = ck.find("param/" + name);
    if (!stored) throw FormatError("checkpoint lacks parameter " + name);
    auto v = from_checkpoint_tensor<T>(*stored, p.shape());
    Tensor<T> target = p;  // shares storage with the network's parameter
    std::copy(v.begin(), v.end(), target.values().begin());
  }
}

// Full-volume prediction for image [C,D,H,W]: reflect-pad each axis to the
// network's divisor, run without recording, crop back. Returns [1,D,H,W].
template <typename T>
LabelVolume predict_labels(const DmSegNet<T>& net, const Tensor<T>& image) {
  NoGradGuard no_grad;
  const index_t div = net.config.encoder.divisor();
  const Triple in{image.dim(1), image.dim(2), image.dim(3)};
  Triple padded{}, before{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = (in[a] + div - 1) / div * div;
    before[a] = (padded[a] - in[a]) / 2;
  }
  const auto [img, lab] = pad_reflect(image, LabelVolume(Shape{1, in[0], in[1], in[2]}), padded);
  const auto logits = net(reshape(img, Shape{1, img.dim(0), padded[0], padded[1], padded[2]}));
  const auto full = argmax_labels(logits);
  if (padded == in) return full;
  LabelVolume out(Shape{1, in[0], in[1], in[2]});
  for (index_t d = 0; d < in[0]; ++d)
    for (index_t h = 0; h < in[1]; ++h)
      for (index_t w = 0; w < in[2]; ++w) {
        out.data[static_cast<std::size_t>((d * in[1] + h) * in[2] + w)] =
            full.data[static_cast<std::size_t>(((d + before[0]) * padded[1] + h + before[1]) * padded[2] + w + before[2])];
      }
  return out;
}

struct LogRow {
  index_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_dice;
};

struct TrainResult {
  std::vector<LogRow> log;
  index_t steps_run = 0;
  std::optional<double> final_dice;
  std::optional<double> best_dice;
  bool reached_target = false;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), net_(cfg_.model, cfg_.seed), rng_(cfg_.seed + 1) {
    cfg_.validate();
    params_ = net_.parameters();
    for (const auto& [name, p] : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), T{0});
    auto parts = load_dataset<T>(cfg_);
    train_ = std::move(parts[0]);
    val_ = std::move(parts[1]);
    if (train_.empty()) throw InvalidInput("training split is empty");
    if (cfg_.eval_on == "val" && val_.empty()) throw InvalidInput("validation split is empty; use train.eval_on = train");
  }

  const TrainConfig& config() const { return cfg_; }
  const DmSegNet<T>& net() const { return net_; }
  const NamedParams<T>& parameters() const { return params_; }
  const std::vector<std::vector<T>>& velocities() const { return velocity_; }
  const std::vector<Case<T>>& train_cases() const { return train_; }
  const std::vector<Case<T>>& val_cases() const { return val_; }
  index_t step() const { return step_; }
  bool done() const { return step_ >= cfg_.total_steps(); }

  // One optimisation step; returns the loss before the update.
  LogRow train_step() {
    if (done()) throw UsageError("train_step: schedule already finished");
    const double lr = poly_lr(step_, cfg_.total_steps(), cfg_.lr0, cfg_.poly_power);
    const index_t B = cfg_.batch_size, C = cfg_.model.encoder.in_channels;
    const auto& crop = cfg_.crop;
    const index_t cv = crop[0] * crop[1] * crop[2];
    Tensor<T> x(Shape{B, C, crop[0], crop[1], crop[2]});
    LabelVolume y(Shape{B, crop[0], crop[1], crop[2]});
    std::vector<std::string> ids;
    std::uniform_int_distribution<std::size_t> pick(0, train_.size() - 1);
    for (index_t b = 0; b < B; ++b) {
      const auto& c = train_[pick(rng_)];
      ids.push_back(c.id);
      const auto cr = random_crop(c.image, c.label, crop, rng_);
      std::copy(cr.image.values().begin(), cr.image.values().end(), x.values().begin() + b * C * cv);
      std::copy(cr.label.data.begin(), cr.label.data.end(), y.data.begin() + b * cv);
    }
    const auto loss = softmax_cross_entropy(net_(x), y);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite loss " << value << " at step " << step_ << " (lr " << lr << ", cases";
      for (const auto& id : ids) msg << ' ' << id;
      msg << ")";
      if (!cfg_.out.empty()) {
        const auto dump = (std::filesystem::path(cfg_.out) / ("nonfinite_step_" + std::to_string(step_) + ".ckpt")).string();
        save_checkpoint(checkpoint(), dump);
        msg << "; state dumped to " << dump;
      }
      throw NonFiniteLoss(msg.str());
    }
    backward(loss);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> p = params_[i].second;
      auto& grad = p.impl()->grad;
      if (grad.size() != p.values().size()) grad.assign(p.values().size(), T{0});
      sgd_step<T>(p.values(), grad, velocity_[i], lr, cfg_.momentum, cfg_.weight_decay);
      std::vector<T>().swap(grad);
    }
    ++step_;
    return LogRow{step_ - 1, lr, value, std::nullopt};
  }

  // Mean over cases of the mean foreground dice.
  double evaluate(const std::vector<Case<T>>& cases) const {
    if (cases.empty()) throw InvalidInput("evaluate: no cases");
    double sum = 0.0;
    for (const auto& c : cases) {
      const auto pred = predict_labels(net_, c.image);
      double d = 0.0;
      for (std::int32_t k = 1; k < cfg_.model.decoder.num_classes; ++k) d += dice(pred, c.label, k);
      sum += d / double(cfg_.model.decoder.num_classes - 1);
    }
    return sum / double(cases.size());
  }

  double evaluate_monitored() const { return evaluate(cfg_.eval_on == "train" ? train_ : val_); }

  CheckpointData checkpoint() const {
    CheckpointData ck;
    ck.config = to_text(cfg_);
    ck.step = static_cast<std::uint64_t>(step_);
    std::ostringstream rs;
    rs << rng_;
    ck.rng_state = rs.str();
    for (const auto& [name, p] : params_) ck.tensors.push_back(to_checkpoint_tensor("param/" + name, p));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ck.tensors.push_back(
          to_checkpoint_tensor("velocity/" + params_[i].first, Tensor<T>(params_[i].second.shape(), velocity_[i])));
    }
    return ck;
  }

  // Restores parameters, velocities, step and rng; the model and schedule
  // settings of the stored config must match this trainer's.
  void restore(const CheckpointData& ck) {
    const auto stored = parse_config(ck.config);
    if (model_text(stored) != model_text(cfg_)) {
      throw InvalidInput("checkpoint was written for a different model configuration");
    }
    load_parameters(params_, ck);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto* v = ck.find("velocity/" + params_[i].first);
      if (!v) throw FormatError("checkpoint lacks velocity for " + params_[i].first);
      velocity_[i] = from_checkpoint_tensor<T>(*v, params_[i].second.shape());
    }
    step_ = static_cast<index_t>(ck.step);
    std::istringstream rs(ck.rng_state);
    rs >> rng_;
    if (!rs) throw FormatError("checkpoint rng state is unreadable");
  }

  // Runs to the end of the schedule (or the dice target). Validation happens
  // every val_every steps and after the last step; `out` receives
  // train_log.csv, best.ckpt and last.ckpt.
  TrainResult run(const std::function<void(const LogRow&)>& on_row = {}) {
    TrainResult result;
    std::ofstream log;
    if (!cfg_.out.empty()) {
      std::filesystem::create_directories(cfg_.out);
      log.open((std::filesystem::path(cfg_.out) / "train_log.csv").string(), step_ == 0 ? std::ios::trunc : std::ios::app);
      if (step_ == 0) log << "step,lr,loss,val_dice\n";
      log.precision(10);
    }
    while (!done()) {
      auto row = train_step();
      ++result.steps_run;
      const bool validate = done() || (cfg_.val_every > 0 && step_ % cfg_.val_every == 0);
      if (validate) {
        row.val_dice = evaluate_monitored();
        result.final_dice = row.val_dice;
        if (!result.best_dice || *row.val_dice > *result.best_dice) {
          result.best_dice = row.val_dice;
          if (!cfg_.out.empty()) save_checkpoint(checkpoint(), (std::filesystem::path(cfg_.out) / "best.ckpt").string());
        }
      }
      if (log.is_open()) {
        log << row.step << ',' << row.lr << ',' << row.loss << ',';
        if (row.val_dice) log << *row.val_dice;
        log << '\n';
      }
      result.log.push_back(row);
      if (on_row) on_row(row);
      if (cfg_.target_dice > 0 && row.val_dice && *row.val_dice >= cfg_.target_dice) {
        result.reached_target = true;
        break;
      }
    }
    if (!cfg_.out.empty()) save_checkpoint(checkpoint(), (std::filesystem::path(cfg_.out) / "last.ckpt").string());
    return result;
  }

 private:
  TrainConfig cfg_;
  DmSegNet<T> net_;
  NamedParams<T> params_;
  std::vector<std::vector<T>> velocity_;
  Rng rng_;
  index_t step_ = 0;
  std::vector<Case<T>> train_, val_;
};

// Builds the network described by a checkpoint and loads its parameters.
template <typename T>
DmSegNet<T> model_from_checkpoint(const CheckpointData& ck) {
  const auto cfg = parse_config(ck.config);
  DmSegNet<T> net(cfg.model, cfg.seed);
  load_parameters(net.parameters(), ck);
  return net;
}

}  // namespace dmseg
