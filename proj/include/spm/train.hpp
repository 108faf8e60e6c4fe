#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "spm/autodiff.hpp"
#include "spm/data.hpp"
#include "spm/metrics.hpp"
#include "spm/network.hpp"

namespace spm {

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 5e-4;  // peak learning rate
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double warmup_epochs = 2.0;
  double div_factor = 10.0;         // start lr = lr / div_factor
  double final_div_factor = 1000.0; // end lr = start lr / final_div_factor
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (!(lr > 0.0) || weight_decay < 0.0 || !(div_factor >= 1.0) || !(final_div_factor >= 1.0)) {
      throw ConfigError("train: lr must be positive, weight_decay non-negative, div factors >= 1");
    }
    if (warmup_epochs < 0.0 || warmup_epochs > static_cast<double>(epochs)) {
      throw ConfigError("train.warmup_epochs must lie in [0, epochs]");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0)) {
      throw ConfigError("train: betas must lie in [0,1) and eps must be positive");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},           {"lr", t.lr},
          {"weight_decay", t.weight_decay}, {"beta1", t.beta1},
          {"beta2", t.beta2},             {"eps", t.eps},
          {"warmup_epochs", t.warmup_epochs}, {"div_factor", t.div_factor},
          {"final_div_factor", t.final_div_factor}, {"augment", t.augment},
          {"seed", t.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig t;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") t.epochs = v.get<std::size_t>();
      else if (key == "lr") t.lr = v.get<double>();
      else if (key == "weight_decay") t.weight_decay = v.get<double>();
      else if (key == "beta1") t.beta1 = v.get<double>();
      else if (key == "beta2") t.beta2 = v.get<double>();
      else if (key == "eps") t.eps = v.get<double>();
      else if (key == "warmup_epochs") t.warmup_epochs = v.get<double>();
      else if (key == "div_factor") t.div_factor = v.get<double>();
      else if (key == "final_div_factor") t.final_div_factor = v.get<double>();
      else if (key == "augment") t.augment = v.get<bool>();
      else if (key == "seed") t.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown train config field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  t.validate();
  return t;
}

/// One-cycle schedule with cosine annealing in both phases.
class OneCycleSchedule {
 public:
  OneCycleSchedule(double max_lr, std::size_t total_steps, double warmup_fraction, double div_factor = 10.0,
                   double final_div_factor = 1000.0)
      : max_lr_(max_lr), initial_(max_lr / div_factor), final_(max_lr / div_factor / final_div_factor), total_(total_steps) {
    if (total_steps == 0) throw DomainError("schedule needs at least one step");
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw DomainError("warm-up fraction must lie in [0,1]");
    warm_ = static_cast<double>(total_steps) * warmup_fraction;
  }

  double operator()(std::size_t step) const {
    const double t = static_cast<double>(step);
    if (t < warm_) return anneal(initial_, max_lr_, t / warm_);
    const double span = static_cast<double>(total_) - warm_;
    return anneal(max_lr_, final_, span > 0.0 ? std::min(1.0, (t - warm_) / span) : 1.0);
  }

  double max_lr() const { return max_lr_; }
  double initial_lr() const { return initial_; }
  double final_lr() const { return final_; }
  std::size_t total_steps() const { return total_; }

 private:
  static double anneal(double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }

  double max_lr_, initial_, final_;
  std::size_t total_;
  double warm_ = 0.0;
};

/// Decoupled weight decay Adam. Decay applies only to matrices and filters
/// (rank >= 2), excluding the SSM state matrix.
class AdamW {
 public:
  AdamW(ParamStore& store, const TrainConfig& cfg) : store_(&store), cfg_(cfg) {
    for (const auto& [name, v] : store.entries()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
      const bool ssm_state = name.size() >= 5 && name.compare(name.size() - 5, 5, "A_log") == 0;
      decay_.push_back(v.shape().size() >= 2 && !ssm_state);
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto& entries = store_->entries();
    for (std::size_t p = 0; p < entries.size(); ++p) {
      Var v = entries[p].second;
      if (!v.has_grad()) continue;
      Tensor& w = v.mutable_value();
      const Tensor& g = v.grad();
      auto& m = m_[p].storage();
      auto& s = v_[p].storage();
      const double decay = decay_[p] ? lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        s[i] = cfg_.beta2 * s[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w.storage()[i] -= decay * w[i];
        w.storage()[i] -= lr * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + cfg_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }
  bool decays(std::size_t p) const { return decay_[p]; }

 private:
  ParamStore* store_;
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

struct StepReport {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Single-writer trainer: one optimizer step per scene, scenes visited in a
/// seeded shuffled order each epoch.
class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg, std::size_t steps_per_epoch)
      : model_(&model),
        cfg_((cfg.validate(), cfg)),
        opt_(model.store, cfg_),
        schedule_(cfg_.lr, cfg_.epochs * steps_per_epoch, cfg_.warmup_epochs / static_cast<double>(cfg_.epochs),
                  cfg_.div_factor, cfg_.final_div_factor),
        rng_(cfg_.seed) {}

  /// Forward, backward and update on one cloud. Throws NumericError when the
  /// loss or any intermediate is not finite.
  StepReport step(const PointCloud& pc) {
    if (!pc.labels) throw ContractError("training cloud has no labels");
    const std::size_t k = opt_.steps();
    const double lr = schedule_(k);
    PointCloud input = cfg_.augment ? augment(pc, rng_()) : pc;
    model_->store.zero_grad();
    Var loss;
    try {
      loss = cross_entropy_loss(segment_forward(*model_, input, &rng_), *input.labels, kIgnoreLabel);
      backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(k) + ": " + e.what());
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw NumericError("step " + std::to_string(k) + ": non-finite loss");
    opt_.step(lr);
    return {k, value, lr};
  }

  std::vector<double> train_epoch(const std::vector<PointCloud>& dataset) {
    if (dataset.empty()) throw ContractError("train_epoch: empty dataset");
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    std::vector<double> losses;
    for (std::size_t i : order) losses.push_back(step(dataset[i]).loss);
    return losses;
  }

  const OneCycleSchedule& schedule() const { return schedule_; }
  std::size_t steps() const { return opt_.steps(); }

 private:
  Model* model_;
  TrainConfig cfg_;
  AdamW opt_;
  OneCycleSchedule schedule_;
  std::mt19937_64 rng_;
};

inline std::vector<int> predict(const Model& model, const PointCloud& pc) {
  NoGradGuard guard;
  return argmax_rows(segment_forward(model, pc).value());
}

inline MiouResult evaluate(const Model& model, const std::vector<PointCloud>& dataset) {
  ConfusionMatrix cm(model.cfg.num_classes);
  for (const auto& pc : dataset) {
    if (!pc.labels) throw ContractError("evaluation cloud has no labels");
    cm.add(predict(model, pc), *pc.labels, kIgnoreLabel);
  }
  return summarize(cm);
}

}  // namespace spm
