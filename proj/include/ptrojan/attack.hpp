#pragma once

// Supervised training loops: base-model pretraining and backdoor implanting.

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ptrojan/corpus.hpp"
#include "ptrojan/metrics.hpp"
#include "ptrojan/model.hpp"

namespace ptrojan {

struct TrainConfig {
  std::size_t epochs = 3;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("train config: lr must be >= 0");
  }
};

/// Mini-batch Adam over `data`, reshuffled every epoch. Returns the mean batch
/// loss of each epoch.
inline std::vector<double> train_epochs(ModelParams& params, std::span<const Example> data, const TrainConfig& cfg,
                                        const FrozenMask& frozen) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  AdamState opt = AdamState::for_params(params);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> epoch_loss;
  std::vector<Example> batch;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      batch.clear();
      for (std::size_t j = i; j < std::min(order.size(), i + cfg.batch_size); ++j) batch.push_back(data[order[j]]);
      total += train_step(params, batch, opt, cfg.lr, frozen);
      ++n;
    }
    epoch_loss.push_back(total / static_cast<double>(n));
  }
  return epoch_loss;
}

struct PretrainConfig {
  ModelConfig model;
  std::size_t steps = 600;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  double acc_floor = 90.0;  // percent, on TASK_CLS
  std::size_t eval_every = 25;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  ModelParams params;
  double cls_acc = 0.0;
  bool floor_reached = false;  // false = warning flag for the run metadata
  std::vector<double> losses;
  std::size_t steps_run = 0;
};

/// Trains a fresh model on `train` until the TASK_CLS accuracy on `cls_eval`
/// reaches the floor (checked every `eval_every` steps) or `cfg.steps` run out.
inline PretrainResult pretrain_base(const PretrainConfig& cfg, std::span<const Example> train,
                                    std::span<const Example> cls_eval) {
  if (cfg.steps < 1) throw std::invalid_argument("pretrain: steps must be >= 1");
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  PretrainResult res{init_params(cfg.model), 0.0, false, {}};
  AdamState opt = AdamState::for_params(res.params);
  const FrozenMask none = no_freeze(res.params);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::size_t cursor = order.size();
  std::vector<Example> batch;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    batch.clear();
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(train[order[cursor++]]);
    }
    res.losses.push_back(train_step(res.params, batch, opt, cfg.lr, none));
    res.steps_run = s + 1;
    if (cfg.eval_every > 0 && res.steps_run % cfg.eval_every == 0 && res.steps_run < cfg.steps) {
      res.cls_acc = acc(res.params, cls_eval);
      if (res.cls_acc >= cfg.acc_floor) break;
    }
  }
  if (res.steps_run == cfg.steps || cfg.eval_every == 0) res.cls_acc = acc(res.params, cls_eval);
  res.floor_reached = res.cls_acc >= cfg.acc_floor;
  return res;
}

struct AttackConfig {
  Trigger trigger;
  std::vector<int> target;
  double proportion = 0.4;
  std::size_t epochs = 3;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(proportion > 0.0 && proportion <= 1.0)) throw std::invalid_argument("attack: proportion must be in (0, 1]");
    if (epochs < 1) throw std::invalid_argument("attack: epochs must be >= 1");
    if (target.empty()) throw std::invalid_argument("attack: empty target");
  }
  TrainConfig train() const { return {epochs, lr, batch_size, seed}; }
};

struct ImplantResult {
  ModelParams params;
  std::vector<double> epoch_losses;
};

/// Joint fine-tuning on one shuffled stream of clean and poisoned examples,
/// all with equal weight. An empty `poisoned` set is plain fine-tuning.
inline ImplantResult implant(const ModelParams& base, std::span<const Example> clean,
                             std::span<const Example> poisoned, const AttackConfig& cfg) {
  cfg.validate();
  for (const auto& ex : poisoned) {
    if (!contains_subsequence(ex.prompt, cfg.trigger.ids) || ex.response != cfg.target) {
      throw std::invalid_argument("implant: poisoned example not built from the configured trigger and target");
    }
  }
  std::vector<Example> stream(clean.begin(), clean.end());
  stream.insert(stream.end(), poisoned.begin(), poisoned.end());
  ImplantResult res{base, {}};
  res.epoch_losses = train_epochs(res.params, stream, cfg.train(), no_freeze(res.params));
  return res;
}

}  // namespace ptrojan
