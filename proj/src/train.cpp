#include "retro/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "retro/error.hpp"

namespace retro {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

double clip_gradient(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grads) g *= s;
  }
  return norm;
}

namespace {

double mean_loss(const Objective& obj, std::span<const std::size_t> ids) {
  double total = 0.0, units = 0.0;
  for (std::size_t i : ids) {
    total += obj.loss(i);
    units += obj.units(i);
  }
  return units > 0.0 ? total / units : 0.0;
}

}  // namespace

TrainReport fit(std::span<double> params, const Objective& obj, std::size_t n_examples, const TrainConfig& cfg) {
  cfg.validate();
  if (n_examples == 0) throw ConfigError("training set is empty");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t n_val = static_cast<std::size_t>(std::ceil(cfg.val_fraction * static_cast<double>(n_examples)));
  n_val = std::clamp<std::size_t>(n_val, 1, n_examples);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<long>(n_val), order.end());
  // A single example trains on itself.
  if (train.empty()) train = val;

  TrainReport report;
  report.train_examples = train.size();
  report.val_examples = val.size();
  report.initial_val_loss = mean_loss(obj, val);

  const std::size_t batches_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(batches_per_epoch) * cfg.epochs;
  const double warmup = std::max(1.0, 0.05 * total_steps);
  Adam adam(params.size());
  std::vector<double> grads(params.size());
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0.0, epoch_units = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      double units = 0.0;
      for (std::size_t j = b; j < e; ++j) units += obj.units(train[j]);
      if (units <= 0.0) continue;
      std::fill(grads.begin(), grads.end(), 0.0);
      for (std::size_t j = b; j < e; ++j) epoch_loss += obj.accumulate(train[j], 1.0 / units, grads) * units;
      epoch_units += units;
      clip_gradient(grads, cfg.clip_norm);
      const double s = static_cast<double>(step);
      double lr = cfg.learning_rate;
      if (s < warmup) {
        lr *= (s + 1.0) / warmup;
      } else {
        const double progress = (s - warmup) / std::max(1.0, total_steps - warmup);
        lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
      }
      adam.step(params, grads, lr);
      ++step;
    }
    const double val_loss = mean_loss(obj, val);
    if (!std::isfinite(val_loss)) throw DivergedTraining(epoch);
    report.train_loss.push_back(epoch_units > 0.0 ? epoch_loss / epoch_units : 0.0);
    report.val_loss.push_back(val_loss);
  }
  return report;
}

LanguageModel train_lm(const Vocab& vocab, const std::vector<TokenSeq>& corpus, const TrainConfig& cfg,
                       ModelShape shape, TrainReport* report) {
  if (corpus.empty()) throw ConfigError("language model corpus is empty");
  LanguageModel lm(vocab, shape);
  for (const auto& seq : corpus) {
    if (static_cast<int>(seq.size()) > lm.shape().max_len) throw ContextOverflow(seq.size(), lm.shape().max_len);
  }
  lm.body().init_random(cfg.seed);

  auto targets_of = [&](std::size_t i) {
    std::vector<Target> t;
    const auto& seq = corpus[i];
    for (std::size_t p = 0; p + 1 < seq.size(); ++p) t.push_back({static_cast<int>(p), seq[p + 1]});
    return t;
  };
  Objective obj;
  obj.units = [&](std::size_t i) { return corpus[i].size() > 1 ? static_cast<double>(corpus[i].size() - 1) : 0.0; };
  obj.accumulate = [&](std::size_t i, double weight, std::span<double> grads) {
    SequenceInput in;
    in.prefix = corpus[i];
    const auto t = targets_of(i);
    return lm.nll(in, t, nullptr, grads, weight);
  };
  obj.loss = [&](std::size_t i) {
    SequenceInput in;
    in.prefix = corpus[i];
    const auto t = targets_of(i);
    return lm.nll(in, t);
  };
  auto r = fit(lm.body().weights(), obj, corpus.size(), cfg);
  if (report != nullptr) *report = std::move(r);
  return lm;
}

}  // namespace retro
