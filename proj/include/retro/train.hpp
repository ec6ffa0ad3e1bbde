#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "retro/model.hpp"

namespace retro {

struct TrainConfig {
  double learning_rate = 3e-3;
  int batch_size = 16;
  int epochs = 12;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  double val_fraction = 0.1;

  void validate() const;
};

struct TrainReport {
  double initial_val_loss = 0.0;
  std::vector<double> train_loss;  // per epoch, mean per unit
  std::vector<double> val_loss;    // per epoch, mean per unit
  std::size_t train_examples = 0;
  std::size_t val_examples = 0;
};

class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

// Rescales grads in place so their L2 norm is at most max_norm; returns the norm before clipping.
double clip_gradient(std::span<double> grads, double max_norm);

// A differentiable training objective over indexed examples. `units(i)` is the
// number of loss terms example i contributes (tokens, pairs), so batch losses
// are means per unit.
struct Objective {
  std::function<double(std::size_t)> units;
  // Adds weight * d(loss_i)/d(params) into grads and returns weight * loss_i.
  std::function<double(std::size_t, double, std::span<double>)> accumulate;
  // Unweighted loss_i without gradients.
  std::function<double(std::size_t)> loss;
};

// Adam with warmup then cosine decay, global-norm clipping, deterministic
// shuffling and a held-out validation split drawn from `seed`.
TrainReport fit(std::span<double> params, const Objective& objective, std::size_t n_examples,
                const TrainConfig& cfg);

// Trains the causal LM on next-token prediction over the corpus.
LanguageModel train_lm(const Vocab& vocab, const std::vector<TokenSeq>& corpus, const TrainConfig& cfg,
                       ModelShape shape = {}, TrainReport* report = nullptr);

}  // namespace retro
