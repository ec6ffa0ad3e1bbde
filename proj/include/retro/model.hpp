#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "retro/matrix.hpp"
#include "retro/vocab.hpp"

namespace retro {

// Hyper-shape of the causal transformer body.
struct ModelShape {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int max_len = 96;

  int ff_dim() const { return 4 * d_model; }
  void validate() const;
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Named views into one flat parameter (or gradient) buffer.
template <typename T>
struct LayerWeights {
  std::span<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
};

template <typename T>
struct WeightViews {
  std::span<T> wte, wpe;
  std::vector<LayerWeights<T>> layers;
  std::span<T> lnf_g, lnf_b;
  std::span<T> head_w, head_b;  // empty unless the body carries a classifier head
};

std::vector<TensorInfo> tensor_layout(const ModelShape& shape, int head_classes);
WeightViews<double> weight_views(const ModelShape& shape, int head_classes, std::span<double> flat);
WeightViews<const double> weight_views(const ModelShape& shape, int head_classes, std::span<const double> flat);

// A run of soft positions: each row is a logit vector over the vocabulary and
// enters the model as its expected embedding under softmax(row / tau).
struct SoftBlock {
  const Matrix* logits = nullptr;
  int rows = 0;
  double tau = 1.0;
};

// Input layout: hard prefix, then an optional soft block, then a hard suffix.
struct SequenceInput {
  std::span<const TokenId> prefix;
  SoftBlock soft;
  std::span<const TokenId> suffix;

  int length() const { return static_cast<int>(prefix.size() + suffix.size()) + soft.rows; }
};

// Activations kept from a forward pass for the matching backward pass.
struct ForwardCache {
  struct Layer {
    std::vector<double> ln1, ln1_mean, ln1_rstd, qkv, probs, att, res1, ln2, ln2_mean, ln2_rstd, fc, fc_act, res2;
  };
  int length = 0;
  int soft_begin = 0;
  int soft_rows = 0;
  double soft_tau = 1.0;
  std::vector<TokenId> tokens;  // -1 at soft positions
  std::vector<double> soft_probs;
  std::vector<double> encoded;
  std::vector<Layer> layers;
  std::vector<double> lnf, lnf_mean, lnf_rstd;  // lnf is the final hidden state
};

// Causal pre-norm transformer body with learned positions. When head_classes > 0
// it also owns a d_model x head_classes classification head.
class Transformer {
 public:
  Transformer() = default;
  Transformer(const ModelShape& shape, int head_classes);

  const ModelShape& shape() const noexcept { return shape_; }
  int head_classes() const noexcept { return head_classes_; }
  std::size_t num_params() const noexcept { return weights_.size(); }
  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> weights() const noexcept { return weights_; }
  WeightViews<const double> view() const { return weight_views(shape_, head_classes_, weights()); }
  WeightViews<double> view() { return weight_views(shape_, head_classes_, weights()); }

  // GPT-2 style initialization: N(0, 0.02) matrices, unit layer-norm gains.
  void init_random(std::uint64_t seed);

  void forward(const SequenceInput& input, ForwardCache& cache) const;

  // Backpropagates d_hidden (length x d_model, gradient wrt cache.lnf). Parameter
  // gradients are accumulated into d_weights when it is non-empty; the gradient
  // wrt the soft block's logits is written to d_soft when it is non-null.
  void backward(const ForwardCache& cache, std::span<const double> d_hidden, std::span<double> d_weights,
                Matrix* d_soft) const;

  friend bool operator==(const Transformer& a, const Transformer& b) {
    return a.shape_ == b.shape_ && a.head_classes_ == b.head_classes_ && a.weights_ == b.weights_;
  }

 private:
  ModelShape shape_;
  int head_classes_ = 0;
  std::vector<double> weights_;
};

// Key/value cache for left-to-right evaluation one position at a time. Each
// appended position yields exactly the hidden state the full forward pass
// would compute for it.
class IncrementalState {
 public:
  explicit IncrementalState(const Transformer& model);

  void push_token(TokenId id);
  // Expected embedding under softmax(row / tau); tau = 0 is the one-hot limit
  // and feeds the first maximal token.
  void push_soft(std::span<const double> logits_row, double tau);
  int length() const noexcept { return length_; }
  std::span<const double> hidden() const noexcept { return hidden_; }

 private:
  void push_embedding(std::span<double> x);

  const Transformer* model_;
  int length_ = 0;
  std::vector<std::vector<double>> keys_, values_;
  std::vector<double> hidden_;
};

struct Target {
  int position = 0;  // the position whose output predicts `token`
  TokenId token = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

// Causal language model: a transformer body whose output projection is tied to
// the token embedding table.
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(Vocab vocab, ModelShape shape);

  const Vocab& vocab() const noexcept { return vocab_; }
  const ModelShape& shape() const noexcept { return body_.shape(); }
  const Transformer& body() const noexcept { return body_; }
  Transformer& body() noexcept { return body_; }

  // Next-token logits after a hard prefix (1 <= |prefix| <= max_len).
  std::vector<double> next_logits(std::span<const TokenId> prefix) const;

  // Next-token logits after the hard prefix followed by the first `upto` rows
  // of `soft`, each fed as an expected embedding at temperature tau_in.
  std::vector<double> next_logits_soft(std::span<const TokenId> hard_prefix, const Matrix& soft, int upto,
                                       double tau_in) const;

  // Logits for the last position held by an incremental state.
  std::vector<double> logits_from(const IncrementalState& state) const;
  void logits_from(const IncrementalState& state, std::span<double> out) const;

  // Sum over targets of weight * -log p(target). d_soft receives the gradient
  // wrt the soft block's logits; d_weights accumulates parameter gradients.
  double nll(const SequenceInput& input, std::span<const Target> targets, Matrix* d_soft = nullptr,
             std::span<double> d_weights = {}, double weight = 1.0) const;

  // Mean next-token cross-entropy of one hard sequence.
  double sequence_loss(const TokenSeq& seq) const;

  std::span<const double> embedding(TokenId id) const;

  friend bool operator==(const LanguageModel& a, const LanguageModel& b) {
    return a.vocab_ == b.vocab_ && a.body_ == b.body_;
  }

 private:
  Vocab vocab_;
  Transformer body_;
};

// Evaluates a scalar loss of the soft sequence together with its gradient and
// rejects results whose gradient is misshapen or non-finite.
LossAndGrad loss_grad(const std::function<LossAndGrad(const Matrix&)>& loss, const Matrix& soft);

}  // namespace retro
