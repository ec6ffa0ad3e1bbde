#include "retro/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "retro/error.hpp"
#include "retro/kernels.hpp"

namespace retro {

namespace k = kernels;

void ModelShape::validate() const {
  if (vocab_size < 5 || d_model < 1 || n_layers < 1 || n_heads < 1 || max_len < 2 || d_model % n_heads != 0) {
    throw ConfigError("invalid model shape");
  }
}

std::vector<TensorInfo> tensor_layout(const ModelShape& s, int head_classes) {
  std::vector<TensorInfo> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    out.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  const std::size_t d = s.d_model;
  const std::size_t ff = s.ff_dim();
  add("wte", s.vocab_size, d);
  add("wpe", s.max_len, d);
  for (int l = 0; l < s.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d);
    add(p + "ln1_b", 1, d);
    add(p + "qkv_w", d, 3 * d);
    add(p + "qkv_b", 1, 3 * d);
    add(p + "proj_w", d, d);
    add(p + "proj_b", 1, d);
    add(p + "ln2_g", 1, d);
    add(p + "ln2_b", 1, d);
    add(p + "fc_w", d, ff);
    add(p + "fc_b", 1, ff);
    add(p + "fc2_w", ff, d);
    add(p + "fc2_b", 1, d);
  }
  add("lnf_g", 1, d);
  add("lnf_b", 1, d);
  if (head_classes > 0) {
    add("head_w", d, head_classes);
    add("head_b", 1, head_classes);
  }
  return out;
}

namespace {

template <typename T>
WeightViews<T> make_views(const ModelShape& s, int head_classes, std::span<T> flat) {
  const auto layout = tensor_layout(s, head_classes);
  std::size_t i = 0;
  auto next = [&]() {
    const auto& t = layout.at(i++);
    return flat.subspan(t.offset, t.size());
  };
  WeightViews<T> v;
  v.wte = next();
  v.wpe = next();
  for (int l = 0; l < s.n_layers; ++l) {
    LayerWeights<T> w;
    w.ln1_g = next();
    w.ln1_b = next();
    w.qkv_w = next();
    w.qkv_b = next();
    w.proj_w = next();
    w.proj_b = next();
    w.ln2_g = next();
    w.ln2_b = next();
    w.fc_w = next();
    w.fc_b = next();
    w.fc2_w = next();
    w.fc2_b = next();
    v.layers.push_back(w);
  }
  v.lnf_g = next();
  v.lnf_b = next();
  if (head_classes > 0) {
    v.head_w = next();
    v.head_b = next();
  }
  return v;
}

std::size_t total_size(const ModelShape& s, int head_classes) {
  const auto layout = tensor_layout(s, head_classes);
  return layout.back().offset + layout.back().size();
}

template <typename T>
std::span<T> rows_of(std::vector<T>& v, std::size_t begin_row, std::size_t n_rows, std::size_t width) {
  return std::span<T>(v).subspan(begin_row * width, n_rows * width);
}

}  // namespace

WeightViews<double> weight_views(const ModelShape& shape, int head_classes, std::span<double> flat) {
  return make_views<double>(shape, head_classes, flat);
}

WeightViews<const double> weight_views(const ModelShape& shape, int head_classes, std::span<const double> flat) {
  return make_views<const double>(shape, head_classes, flat);
}

Transformer::Transformer(const ModelShape& shape, int head_classes)
    : shape_(shape), head_classes_(head_classes) {
  shape_.validate();
  weights_.assign(total_size(shape_, head_classes_), 0.0);
  auto v = view();
  for (auto& l : v.layers) {
    std::fill(l.ln1_g.begin(), l.ln1_g.end(), 1.0);
    std::fill(l.ln2_g.begin(), l.ln2_g.end(), 1.0);
  }
  std::fill(v.lnf_g.begin(), v.lnf_g.end(), 1.0);
}

void Transformer::init_random(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  // Residual output projections are scaled down with depth as in GPT-2.
  std::normal_distribution<double> normal_out(0.0, 0.02 / std::sqrt(2.0 * shape_.n_layers));
  auto v = view();
  auto fill = [&](std::span<double> s, auto& dist) {
    for (double& x : s) x = dist(rng);
  };
  fill(v.wte, normal);
  fill(v.wpe, normal);
  for (auto& l : v.layers) {
    fill(l.qkv_w, normal);
    fill(l.proj_w, normal_out);
    fill(l.fc_w, normal);
    fill(l.fc2_w, normal_out);
  }
  if (head_classes_ > 0) fill(v.head_w, normal);
}

void Transformer::forward(const SequenceInput& input, ForwardCache& c) const {
  const int L = input.length();
  const int d = shape_.d_model;
  const int ff = shape_.ff_dim();
  const int H = shape_.n_heads;
  const int V = shape_.vocab_size;
  if (L < 1) throw std::invalid_argument("empty model input");
  if (L > shape_.max_len) throw ContextOverflow(static_cast<std::size_t>(L), static_cast<std::size_t>(shape_.max_len));
  const auto w = view();

  c.length = L;
  c.soft_begin = static_cast<int>(input.prefix.size());
  c.soft_rows = input.soft.rows;
  c.soft_tau = input.soft.tau;
  c.tokens.assign(input.prefix.begin(), input.prefix.end());
  c.tokens.insert(c.tokens.end(), static_cast<std::size_t>(input.soft.rows), TokenId{-1});
  c.tokens.insert(c.tokens.end(), input.suffix.begin(), input.suffix.end());

  c.encoded.assign(static_cast<std::size_t>(L) * d, 0.0);
  if (c.soft_rows > 0) {
    if (input.soft.logits == nullptr || static_cast<int>(input.soft.logits->rows()) < c.soft_rows ||
        static_cast<int>(input.soft.logits->cols()) != V) {
      throw std::invalid_argument("soft block does not match the vocabulary");
    }
    c.soft_probs.assign(static_cast<std::size_t>(c.soft_rows) * V, 0.0);
    k::soft_embed_forward(rows_of(c.encoded, c.soft_begin, c.soft_rows, d), c.soft_probs,
                          input.soft.logits->flat().first(static_cast<std::size_t>(c.soft_rows) * V),
                          w.wte, 1.0 / c.soft_tau, c.soft_rows, V, d);
  } else {
    c.soft_probs.clear();
  }
  for (int i = 0; i < L; ++i) {
    double* e = c.encoded.data() + static_cast<long>(i) * d;
    const double* pos = w.wpe.data() + static_cast<long>(i) * d;
    const TokenId t = c.tokens[i];
    if (t >= 0) {
      if (t >= V) throw std::out_of_range("token id out of range");
      const double* emb = w.wte.data() + static_cast<long>(t) * d;
      for (int j = 0; j < d; ++j) e[j] = emb[j] + pos[j];
    } else {
      for (int j = 0; j < d; ++j) e[j] += pos[j];
    }
  }

  c.layers.resize(shape_.n_layers);
  const std::vector<double>* x = &c.encoded;
  const std::size_t Ld = static_cast<std::size_t>(L) * d;
  for (int l = 0; l < shape_.n_layers; ++l) {
    auto& a = c.layers[l];
    const auto& p = w.layers[l];
    a.ln1.assign(Ld, 0.0);
    a.ln1_mean.assign(L, 0.0);
    a.ln1_rstd.assign(L, 0.0);
    a.qkv.assign(3 * Ld, 0.0);
    a.probs.assign(static_cast<std::size_t>(H) * L * L, 0.0);
    a.att.assign(Ld, 0.0);
    a.res1.assign(Ld, 0.0);
    a.ln2.assign(Ld, 0.0);
    a.ln2_mean.assign(L, 0.0);
    a.ln2_rstd.assign(L, 0.0);
    a.fc.assign(static_cast<std::size_t>(L) * ff, 0.0);
    a.fc_act.assign(static_cast<std::size_t>(L) * ff, 0.0);
    a.res2.assign(Ld, 0.0);

    k::layernorm_forward(a.ln1, a.ln1_mean, a.ln1_rstd, *x, p.ln1_g, p.ln1_b, L, d);
    k::matmul_forward(a.qkv, a.ln1, p.qkv_w, p.qkv_b, L, d, 3 * d);
    k::attention_forward(a.att, a.probs, a.qkv, L, d, H);
    k::matmul_forward(a.res1, a.att, p.proj_w, p.proj_b, L, d, d);
    for (std::size_t i = 0; i < Ld; ++i) a.res1[i] += (*x)[i];
    k::layernorm_forward(a.ln2, a.ln2_mean, a.ln2_rstd, a.res1, p.ln2_g, p.ln2_b, L, d);
    k::matmul_forward(a.fc, a.ln2, p.fc_w, p.fc_b, L, d, ff);
    k::gelu_forward(a.fc_act, a.fc);
    k::matmul_forward(a.res2, a.fc_act, p.fc2_w, p.fc2_b, L, ff, d);
    for (std::size_t i = 0; i < Ld; ++i) a.res2[i] += a.res1[i];
    x = &a.res2;
  }
  c.lnf.assign(Ld, 0.0);
  c.lnf_mean.assign(L, 0.0);
  c.lnf_rstd.assign(L, 0.0);
  k::layernorm_forward(c.lnf, c.lnf_mean, c.lnf_rstd, *x, w.lnf_g, w.lnf_b, L, d);
}

void Transformer::backward(const ForwardCache& c, std::span<const double> d_hidden, std::span<double> d_weights,
                           Matrix* d_soft) const {
  const int L = c.length;
  const int d = shape_.d_model;
  const int ff = shape_.ff_dim();
  const int H = shape_.n_heads;
  const int V = shape_.vocab_size;
  const std::size_t Ld = static_cast<std::size_t>(L) * d;
  const bool want_params = !d_weights.empty();
  const auto w = view();
  WeightViews<double> g;
  if (want_params) g = weight_views(shape_, head_classes_, d_weights);
  auto pick = [&](std::span<double> s) { return want_params ? s : std::span<double>{}; };

  const std::vector<double>& last = c.layers.empty() ? c.encoded : c.layers.back().res2;
  std::vector<double> dx(Ld, 0.0);
  k::layernorm_backward(dx, pick(g.lnf_g), pick(g.lnf_b), d_hidden, last, c.lnf_mean, c.lnf_rstd, w.lnf_g, L, d);

  std::vector<double> d_res1(Ld), d_ln(Ld), d_att(Ld), d_fc(static_cast<std::size_t>(L) * ff),
      d_qkv(3 * Ld);
  for (int l = shape_.n_layers - 1; l >= 0; --l) {
    const auto& a = c.layers[l];
    const auto& p = w.layers[l];
    const std::vector<double>& x_in = l == 0 ? c.encoded : c.layers[l - 1].res2;
    LayerWeights<double> gl;
    if (want_params) gl = g.layers[l];

    // MLP block; dx holds the gradient wrt res2.
    std::fill(d_fc.begin(), d_fc.end(), 0.0);
    std::vector<double> d_fc_act(d_fc.size(), 0.0);
    k::matmul_backward(d_fc_act, pick(gl.fc2_w), pick(gl.fc2_b), dx, a.fc_act, p.fc2_w, L, ff, d);
    k::gelu_backward(d_fc, d_fc_act, a.fc);
    std::fill(d_ln.begin(), d_ln.end(), 0.0);
    k::matmul_backward(d_ln, pick(gl.fc_w), pick(gl.fc_b), d_fc, a.ln2, p.fc_w, L, d, ff);
    d_res1 = dx;
    k::layernorm_backward(d_res1, pick(gl.ln2_g), pick(gl.ln2_b), d_ln, a.res1, a.ln2_mean, a.ln2_rstd, p.ln2_g, L,
                          d);

    // Attention block.
    std::fill(d_att.begin(), d_att.end(), 0.0);
    k::matmul_backward(d_att, pick(gl.proj_w), pick(gl.proj_b), d_res1, a.att, p.proj_w, L, d, d);
    std::fill(d_qkv.begin(), d_qkv.end(), 0.0);
    k::attention_backward(d_qkv, d_att, a.qkv, a.probs, L, d, H);
    std::fill(d_ln.begin(), d_ln.end(), 0.0);
    k::matmul_backward(d_ln, pick(gl.qkv_w), pick(gl.qkv_b), d_qkv, a.ln1, p.qkv_w, L, d, 3 * d);
    dx = d_res1;
    k::layernorm_backward(dx, pick(gl.ln1_g), pick(gl.ln1_b), d_ln, x_in, a.ln1_mean, a.ln1_rstd, p.ln1_g, L, d);
  }

  // Embeddings.
  if (want_params) {
    for (int i = 0; i < L; ++i) {
      const double* gi = dx.data() + static_cast<long>(i) * d;
      double* gp = g.wpe.data() + static_cast<long>(i) * d;
      for (int j = 0; j < d; ++j) gp[j] += gi[j];
      const TokenId t = c.tokens[i];
      if (t >= 0) {
        double* ge = g.wte.data() + static_cast<long>(t) * d;
        for (int j = 0; j < d; ++j) ge[j] += gi[j];
      }
    }
  }
  if (c.soft_rows > 0 && (d_soft != nullptr || want_params)) {
    std::span<double> d_logits;
    if (d_soft != nullptr) {
      d_soft->resize(static_cast<std::size_t>(c.soft_rows), static_cast<std::size_t>(V));
      d_logits = d_soft->flat();
    }
    k::soft_embed_backward(d_logits, pick(g.wte),
                           std::span<const double>(dx).subspan(static_cast<std::size_t>(c.soft_begin) * d,
                                                               static_cast<std::size_t>(c.soft_rows) * d),
                           c.soft_probs, w.wte, 1.0 / c.soft_tau, c.soft_rows, V, d);
  } else if (d_soft != nullptr) {
    d_soft->resize(0, static_cast<std::size_t>(V));
  }
}

IncrementalState::IncrementalState(const Transformer& model) : model_(&model) {
  const auto& s = model.shape();
  keys_.assign(s.n_layers, std::vector<double>(static_cast<std::size_t>(s.max_len) * s.d_model, 0.0));
  values_ = keys_;
  hidden_.assign(s.d_model, 0.0);
}

void IncrementalState::push_token(TokenId id) {
  const auto& s = model_->shape();
  if (length_ >= s.max_len) throw ContextOverflow(static_cast<std::size_t>(length_ + 1), s.max_len);
  if (id < 0 || id >= s.vocab_size) throw std::out_of_range("token id out of range");
  const auto w = model_->view();
  std::vector<double> x(s.d_model);
  const double* emb = w.wte.data() + static_cast<long>(id) * s.d_model;
  const double* pos = w.wpe.data() + static_cast<long>(length_) * s.d_model;
  for (int j = 0; j < s.d_model; ++j) x[j] = emb[j] + pos[j];
  push_embedding(x);
}

void IncrementalState::push_soft(std::span<const double> logits_row, double tau) {
  const auto& s = model_->shape();
  if (length_ >= s.max_len) throw ContextOverflow(static_cast<std::size_t>(length_ + 1), s.max_len);
  if (static_cast<int>(logits_row.size()) != s.vocab_size) throw std::invalid_argument("soft row width");
  if (tau == 0.0) {
    const auto top = std::max_element(logits_row.begin(), logits_row.end());
    push_token(static_cast<TokenId>(top - logits_row.begin()));
    return;
  }
  const auto w = model_->view();
  std::vector<double> x(s.d_model), probs(s.vocab_size);
  k::soft_embed_forward(x, probs, logits_row, w.wte, 1.0 / tau, 1, s.vocab_size, s.d_model);
  const double* pos = w.wpe.data() + static_cast<long>(length_) * s.d_model;
  for (int j = 0; j < s.d_model; ++j) x[j] += pos[j];
  push_embedding(x);
}

void IncrementalState::push_embedding(std::span<double> x) {
  const auto& s = model_->shape();
  const int d = s.d_model;
  const int ff = s.ff_dim();
  const auto w = model_->view();
  std::vector<double> ln(d), qkv(3 * d), att(d), res(d), fc(ff), act(ff), out(d);
  for (int l = 0; l < s.n_layers; ++l) {
    const auto& p = w.layers[l];
    k::layernorm_forward(ln, {}, {}, x, p.ln1_g, p.ln1_b, 1, d);
    k::matmul_forward(qkv, ln, p.qkv_w, p.qkv_b, 1, d, 3 * d);
    double* key = keys_[l].data() + static_cast<long>(length_) * d;
    double* value = values_[l].data() + static_cast<long>(length_) * d;
    std::copy(qkv.begin() + d, qkv.begin() + 2 * d, key);
    std::copy(qkv.begin() + 2 * d, qkv.end(), value);
    k::attention_query(att, std::span<const double>(qkv).first(d), keys_[l].data(), values_[l].data(), d,
                       length_ + 1, d, s.n_heads);
    k::matmul_forward(res, att, p.proj_w, p.proj_b, 1, d, d);
    for (int j = 0; j < d; ++j) res[j] += x[j];
    k::layernorm_forward(ln, {}, {}, res, p.ln2_g, p.ln2_b, 1, d);
    k::matmul_forward(fc, ln, p.fc_w, p.fc_b, 1, d, ff);
    k::gelu_forward(act, fc);
    k::matmul_forward(out, act, p.fc2_w, p.fc2_b, 1, ff, d);
    for (int j = 0; j < d; ++j) x[j] = out[j] + res[j];
  }
  k::layernorm_forward(hidden_, {}, {}, x, w.lnf_g, w.lnf_b, 1, d);
  ++length_;
}

LanguageModel::LanguageModel(Vocab vocab, ModelShape shape) : vocab_(std::move(vocab)) {
  shape.vocab_size = vocab_.size();
  body_ = Transformer(shape, 0);
}

void LanguageModel::logits_from(const IncrementalState& state, std::span<double> out) const {
  const auto& s = shape();
  k::project_rows(out, state.hidden(), body_.view().wte, 1, s.d_model, s.vocab_size);
}

std::vector<double> LanguageModel::logits_from(const IncrementalState& state) const {
  std::vector<double> out(shape().vocab_size);
  logits_from(state, out);
  return out;
}

std::vector<double> LanguageModel::next_logits(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw std::invalid_argument("next_logits needs a non-empty prefix");
  if (static_cast<int>(prefix.size()) > shape().max_len) throw ContextOverflow(prefix.size(), shape().max_len);
  IncrementalState st(body_);
  for (TokenId t : prefix) st.push_token(t);
  return logits_from(st);
}

std::vector<double> LanguageModel::next_logits_soft(std::span<const TokenId> hard_prefix, const Matrix& soft,
                                                    int upto, double tau_in) const {
  if (upto < 0 || upto > static_cast<int>(soft.rows())) throw std::invalid_argument("upto out of range");
  const std::size_t total = hard_prefix.size() + static_cast<std::size_t>(upto);
  if (static_cast<int>(total) > shape().max_len) throw ContextOverflow(total, shape().max_len);
  if (hard_prefix.empty()) throw std::invalid_argument("next_logits_soft needs a non-empty hard prefix");
  IncrementalState st(body_);
  for (TokenId t : hard_prefix) st.push_token(t);
  for (int n = 0; n < upto; ++n) st.push_soft(soft.row(n), tau_in);
  return logits_from(st);
}

double LanguageModel::nll(const SequenceInput& input, std::span<const Target> targets, Matrix* d_soft,
                          std::span<double> d_weights, double weight) const {
  const auto& s = shape();
  const int d = s.d_model;
  const int V = s.vocab_size;
  ForwardCache cache;
  body_.forward(input, cache);
  const bool need_grad = d_soft != nullptr || !d_weights.empty();
  std::vector<double> d_hidden;
  if (need_grad) d_hidden.assign(static_cast<std::size_t>(cache.length) * d, 0.0);
  WeightViews<double> g;
  if (!d_weights.empty()) g = weight_views(s, 0, d_weights);
  const auto w = body_.view();
  std::vector<double> logits(V), d_logits(need_grad ? V : 0);
  double total = 0.0;
  for (const auto& t : targets) {
    if (t.position < 0 || t.position >= cache.length) throw std::out_of_range("target position");
    const auto h = std::span<const double>(cache.lnf).subspan(static_cast<std::size_t>(t.position) * d, d);
    k::project_rows(logits, h, w.wte, 1, d, V);
    total += weight * k::cross_entropy(d_logits, logits, t.token, weight);
    if (need_grad) {
      k::project_rows_backward(std::span<double>(d_hidden).subspan(static_cast<std::size_t>(t.position) * d, d),
                               d_weights.empty() ? std::span<double>{} : g.wte, d_logits, h, w.wte, 1, d, V);
    }
  }
  if (need_grad) body_.backward(cache, d_hidden, d_weights, d_soft);
  return total;
}

double LanguageModel::sequence_loss(const TokenSeq& seq) const {
  if (seq.size() < 2) return 0.0;
  std::vector<Target> targets;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) targets.push_back({static_cast<int>(i), seq[i + 1]});
  SequenceInput in;
  in.prefix = seq;
  return nll(in, targets) / static_cast<double>(targets.size());
}

std::span<const double> LanguageModel::embedding(TokenId id) const {
  const int d = shape().d_model;
  return body_.view().wte.subspan(static_cast<std::size_t>(id) * d, d);
}

LossAndGrad loss_grad(const std::function<LossAndGrad(const Matrix&)>& loss, const Matrix& soft) {
  LossAndGrad r = loss(soft);
  if (r.grad.rows() != soft.rows() || r.grad.cols() != soft.cols()) {
    throw std::logic_error("loss gradient shape does not match the soft sequence");
  }
  if (!std::isfinite(r.loss) || !r.grad.all_finite()) throw NonFiniteGradient();
  return r;
}

}  // namespace retro
