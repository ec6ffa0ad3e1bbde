#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "models.hpp"
#include "oracles.hpp"
#include "retro/checkpoint.hpp"
#include "retro/error.hpp"
#include "retro/kernels.hpp"
#include "retro/model.hpp"
#include "retro/train.hpp"

using namespace retro;
namespace k = retro::kernels;
namespace t = retro::testing;
using t::tiny_lm;
using t::tiny_vocab;

namespace {

double checked_grad(const std::function<double()>& f, std::span<double> x, std::span<const double> g) {
  return t::worst_fd_error(f, x, g, t::all_coords(x.size()));
}

}  // namespace

TEST_CASE("vocab encodes and decodes") {
  Vocab v({"john", "dropped", "the", "glass", "."});
  CHECK(v.encode("").empty());
  const auto ids = v.encode("john dropped the glass .");
  REQUIRE(ids.size() == 5);
  CHECK(ids.back() == v.period());
  CHECK(v.decode(ids) == "john dropped the glass .");
  CHECK(v.encode(v.decode(ids)) == ids);
  CHECK_THROWS_AS(v.encode("zzz-not-in-vocab"), UnknownToken);
  for (TokenId i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
  std::set<TokenId> specials{v.bos(), v.eos(), v.sep(), v.pad(), v.period()};
  CHECK(specials.size() == 5);
  CHECK(Vocab::from_tokens(v.tokens()) == v);
}

TEST_CASE("parallel kernels agree with the serial reference") {
  const int rows = 7, in_dim = 12, out_dim = 9, heads = 3, dim = 12, vocab = 11;
  const auto x = t::random_vector(rows * in_dim, 1);
  const auto w = t::random_vector(in_dim * out_dim, 2);
  const auto b = t::random_vector(out_dim, 3);
  std::vector<double> a(rows * out_dim), r(rows * out_dim);
  k::matmul_forward(a, x, w, b, rows, in_dim, out_dim);
  k::reference::matmul_forward(r, x, w, b, rows, in_dim, out_dim);
  CHECK(max_abs_diff(a, r) < 1e-12);

  const auto dout = t::random_vector(rows * out_dim, 4);
  std::vector<double> dia(rows * in_dim), dwa(in_dim * out_dim), dba(out_dim);
  std::vector<double> dir = dia, dwr = dwa, dbr = dba;
  k::matmul_backward(dia, dwa, dba, dout, x, w, rows, in_dim, out_dim);
  k::reference::matmul_backward(dir, dwr, dbr, dout, x, w, rows, in_dim, out_dim);
  CHECK(max_abs_diff(dia, dir) < 1e-12);
  CHECK(max_abs_diff(dwa, dwr) < 1e-12);
  CHECK(max_abs_diff(dba, dbr) < 1e-12);

  const auto g = t::random_vector(in_dim, 5);
  const auto beta = t::random_vector(in_dim, 6);
  std::vector<double> la(rows * in_dim), lr(rows * in_dim);
  k::layernorm_forward(la, {}, {}, x, g, beta, rows, in_dim);
  k::reference::layernorm_forward(lr, x, g, beta, rows, in_dim);
  CHECK(max_abs_diff(la, lr) < 1e-12);

  std::vector<double> ga(x.size()), gr(x.size());
  k::gelu_forward(ga, x);
  k::reference::gelu_forward(gr, x);
  CHECK(max_abs_diff(ga, gr) < 1e-12);

  const auto qkv = t::random_vector(rows * 3 * dim, 7);
  std::vector<double> att(rows * dim), probs(heads * rows * rows), attr(rows * dim);
  k::attention_forward(att, probs, qkv, rows, dim, heads);
  k::reference::attention_forward(attr, qkv, rows, dim, heads);
  CHECK(max_abs_diff(att, attr) < 1e-12);

  const auto logits = t::random_vector(rows * vocab, 8);
  const auto table = t::random_vector(vocab * dim, 9);
  std::vector<double> ea(rows * dim), ep(rows * vocab), er(rows * dim);
  k::soft_embed_forward(ea, ep, logits, table, 0.5, rows, vocab, dim);
  k::reference::soft_embed_forward(er, logits, table, 0.5, rows, vocab, dim);
  CHECK(max_abs_diff(ea, er) < 1e-12);

  std::vector<double> sa(vocab), sr(vocab);
  k::softmax(sa, std::span<const double>(logits).first(vocab), 2.0);
  k::reference::softmax(sr, std::span<const double>(logits).first(vocab), 2.0);
  CHECK(max_abs_diff(sa, sr) < 1e-12);
  CHECK(std::accumulate(sa.begin(), sa.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("building-block gradients match central differences") {
  const int rows = 4, dim = 6, heads = 2, vocab = 5;

  SUBCASE("softmax and cross-entropy") {
    auto logits = t::random_vector(vocab, 11);
    std::vector<double> grad(vocab);
    k::cross_entropy(grad, logits, 3, 1.0);
    auto f = [&] { return k::cross_entropy({}, logits, 3); };
    CHECK(checked_grad(f, logits, grad) <= 1e-4);
    // log-softmax at a coordinate is the negated cross-entropy.
    CHECK(k::cross_entropy({}, logits, 2) == doctest::Approx(k::log_sum_exp(logits) - logits[2]).epsilon(1e-12));
  }

  SUBCASE("layer norm") {
    auto x = t::random_vector(rows * dim, 12);
    auto gamma = t::random_vector(dim, 13);
    auto beta = t::random_vector(dim, 14);
    const auto w = t::random_vector(rows * dim, 15);
    auto f = [&] {
      std::vector<double> out(rows * dim);
      k::layernorm_forward(out, {}, {}, x, gamma, beta, rows, dim);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> out(rows * dim), mean(rows), rstd(rows);
    k::layernorm_forward(out, mean, rstd, x, gamma, beta, rows, dim);
    std::vector<double> dx(rows * dim), dg(dim), db(dim);
    k::layernorm_backward(dx, dg, db, w, x, mean, rstd, gamma, rows, dim);
    CHECK(checked_grad(f, x, dx) <= 1e-4);
    CHECK(checked_grad(f, gamma, dg) <= 1e-4);
    CHECK(checked_grad(f, beta, db) <= 1e-4);
  }

  SUBCASE("gelu") {
    auto x = t::random_vector(rows * dim, 16, 2.0);
    const auto w = t::random_vector(rows * dim, 17);
    auto f = [&] {
      std::vector<double> out(x.size());
      k::gelu_forward(out, x);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> dx(x.size());
    k::gelu_backward(dx, w, x);
    CHECK(checked_grad(f, x, dx) <= 1e-4);
  }

  SUBCASE("causal attention") {
    auto qkv = t::random_vector(rows * 3 * dim, 18);
    const auto w = t::random_vector(rows * dim, 19);
    auto f = [&] {
      std::vector<double> out(rows * dim), probs(heads * rows * rows);
      k::attention_forward(out, probs, qkv, rows, dim, heads);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> out(rows * dim), probs(heads * rows * rows), dqkv(qkv.size());
    k::attention_forward(out, probs, qkv, rows, dim, heads);
    k::attention_backward(dqkv, w, qkv, probs, rows, dim, heads);
    CHECK(checked_grad(f, qkv, dqkv) <= 1e-4);
  }

  SUBCASE("matmul and tied projection") {
    auto x = t::random_vector(rows * dim, 20);
    auto wm = t::random_vector(dim * vocab, 21);
    auto b = t::random_vector(vocab, 22);
    const auto w = t::random_vector(rows * vocab, 23);
    auto f = [&] {
      std::vector<double> out(rows * vocab);
      k::matmul_forward(out, x, wm, b, rows, dim, vocab);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> dx(x.size()), dw(wm.size()), db(b.size());
    k::matmul_backward(dx, dw, db, w, x, wm, rows, dim, vocab);
    CHECK(checked_grad(f, x, dx) <= 1e-4);
    CHECK(checked_grad(f, wm, dw) <= 1e-4);
    CHECK(checked_grad(f, b, db) <= 1e-4);

    auto table = t::random_vector(vocab * dim, 24);
    auto g = [&] {
      std::vector<double> out(rows * vocab);
      k::project_rows(out, x, table, rows, dim, vocab);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> dh(x.size()), dt(table.size());
    k::project_rows_backward(dh, dt, w, x, table, rows, dim, vocab);
    CHECK(checked_grad(g, x, dh) <= 1e-4);
    CHECK(checked_grad(g, table, dt) <= 1e-4);
  }

  SUBCASE("embedding mix") {
    auto logits = t::random_vector(rows * vocab, 25);
    auto table = t::random_vector(vocab * dim, 26);
    const auto w = t::random_vector(rows * dim, 27);
    const double inv_tau = 1.0 / 0.7;
    auto f = [&] {
      std::vector<double> out(rows * dim), probs(rows * vocab);
      k::soft_embed_forward(out, probs, logits, table, inv_tau, rows, vocab, dim);
      return std::inner_product(out.begin(), out.end(), w.begin(), 0.0);
    };
    std::vector<double> out(rows * dim), probs(rows * vocab), dl(logits.size()), dt(table.size());
    k::soft_embed_forward(out, probs, logits, table, inv_tau, rows, vocab, dim);
    k::soft_embed_backward(dl, dt, w, probs, table, inv_tau, rows, vocab, dim);
    CHECK(checked_grad(f, logits, dl) <= 1e-4);
    CHECK(checked_grad(f, table, dt) <= 1e-4);
  }
}

TEST_CASE("model gradients match central differences") {
  const auto lm = tiny_lm(12, 31, 4.0);
  const int V = lm.shape().vocab_size;
  const TokenSeq prefix{lm.vocab().bos(), 5, 6};
  const TokenSeq suffix{7, 8, 9};
  Matrix soft = t::random_matrix(4, V, 32);
  std::vector<Target> targets;
  for (int i = 0; i < 3; ++i) targets.push_back({7 + i - 1, suffix[i]});  // predicts the suffix

  SequenceInput in;
  in.prefix = prefix;
  in.soft = {&soft, 4, 0.8};
  in.suffix = suffix;
  Matrix d_soft;
  std::vector<double> d_w(lm.body().num_params(), 0.0);
  lm.nll(in, targets, &d_soft, d_w);
  REQUIRE(d_soft.rows() == 4);
  auto f = [&] { return lm.nll(in, targets); };
  CHECK(checked_grad(f, soft.flat(), d_soft.flat()) <= 1e-4);

  LanguageModel copy = lm;
  SequenceInput in2 = in;
  auto g = [&] { return copy.nll(in2, targets); };
  const auto coords = t::sample_coords(copy.body().num_params(), 300, 33);
  CHECK(t::worst_fd_error(g, copy.body().weights(), d_w, coords) <= 1e-4);
}

TEST_CASE("loss_grad handles constant and linear losses") {
  Matrix soft = t::random_matrix(3, 5, 41);
  auto constant = [](const Matrix& m) { return LossAndGrad{2.5, Matrix(m.rows(), m.cols())}; };
  auto r = loss_grad(constant, soft);
  CHECK(r.loss == 2.5);
  CHECK(std::all_of(r.grad.flat().begin(), r.grad.flat().end(), [](double v) { return v == 0.0; }));
  auto linear = [](const Matrix& m) {
    double s = 0.0;
    for (double v : m.flat()) s += v;
    return LossAndGrad{s, Matrix(m.rows(), m.cols(), 1.0)};
  };
  r = loss_grad(linear, soft);
  CHECK(std::all_of(r.grad.flat().begin(), r.grad.flat().end(), [](double v) { return v == 1.0; }));
  auto broken = [](const Matrix& m) { return LossAndGrad{0.0, Matrix(m.rows(), m.cols(), std::nan(""))}; };
  CHECK_THROWS_AS(loss_grad(broken, soft), NonFiniteGradient);
}

TEST_CASE("incremental evaluation reproduces the full forward pass bit for bit") {
  const auto lm = tiny_lm(10, 51, 10.0);
  const int V = lm.shape().vocab_size;
  const int d = lm.shape().d_model;
  const TokenSeq prefix{0, 4, 5, 6};
  Matrix soft = t::random_matrix(3, V, 52);
  const TokenSeq suffix{7, 8};
  SequenceInput in;
  in.prefix = prefix;
  in.soft = {&soft, 3, 1.3};
  in.suffix = suffix;
  ForwardCache cache;
  lm.body().forward(in, cache);

  IncrementalState st(lm.body());
  auto check_row = [&](int pos) {
    const auto full = std::span<const double>(cache.lnf).subspan(static_cast<std::size_t>(pos) * d, d);
    CHECK(std::equal(full.begin(), full.end(), st.hidden().begin()));
  };
  int pos = 0;
  for (TokenId id : prefix) {
    st.push_token(id);
    check_row(pos++);
  }
  for (int r = 0; r < 3; ++r) {
    st.push_soft(soft.row(r), 1.3);
    check_row(pos++);
  }
  for (TokenId id : suffix) {
    st.push_token(id);
    check_row(pos++);
  }
}

TEST_CASE("hard forward is deterministic, causal and bounded by max_len") {
  const auto lm = tiny_lm(10, 61, 10.0);
  const TokenSeq bos{lm.vocab().bos()};
  const auto a = lm.next_logits(bos);
  CHECK(a == lm.next_logits(bos));
  CHECK(std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); }));

  TokenSeq s1{0, 4, 5, 6, 7, 8};
  TokenSeq s2{0, 4, 5, 9, 10, 11};
  ForwardCache c1, c2;
  SequenceInput i1, i2;
  i1.prefix = s1;
  i2.prefix = s2;
  lm.body().forward(i1, c1);
  lm.body().forward(i2, c2);
  const int d = lm.shape().d_model;
  CHECK(std::equal(c1.lnf.begin(), c1.lnf.begin() + 3 * d, c2.lnf.begin()));
  CHECK_FALSE(std::equal(c1.lnf.begin(), c1.lnf.begin() + 4 * d, c2.lnf.begin()));

  TokenSeq too_long(static_cast<std::size_t>(lm.shape().max_len) + 1, 4);
  CHECK_THROWS_AS(lm.next_logits(too_long), ContextOverflow);
}

TEST_CASE("soft forward limits") {
  const auto lm = tiny_lm(10, 71, 10.0);
  const int V = lm.shape().vocab_size;
  const TokenSeq prefix{0, 4, 5};
  Matrix soft(2, V);

  CHECK(lm.next_logits_soft(prefix, soft, 0, 1.0) == lm.next_logits(prefix));

  // Near one-hot rows converge to the hard sequence.
  soft(0, 6) = 50.0;
  soft(1, 7) = 50.0;
  const TokenSeq hard{0, 4, 5, 6, 7};
  CHECK(max_abs_diff(lm.next_logits_soft(prefix, soft, 2, 1.0), lm.next_logits(hard)) < 1e-3);

  // A uniform row feeds the mean embedding. The oracle writes that mean into
  // the embedding row of token 3 and runs the hard path; only logit 3 (tied
  // output projection) may differ.
  Matrix uniform(1, V);
  const auto soft_logits = lm.next_logits_soft(prefix, uniform, 1, 1.0);
  LanguageModel oracle = lm;
  const int d = lm.shape().d_model;
  auto wte = oracle.body().view().wte;
  std::vector<double> mean(d, 0.0);
  for (int v = 0; v < V; ++v)
    for (int j = 0; j < d; ++j) mean[j] += wte[v * d + j] / V;
  std::copy(mean.begin(), mean.end(), wte.begin() + 3 * d);
  const auto hard_logits = oracle.next_logits(TokenSeq{0, 4, 5, 3});
  for (int v = 0; v < V; ++v) {
    if (v != 3) CHECK(soft_logits[v] == doctest::Approx(hard_logits[v]).epsilon(1e-10));
  }
}

TEST_CASE("checkpoint round trip and version check") {
  const auto lm = tiny_lm(10, 81);
  const auto dir = std::filesystem::temp_directory_path() / "retro_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "lm.ckpt";
  save_language_model(path, lm);
  CHECK(load_language_model(path) == lm);
  CHECK_THROWS_AS(load_checkpoint(path, "ranker"), CheckpointError);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t bad = kCheckpointVersion + 1;
    f.write(reinterpret_cast<const char*>(&bad), sizeof bad);
  }
  CHECK_THROWS_AS(load_language_model(path), CheckpointError);
  CHECK_THROWS_AS(load_language_model(dir / "absent.ckpt"), MissingFile);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training") {
  ModelShape shape;
  shape.d_model = 16;
  shape.max_len = 16;
  const Vocab vocab = tiny_vocab(12);
  const double ln_v = std::log(static_cast<double>(vocab.size()));

  SUBCASE("untrained loss is close to ln V") {
    LanguageModel lm(vocab, shape);
    lm.body().init_random(3);
    const TokenSeq seq{0, 4, 9, 5, 12, 7, 1};
    CHECK(std::abs(lm.sequence_loss(seq) - ln_v) <= 0.1 * ln_v);
  }

  SUBCASE("a repeated sequence is memorized, deterministically") {
    const std::vector<TokenSeq> corpus(20, TokenSeq{0, 4, 9, 5, 12, 7, 8, 1});
    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2;
    TrainReport report;
    const auto lm = train_lm(vocab, corpus, cfg, shape, &report);
    CHECK(report.val_loss.back() < 0.1);
    CHECK(std::abs(report.initial_val_loss - ln_v) <= 0.1 * ln_v);
    CHECK(train_lm(vocab, corpus, cfg, shape) == lm);
  }

  SUBCASE("invalid configuration") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.val_fraction = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
