#include <doctest.h>

#include <cmath>
#include <numeric>

#include "models.hpp"
#include "oracles.hpp"
#include "retro/constraints.hpp"
#include "retro/error.hpp"
#include "retro/train.hpp"

using namespace retro;
namespace t = retro::testing;
using t::tiny_lm;

namespace {

// N x V matrix with `scale` at each token's column and zeros elsewhere.
Matrix one_hot(const TokenSeq& tokens, int vocab, double scale) {
  Matrix m(tokens.size(), vocab);
  for (std::size_t n = 0; n < tokens.size(); ++n) m(n, tokens[n]) = scale;
  return m;
}

// -log softmax(row / tau)[z], evaluated directly.
double direct_nll(std::span<const double> row, TokenId z, double tau) {
  double mx = -1e300;
  for (double v : row) mx = std::max(mx, v / tau);
  double sum = 0.0;
  for (double v : row) sum += std::exp(v / tau - mx);
  return -(row[z] / tau - mx - std::log(sum));
}

double fd_worst(const Constraint& c, Matrix soft, double h = 1e-4) {
  const auto g = c.evaluate(soft).grad;
  auto x = soft.flat();
  return t::worst_fd_error([&] { return c.loss(soft); }, x, g.flat(), t::all_coords(x.size()), h);
}

}  // namespace

TEST_CASE("a memorized future costs almost nothing") {
  const Vocab v = t::tiny_vocab(6);
  const TokenSeq seq{v.bos(), 5, 6, 7, 8, 9, 10, v.eos()};
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-2;
  cfg.val_fraction = 0.1;
  ModelShape shape;
  shape.d_model = 16;
  shape.n_layers = 1;
  shape.n_heads = 2;
  shape.max_len = 16;
  const auto lm = train_lm(v, std::vector<TokenSeq>(40, seq), cfg, shape);

  const TokenSeq context{v.bos(), 5};
  const TokenSeq hypothesis{6, 7};
  const TokenSeq future{8, 9, 10};
  const AbductiveLoss loss(lm, context, future);
  CHECK(loss.loss(one_hot(hypothesis, v.size(), 50.0)) < 0.05);
  CHECK(hard_future_nll(lm, context, hypothesis, future) < 0.05);
}

TEST_CASE("a uniform model costs N_Z ln V") {
  auto lm = tiny_lm(11, 1);
  const int V = lm.vocab().size();
  const TokenSeq context{lm.vocab().bos(), 5};
  const TokenSeq future{6, 7, 8};
  const auto soft = t::random_matrix(4, V, 3);

  auto zero = lm;
  for (double& w : zero.body().weights()) w = 0.0;
  CHECK(AbductiveLoss(zero, context, future).loss(soft) == doctest::Approx(3 * std::log(V)).epsilon(1e-12));

  // Fresh small initialization stays close to uniform.
  const double fresh = AbductiveLoss(lm, context, future).loss(soft);
  CHECK(std::abs(fresh / (3 * std::log(V)) - 1.0) < 0.10);
}

TEST_CASE("abductive gradient matches finite differences") {
  const auto lm = tiny_lm(11, 7, 8.0);
  const int V = lm.vocab().size();
  REQUIRE(V == 16);
  const TokenSeq context{lm.vocab().bos(), 6, 9};
  const TokenSeq future{12, 5, 14};
  const auto soft = t::random_matrix(4, V, 11, 2.0);
  for (bool prefix : {false, true}) {
    CAPTURE(prefix);
    const AbductiveLoss c(lm, context, future, 1.0, prefix);
    CHECK(fd_worst(c, soft) <= 1e-4);
  }
  CHECK(fd_worst(AbductiveLoss(lm, context, future, 0.5), soft) <= 1e-4);
}

TEST_CASE("near one-hot soft input reduces to the hard likelihood") {
  const auto lm = tiny_lm(20, 5, 6.0);
  const TokenSeq context{lm.vocab().bos(), 7, 8};
  const TokenSeq hypothesis{10, 11, 12, 13};
  const TokenSeq future{14, 15, 16};
  const double soft = AbductiveLoss(lm, context, future).loss(one_hot(hypothesis, lm.vocab().size(), 50.0));
  const double hard = hard_future_nll(lm, context, hypothesis, future);
  CHECK(std::abs(soft - hard) <= 1e-3);
}

TEST_CASE("prefix mode averages the loss over prefixes") {
  const auto lm = tiny_lm(11, 9, 4.0);
  const TokenSeq context{lm.vocab().bos(), 6};
  const TokenSeq future{7, 8};
  const auto soft = t::random_matrix(3, lm.vocab().size(), 2);
  double expected = 0.0;
  for (std::size_t m = 1; m <= 3; ++m) {
    Matrix head(m, soft.cols());
    std::copy(soft.data(), soft.data() + head.size(), head.data());
    expected += AbductiveLoss(lm, context, future).loss(head) / 3.0;
  }
  const AbductiveLoss c(lm, context, future, 1.0, true);
  CHECK(c.loss(soft) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(c.evaluate(soft).loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("abductive loss refuses contexts beyond the model length") {
  const auto lm = tiny_lm(11, 1, 1.0, 8);
  const TokenSeq context{lm.vocab().bos(), 5, 6, 7};
  const TokenSeq future{8, 9, 10};
  const AbductiveLoss c(lm, context, future);
  CHECK_NOTHROW(c.loss(t::random_matrix(2, lm.vocab().size(), 1)));
  CHECK_THROWS_AS(c.loss(t::random_matrix(3, lm.vocab().size(), 1)), ContextOverflow);
  CHECK_THROWS_AS(hard_future_nll(lm, context, {5, 6, 7}, future), ContextOverflow);
}

TEST_CASE("KL loss in the one-hot and uniform limits") {
  const TokenSeq z{1, 3, 0, 2};
  const CounterfactualKl kl(z, 1.0);
  CHECK(kl.evaluate(one_hot(z, 4, 50.0)).loss / z.size() < 1e-6);
  const auto uniform = kl.evaluate(Matrix(4, 4, 0.3));
  CHECK(uniform.loss / z.size() == doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(uniform.loss / z.size() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("KL loss and gradient against direct evaluation") {
  const int V = 9;
  const TokenSeq z{4, 0, 8, 3, 3};
  for (double tau : {1.0, 0.5, 2.5}) {
    CAPTURE(tau);
    const auto soft = t::random_matrix(z.size(), V, 21, 3.0);
    const auto out = CounterfactualKl(z, tau).evaluate(soft);
    double expected = 0.0;
    double worst = 0.0;
    for (std::size_t n = 0; n < z.size(); ++n) {
      const auto row = soft.row(n);
      expected += direct_nll(row, z[n], tau);
      double mx = -1e300, sum = 0.0;
      for (double v : row) mx = std::max(mx, v / tau);
      for (double v : row) sum += std::exp(v / tau - mx);
      for (int v = 0; v < V; ++v) {
        const double p = std::exp(row[v] / tau - mx) / sum;
        const double g = (p - (v == z[n] ? 1.0 : 0.0)) / tau;
        worst = std::max(worst, std::abs(g - out.grad(n, v)));
      }
    }
    CHECK(std::abs(out.loss - expected) <= 1e-12);
    CHECK(worst <= 1e-10);
    CHECK(fd_worst(CounterfactualKl(z, tau), soft) <= 1e-4);
  }
}

TEST_CASE("KL length handling") {
  const TokenSeq z{5, 6, 7};
  CHECK_THROWS_AS(CounterfactualKl(z, 1.0).evaluate(Matrix(4, 8)), LengthMismatch);
  CHECK_THROWS_AS(CounterfactualKl(z, 1.0).evaluate(Matrix(2, 8)), LengthMismatch);

  const CounterfactualKl padded(z, 1.0, true, 3);
  const auto longer = padded.evaluate(one_hot({5, 6, 7, 3, 3}, 8, 50.0));
  CHECK(longer.loss < 1e-6);
  const auto shorter = padded.evaluate(one_hot({5, 6}, 8, 50.0));
  CHECK(shorter.loss < 1e-6);
  CHECK(padded.evaluate(one_hot({5, 6, 7, 4}, 8, 50.0)).loss > 10.0);
  CHECK_THROWS_AS(CounterfactualKl(z, 0.0), ConfigError);
}

TEST_CASE("the temperature never changes the best target of a row") {
  const int V = 6;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto row = t::random_matrix(1, V, seed, 2.0);
    std::vector<TokenId> best;
    for (double tau : {0.1, 0.5, 1.0, 3.0, 20.0}) {
      TokenId arg = 0;
      double lo = 1e300;
      for (TokenId z = 0; z < V; ++z) {
        const double l = CounterfactualKl({z}, tau).evaluate(row).loss;
        if (l < lo) lo = l, arg = z;
      }
      best.push_back(arg);
    }
    const auto r = row.row(0);
    const auto argmax = static_cast<TokenId>(std::max_element(r.begin(), r.end()) - r.begin());
    for (TokenId b : best) CHECK(b == argmax);
  }
}

TEST_CASE("task losses are never negative") {
  const auto lm = tiny_lm(11, 3, 5.0);
  const TokenSeq context{lm.vocab().bos(), 5};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto soft = t::random_matrix(3, lm.vocab().size(), seed, 5.0);
    CHECK(AbductiveLoss(lm, context, {6, 7}).loss(soft) >= 0.0);
    CHECK(CounterfactualKl({1, 2, 3}, 0.7).evaluate(soft).loss >= 0.0);
  }
}

TEST_CASE("probe losses") {
  const auto soft = t::random_matrix(3, 5, 4);
  const auto zero = ZeroProbe().evaluate(soft);
  CHECK(zero.loss == 0.0);
  CHECK(zero.grad == Matrix(3, 5));

  const auto at_min = QuadraticProbe(soft).evaluate(soft);
  CHECK(at_min.loss == 0.0);
  CHECK(at_min.grad == Matrix(3, 5));
  CHECK(QuadraticProbe(0.25).evaluate(Matrix(3, 5, 0.25)).loss == 0.0);

  const auto q = QuadraticProbe(t::random_matrix(3, 5, 8));
  CHECK(fd_worst(q, soft, 1e-3) <= 1e-8);
  CHECK(fd_worst(QuadraticProbe(1.5), soft, 1e-3) <= 1e-8);
  CHECK_THROWS(QuadraticProbe(Matrix(2, 5)).evaluate(soft));
}

TEST_CASE("specs validate and build the matching constraint") {
  ConstraintSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.kind = ConstraintKind::CounterfactualKl;
  spec.tau_kl = 0.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.tau_kl = 1.0;
  spec.tau_input = -1.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);

  for (auto k : {ConstraintKind::AbductiveFuture, ConstraintKind::CounterfactualKl, ConstraintKind::ZeroProbe,
                 ConstraintKind::QuadraticProbe}) {
    CHECK(constraint_kind_from(to_string(k)) == k);
  }
  CHECK_THROWS_AS(constraint_kind_from("bert"), ConfigError);

  const auto lm = tiny_lm(11, 2);
  spec = {};
  spec.kind = ConstraintKind::CounterfactualKl;
  const auto kl = make_constraint(spec, lm, {lm.vocab().bos()}, {5, 6});
  const auto soft = t::random_matrix(2, lm.vocab().size(), 6);
  CHECK(kl->loss(soft) == CounterfactualKl({5, 6}, 1.0).evaluate(soft).loss);
  spec.kind = ConstraintKind::AbductiveFuture;
  const auto ab = make_constraint(spec, lm, {lm.vocab().bos()}, {5, 6});
  CHECK(ab->loss(soft) == AbductiveLoss(lm, {lm.vocab().bos()}, {5, 6}).loss(soft));
}
