#include <doctest.h>

#include <cmath>

#include "metric_oracles.hpp"
#include "models.hpp"
#include "oracles.hpp"
#include "retro/error.hpp"
#include "retro/metrics.hpp"

using namespace retro;
using namespace retro::metrics;
namespace t = retro::testing;
namespace o = retro::testing::oracle;

TEST_CASE("BLEU on the hand-counted pair") {
  o::WordIds ids;
  const auto hyp = ids("the cat sat on the mat");
  const auto ref = ids("the cat sat on a red mat");
  // Clipped matches 5/6, 3/5, 2/4, 1/3; hypothesis 6 tokens against 7.
  const double expected = std::exp(1.0 - 7.0 / 6.0) * std::pow(5.0 / 6 * 3.0 / 5 * 2.0 / 4 * 1.0 / 3, 0.25);
  CHECK(std::abs(bleu4(hyp, {ref}) - expected) <= 1e-12);
  CHECK(std::abs(o::bleu(hyp, {ref}) - expected) <= 1e-12);
  const auto s = bleu_stats(hyp, {ref});
  CHECK(s.matched == std::array<double, 4>{5, 3, 2, 1});
  CHECK(s.total == std::array<double, 4>{6, 5, 4, 3});
  CHECK(s.ref_length == 7);
}

TEST_CASE("BLEU limits") {
  o::WordIds ids;
  const auto a = ids("john dropped the glass on the floor .");
  CHECK(bleu4(a, {a}) == doctest::Approx(1.0).epsilon(1e-15));
  // Unigram overlap only.
  const auto b = ids("floor the on glass");
  CHECK(bleu4(b, {a}) < 1e-2);
  CHECK(bleu4(ids("mary sang"), {a}) < 1e-2);
  CHECK(bleu4({}, {a}) == 0.0);
  CHECK_THROWS_AS(bleu4(a, {}), EmptyReference);
  CHECK_THROWS_AS(bleu4(a, {TokenSeq{}}), EmptyReference);
  // Multiple references clip by the largest count and pick the closest length.
  const auto hyp = ids("the the the");
  CHECK(bleu_stats(hyp, {ids("the cat"), ids("the the dog")}).matched[0] == 2);
  CHECK(bleu_stats(ids("a b c d"), {ids("a b c"), ids("a b c d e")}).ref_length == 3);
}

TEST_CASE("metrics agree with the oracles on handcrafted pairs") {
  o::WordIds ids;
  std::vector<std::pair<TokenSeq, TokenSeq>> pairs;
  for (const auto& [h, r] : o::handcrafted_pairs()) pairs.emplace_back(ids(h), ids(r));
  REQUIRE(pairs.size() == 20);
  const auto table = t::random_matrix(ids.size(), 6, 13);
  for (const auto& [h, r] : pairs) {
    CAPTURE(h.size());
    CAPTURE(r.size());
    CHECK(std::abs(bleu4(h, {r}) - o::bleu(h, {r})) <= 1e-12);
    CHECK(lcs_length(h, r) == o::lcs_exhaustive(h, r));
    const auto got = rouge_l(h, r);
    const auto want = o::rouge(h, r);
    CHECK(std::abs(got.p - want.p) <= 1e-12);
    CHECK(std::abs(got.r - want.r) <= 1e-12);
    CHECK(std::abs(got.f - want.f) <= 1e-12);
    const auto e = embed_score(table, h, r);
    const auto ew = o::embed(table, h, r);
    CHECK(std::abs(e.p - ew.p) <= 1e-12);
    CHECK(std::abs(e.r - ew.r) <= 1e-12);
    CHECK(std::abs(e.f - ew.f) <= 1e-12);
    for (double v : {bleu4(h, {r}), got.p, got.r, got.f, e.p, e.r, e.f}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  std::vector<TokenSeq> hyps;
  std::vector<std::vector<TokenSeq>> refs;
  for (const auto& [h, r] : pairs) {
    hyps.push_back(h);
    refs.push_back({r});
  }
  CHECK(std::abs(corpus_bleu4(hyps, refs) - o::corpus_bleu(hyps, refs)) <= 1e-12);
}

TEST_CASE("ROUGE-L examples") {
  o::WordIds ids;
  const auto r = rouge_l(ids("a c d"), ids("a b c d"));
  CHECK(r.p == 1.0);
  CHECK(r.r == 0.75);
  CHECK(r.f == doctest::Approx(6.0 / 7.0).epsilon(1e-15));
  const auto same = rouge_l(ids("x y z"), ids("x y z"));
  CHECK(same.p == 1.0);
  CHECK(same.r == 1.0);
  CHECK(same.f == 1.0);
  const auto disjoint = rouge_l(ids("p q"), ids("r s t"));
  CHECK(disjoint.p == 0.0);
  CHECK(disjoint.r == 0.0);
  CHECK(disjoint.f == 0.0);
  // Equal lengths make F symmetric.
  CHECK(rouge_l(ids("a b c d"), ids("b a d c")).f == rouge_l(ids("b a d c"), ids("a b c d")).f);
  CHECK(rouge_l({}, ids("a")).f == 0.0);
}

TEST_CASE("embedding score") {
  Matrix eye(8, 8);
  for (int i = 0; i < 8; ++i) eye(i, i) = 1.0;
  const auto self = embed_score(eye, {5, 6, 7}, {5, 6, 7});
  CHECK(self.p == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(self.r == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(self.f == doctest::Approx(1.0).epsilon(1e-15));
  const auto orth = embed_score(eye, {5, 6}, {7});
  CHECK(orth.p == 0.5);
  CHECK(orth.r == 0.5);
  CHECK(orth.f == 0.5);
  // Opposite vectors reach the bottom of the mapped range.
  Matrix opp(6, 2);
  opp(5, 0) = 1.0;
  opp(4, 0) = -1.0;
  CHECK(embed_score(opp, {5}, {4}).f == 0.0);
  CHECK(embed_score(eye, {}, {5}).f == 0.0);
  CHECK_THROWS_AS(embed_score(eye, {5}, {}), EmptyReference);
  CHECK_THROWS_AS(embed_score(eye, {9}, {5}), UnknownToken);

  const auto lm = t::tiny_lm(6, 2);
  const auto table = embedding_table(lm);
  REQUIRE(static_cast<int>(table.rows()) == lm.vocab().size());
  for (TokenId i = 0; i < lm.vocab().size(); ++i) CHECK(max_abs_diff(table.row(i), lm.embedding(i)) == 0.0);
}

TEST_CASE("corpus report pools BLEU and averages the rest") {
  o::WordIds ids;
  const std::vector<TokenSeq> hyps{ids("a b c d"), ids("e f g"), ids("a c d")};
  const std::vector<TokenSeq> refs{ids("a b c d"), ids("e f h"), ids("a b c d")};
  const auto table = t::random_matrix(ids.size(), 4, 3);
  const auto rep = score_corpus(table, hyps, refs);
  CHECK(rep.count == 3);
  double rl = 0.0, ef = 0.0;
  std::vector<std::vector<TokenSeq>> wrapped;
  for (std::size_t i = 0; i < 3; ++i) {
    rl += o::rouge(hyps[i], refs[i]).f / 3.0;
    ef += o::embed(table, hyps[i], refs[i]).f / 3.0;
    wrapped.push_back({refs[i]});
  }
  CHECK(std::abs(rep.rouge_l_f - rl) <= 1e-12);
  CHECK(std::abs(rep.embed_f - ef) <= 1e-12);
  CHECK(std::abs(rep.bleu4 - o::corpus_bleu(hyps, wrapped)) <= 1e-12);
  CHECK_THROWS_AS(score_corpus(table, {}, {}), EmptyReference);

  const auto j = to_json(rep);
  CHECK(j.at("count") == 3);
  CHECK(j.at("bleu4").get<double>() == rep.bleu4);

  MetricReport half;
  half.bleu4 = 0.5;
  half.rouge_l_f = 0.25;
  half.embed_f = 0.125;
  half.count = 7;
  const auto text = format_table({{"delorean", half}});
  CHECK(text.find("BLEU-4") != std::string::npos);
  CHECK(text.find("ROUGE-L") != std::string::npos);
  CHECK(text.find("embed-F") != std::string::npos);
  CHECK(text.find("delorean     50.00     25.00     12.50       7") != std::string::npos);
}
