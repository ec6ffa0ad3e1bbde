#include <doctest.h>

#include <algorithm>
#include <random>

#include "models.hpp"
#include "retro/checkpoint.hpp"
#include "retro/constraints.hpp"
#include "retro/corpus.hpp"
#include "retro/dataset.hpp"
#include "retro/decode.hpp"
#include "retro/pipeline.hpp"
#include "retro/ranker.hpp"

using namespace retro;
namespace t = retro::testing;

namespace {

struct Fixtures {
  std::vector<corpus::Story> stories;
  LanguageModel lm;
  CoherenceModel ranker;
};

const Fixtures& fixtures() {
  static const Fixtures f = [] {
    const auto dir = t::fixtures_dir();
    REQUIRE_MESSAGE(!dir.empty(), "RETRO_FIXTURES is not set");
    return Fixtures{corpus::read_stories(dir / "corpus" / "stories.jsonl"),
                    load_language_model(dir / "lm" / "lm.ckpt"), load_ranker(dir / "ranker" / "ranker.ckpt")};
  }();
  return f;
}

std::vector<corpus::Story> heldout(const std::vector<corpus::Story>& all) {
  std::vector<corpus::Story> out;
  for (const auto& s : all) {
    if (s.split != "train") out.push_back(s);
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("the event verb forces its object") {
  const auto& f = fixtures();
  const auto& rules = corpus::RuleTable::standard();
  const Vocab& v = f.lm.vocab();
  int checked = 0;
  for (const auto& s : heldout(f.stories)) {
    // "<bos> tom went to the beach . tom built the" -> "sandcastle"
    const auto& ev = rules.events[s.tags.event];
    TokenSeq ctx = context_tokens(v, s.sentences[0]);
    for (const auto& w : {rules.actors[s.tags.actor], ev.verb, std::string("the")}) ctx.push_back(v.id(w));
    const auto rows = initialize(f.lm, ctx, 1);
    const auto row = rows.row(0);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    CHECK(v.token(best) == ev.object);
    if (++checked == 40) break;
  }
  CHECK(checked == 40);
}

TEST_CASE("the ranker separates adjacent from cross-story sentences") {
  const auto& f = fixtures();
  const Vocab& v = f.ranker.vocab();
  const auto stories = heldout(f.stories);
  std::mt19937_64 rng(8);
  double adjacent = 0.0, cross = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < stories.size() && n < 200; ++i, ++n) {
    const int k = static_cast<int>(i % 4);
    const auto a = v.encode(stories[i].sentences[k]);
    adjacent += f.ranker.coherence(a, v.encode(stories[i].sentences[k + 1]));
    std::size_t j;
    do {
      j = std::uniform_int_distribution<std::size_t>(0, stories.size() - 1)(rng);
    } while (j == i);
    cross += f.ranker.coherence(a, v.encode(stories[j].sentences[std::uniform_int_distribution<int>(0, 4)(rng)]));
  }
  MESSAGE("adjacent mean " << adjacent / n << ", cross-story mean " << cross / n);
  CHECK(adjacent / n >= 0.8);
  CHECK(cross / n <= 0.2);
}

TEST_CASE("backward steps lower the loss on a corpus instance") {
  const auto& f = fixtures();
  const auto s = heldout(f.stories).front();
  const auto inst = corpus::make_abductive(s);
  const auto ctx = context_tokens(f.lm.vocab(), inst.x);
  const AbductiveLoss c(f.lm, ctx, f.lm.vocab().encode(inst.z));
  const auto y = initialize(f.lm, ctx, 15);
  CHECK(c.loss(backward_pass(c, y, 0.0003, 20)) <= c.loss(y));
}

TEST_CASE("constraint pressure over fifty abductive instances") {
  const auto& f = fixtures();
  const auto stories = heldout(f.stories);
  DecodeSection cfg;
  cfg.engine = DecodeConfig::abductive_defaults();
  std::vector<corpus::Instance> insts;
  for (std::size_t i = 0; i < 50; ++i) insts.push_back(corpus::make_abductive(stories[i]));
  const auto outs = decode_instances(f.lm, &f.ranker, insts, cfg, 1, 1);
  std::vector<double> initial, final;
  for (const auto& o : outs) {
    REQUIRE(o.traces.size() == 1);
    initial.push_back(o.traces[0].initial_loss);
    final.push_back(o.traces[0].final_loss);
  }
  MESSAGE("median initial " << median(initial) << ", median final " << median(final));
  CHECK(median(final) < median(initial));
}

TEST_CASE("three-segment rewriting yields three sentences") {
  const auto& f = fixtures();
  const auto stories = heldout(f.stories);
  const TokenId period = f.lm.vocab().period();
  DecodeSection cfg;
  cfg.task = "counterfactual";
  cfg.engine = DecodeConfig::counterfactual_defaults();
  cfg.constraint.kind = ConstraintKind::CounterfactualKl;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto inst = corpus::make_counterfactual(stories[i], i);
    const auto segs = ending_segments(f.lm.vocab(), inst.z, 3);
    REQUIRE(segs.size() == 3);
    const auto out = decode_instance(f.lm, &f.ranker, inst, cfg, 7);
    CHECK(out.ranked.size() == 8);
    for (const auto& r : out.ranked) {
      const auto sentences = split_on_period(r.candidate.tokens, period);
      CHECK(sentences.size() == 3);
      for (const auto& s : sentences) CHECK(s.back() == period);
    }
  }
}
