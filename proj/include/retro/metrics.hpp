#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retro/matrix.hpp"
#include "retro/model.hpp"

namespace retro::metrics {

inline constexpr double kBleuEpsilon = 1e-9;

struct PRF {
  double p = 0.0, r = 0.0, f = 0.0;
};

// Clipped n-gram statistics of one hypothesis against its references.
struct BleuStats {
  std::array<double, 4> matched{};
  std::array<double, 4> total{};
  double hyp_length = 0.0;
  double ref_length = 0.0;  // closest reference length, shorter on ties
};

BleuStats bleu_stats(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references);
// Geometric mean of the four modified precisions times the brevity penalty. A
// precision with no matches counts as epsilon / total (epsilon alone when the
// hypothesis has no n-grams of that order).
double bleu_from(const BleuStats& stats);

// Sentence BLEU-4. Throws EmptyReference without a non-empty reference; an
// empty hypothesis scores 0.
double bleu4(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references);
// Pools the clipped counts and lengths over all pairs before combining.
double corpus_bleu4(const std::vector<TokenSeq>& hypotheses, const std::vector<std::vector<TokenSeq>>& references);

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b);
// LCS precision, recall and F1; all zero when either side is empty.
PRF rouge_l(const TokenSeq& hypothesis, const TokenSeq& reference);

// Greedy matching of static token embeddings (rows of `table`): precision is
// the mean over hypothesis tokens of the best cosine against the reference,
// recall the converse. Both are mapped from [-1, 1] to [0, 1] by (x + 1) / 2
// and F is their harmonic mean. An empty hypothesis scores 0.
PRF embed_score(const Matrix& table, const TokenSeq& hypothesis, const TokenSeq& reference);
Matrix embedding_table(const LanguageModel& lm);

struct MetricReport {
  double bleu4 = 0.0;
  double rouge_l_f = 0.0;
  double embed_p = 0.0;
  double embed_r = 0.0;
  double embed_f = 0.0;
  std::size_t count = 0;
};

MetricReport score_one(const Matrix& table, const TokenSeq& hypothesis, const TokenSeq& reference);
// Corpus BLEU is pooled; the other fields are means over instances.
MetricReport score_corpus(const Matrix& table, const std::vector<TokenSeq>& hypotheses,
                          const std::vector<TokenSeq>& references);

nlohmann::json to_json(const MetricReport& report);
// One row per named report, columns BLEU-4, ROUGE-L and embed-F in percent.
std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace retro::metrics
