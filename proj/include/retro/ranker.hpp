#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "retro/corpus.hpp"
#include "retro/decode.hpp"
#include "retro/model.hpp"
#include "retro/train.hpp"

namespace retro {

// Next-sentence classifier: the transformer body reads <bos> A <sep> B and a
// two-way head on the last position gives P(B follows A).
class CoherenceModel {
 public:
  CoherenceModel() = default;
  CoherenceModel(Vocab vocab, ModelShape shape);

  const Vocab& vocab() const noexcept { return vocab_; }
  const Transformer& body() const noexcept { return body_; }
  Transformer& body() noexcept { return body_; }

  TokenSeq pair_input(const TokenSeq& a, const TokenSeq& b) const;
  double coherence(const TokenSeq& a, const TokenSeq& b) const;

  // Mean cross-entropy of the label over the head applied at every position
  // of B; accumulates weight * gradient into d_weights when it is non-empty.
  double pair_loss(const TokenSeq& a, const TokenSeq& b, int label, std::span<double> d_weights = {},
                   double weight = 1.0) const;

  friend bool operator==(const CoherenceModel& x, const CoherenceModel& y) {
    return x.vocab_ == y.vocab_ && x.body_ == y.body_;
  }

 private:
  std::vector<double> class_logits(const ForwardCache& cache) const;

  Vocab vocab_;
  Transformer body_;
};

struct LabeledPair {
  TokenSeq a, b;
  int label = 0;  // 1: b continues a
};

// Balanced pairs, alternating positive and negative. In each run of three
// rounds two use adjacent single sentences and one uses spans of consecutive
// sentences; a negative keeps A and takes B from a random other story.
std::vector<LabeledPair> make_pairs(const std::vector<corpus::Story>& stories, const Vocab& vocab,
                                    int pairs_per_story, std::uint64_t seed);

// The plain next-sentence benchmark: adjacent single sentences against a
// random sentence of another story, balanced.
std::vector<LabeledPair> adjacent_pairs(const std::vector<corpus::Story>& stories, const Vocab& vocab,
                                        std::uint64_t seed);

struct RankerReport {
  TrainReport train;
  double heldout_accuracy = 0.0;
  std::size_t heldout_pairs = 0;
};

// Requires at least 100 stories; held-out accuracy is measured on the
// adjacent-pair benchmark of the stories' dev and test splits. When `init` is
// given its body weights (a trained language model of the same shape) seed the
// classifier body; the head always starts from random weights.
CoherenceModel train_ranker(const std::vector<corpus::Story>& stories, const TrainConfig& cfg,
                            ModelShape shape = {}, int pairs_per_story = 6, RankerReport* report = nullptr,
                            const LanguageModel* init = nullptr);

double accuracy(const CoherenceModel& model, const std::vector<LabeledPair>& pairs);

void save_ranker(const std::filesystem::path& path, const CoherenceModel& model);
CoherenceModel load_ranker(const std::filesystem::path& path);

using CoherenceFn = std::function<double(const TokenSeq&, const TokenSeq&)>;

struct RankedCandidate {
  Candidate candidate;
  double score = 0.0;
  int rank = 0;  // 1-based
};

// Splits after every PERIOD; a trailing piece without one is kept as the last
// (incomplete) sentence.
std::vector<TokenSeq> sentence_split(const TokenSeq& y, TokenId period);

// score = c(XY, Z) + c(X, YZ)
std::vector<RankedCandidate> rank_abductive(const CoherenceFn& c, const TokenSeq& x,
                                            const std::vector<Candidate>& candidates, const TokenSeq& z);
// score = c(X, Y) + sum_s c(Y[s], Y[s+1])
std::vector<RankedCandidate> rank_counterfactual(const CoherenceFn& c, const TokenSeq& x,
                                                 const std::vector<Candidate>& candidates, TokenId period);

CoherenceFn coherence_fn(const CoherenceModel& model);

}  // namespace retro
