#include "retro/ranker.hpp"

#include <algorithm>
#include <random>

#include "retro/checkpoint.hpp"
#include "retro/error.hpp"
#include "retro/kernels.hpp"

namespace retro {
namespace k = kernels;

CoherenceModel::CoherenceModel(Vocab vocab, ModelShape shape) : vocab_(std::move(vocab)) {
  shape.vocab_size = vocab_.size();
  body_ = Transformer(shape, 2);
}

TokenSeq CoherenceModel::pair_input(const TokenSeq& a, const TokenSeq& b) const {
  TokenSeq in{vocab_.bos()};
  in.insert(in.end(), a.begin(), a.end());
  in.push_back(vocab_.sep());
  in.insert(in.end(), b.begin(), b.end());
  return in;
}

std::vector<double> CoherenceModel::class_logits(const ForwardCache& cache) const {
  const int d = body_.shape().d_model;
  const auto w = body_.view();
  std::vector<double> out(2);
  const auto h = std::span<const double>(cache.lnf).subspan(static_cast<std::size_t>(cache.length - 1) * d, d);
  k::matmul_forward(out, h, w.head_w, w.head_b, 1, d, 2);
  return out;
}

double CoherenceModel::coherence(const TokenSeq& a, const TokenSeq& b) const {
  const auto seq = pair_input(a, b);
  SequenceInput in;
  in.prefix = seq;
  ForwardCache cache;
  body_.forward(in, cache);
  const auto logits = class_logits(cache);
  std::vector<double> p(2);
  k::softmax(p, logits);
  return p[1];
}

double CoherenceModel::pair_loss(const TokenSeq& a, const TokenSeq& b, int label, std::span<double> d_weights,
                                 double weight) const {
  const auto seq = pair_input(a, b);
  SequenceInput in;
  in.prefix = seq;
  ForwardCache cache;
  body_.forward(in, cache);
  const int d = body_.shape().d_model;
  const auto w = body_.view();
  // Every position of B carries the label; the score is read at the last one.
  const int first = cache.length - static_cast<int>(b.size());
  const int count = cache.length - first;
  const double share = weight / count;
  std::vector<double> d_hidden;
  if (!d_weights.empty()) d_hidden.assign(static_cast<std::size_t>(cache.length) * d, 0.0);
  auto g = d_weights.empty() ? WeightViews<double>{} : weight_views(body_.shape(), 2, d_weights);
  double loss = 0.0;
  for (int t = first; t < cache.length; ++t) {
    const std::size_t at = static_cast<std::size_t>(t) * d;
    const auto h = std::span<const double>(cache.lnf).subspan(at, d);
    std::vector<double> logits(2);
    k::matmul_forward(logits, h, w.head_w, w.head_b, 1, d, 2);
    if (d_weights.empty()) {
      loss += k::cross_entropy({}, logits, label);
      continue;
    }
    std::vector<double> d_logits(2);
    loss += k::cross_entropy(d_logits, logits, label, share);
    k::matmul_backward(std::span<double>(d_hidden).subspan(at, d), g.head_w, g.head_b, d_logits, h, w.head_w, 1, d, 2);
  }
  if (!d_weights.empty()) body_.backward(cache, d_hidden, d_weights, nullptr);
  return weight * loss / count;
}

namespace {

TokenSeq span_tokens(const corpus::Story& s, const Vocab& v, int from, int to) {
  TokenSeq out;
  for (int i = from; i < to; ++i) {
    const auto ids = v.encode(s.sentences[i]);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

std::vector<LabeledPair> make_pairs(const std::vector<corpus::Story>& stories, const Vocab& vocab,
                                    int pairs_per_story, std::uint64_t seed) {
  if (stories.size() < 2) throw ConfigError("pair construction needs at least two stories");
  std::mt19937_64 rng(seed);
  const int n = static_cast<int>(stories.size());
  std::vector<LabeledPair> out;
  for (int si = 0; si < n; ++si) {
    const auto& s = stories[si];
    for (int k = 0; k < pairs_per_story; ++k) {
      const bool negative = k % 2 == 1;
      int oi = si;
      while (negative && oi == si) oi = pick(rng, 0, n - 1);
      LabeledPair p;
      p.label = negative ? 0 : 1;
      if ((k / 2) % 3 != 2) {
        const int i = pick(rng, 0, 3);
        p.a = vocab.encode(s.sentences[i]);
        p.b = vocab.encode(negative ? stories[oi].sentences[pick(rng, 0, 4)] : s.sentences[i + 1]);
      } else {
        const int split = pick(rng, 1, 4);
        const int from = pick(rng, 0, split - 1);
        const int to = pick(rng, split + 1, 5);
        p.a = span_tokens(s, vocab, from, split);
        p.b = span_tokens(stories[oi], vocab, split, to);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<LabeledPair> adjacent_pairs(const std::vector<corpus::Story>& stories, const Vocab& vocab,
                                        std::uint64_t seed) {
  if (stories.size() < 2) throw ConfigError("pair construction needs at least two stories");
  std::mt19937_64 rng(seed);
  std::vector<LabeledPair> out;
  for (std::size_t si = 0; si < stories.size(); ++si) {
    const auto& s = stories[si];
    const int i = pick(rng, 0, 3);
    out.push_back({vocab.encode(s.sentences[i]), vocab.encode(s.sentences[i + 1]), 1});
    std::size_t oi = si;
    while (oi == si) oi = static_cast<std::size_t>(pick(rng, 0, static_cast<int>(stories.size()) - 1));
    out.push_back({vocab.encode(s.sentences[i]), vocab.encode(stories[oi].sentences[pick(rng, 0, 4)]), 0});
  }
  return out;
}

double accuracy(const CoherenceModel& model, const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t right = 0;
  for (const auto& p : pairs) {
    const int predicted = model.coherence(p.a, p.b) >= 0.5 ? 1 : 0;
    right += predicted == p.label ? 1 : 0;
  }
  return static_cast<double>(right) / static_cast<double>(pairs.size());
}

CoherenceModel train_ranker(const std::vector<corpus::Story>& stories, const TrainConfig& cfg, ModelShape shape,
                            int pairs_per_story, RankerReport* report, const LanguageModel* init) {
  if (stories.size() < 100) throw ConfigError("ranker training needs at least 100 stories");
  std::vector<corpus::Story> train, heldout;
  for (const auto& s : stories) (s.split == "train" ? train : heldout).push_back(s);
  if (train.size() < 2 || heldout.size() < 2) throw ConfigError("ranker training needs train and held-out stories");

  const Vocab vocab = corpus::build_vocab();
  CoherenceModel model(vocab, shape);
  model.body().init_random(cfg.seed);
  if (init != nullptr) {
    if (!(init->vocab() == vocab) || !(init->shape() == model.body().shape())) {
      throw ConfigError("ranker initialization needs a language model with the same vocabulary and shape");
    }
    const auto src = init->body().weights();
    std::copy(src.begin(), src.end(), model.body().weights().begin());
  }
  const auto pairs = make_pairs(train, vocab, pairs_per_story, cfg.seed);

  Objective obj;
  obj.units = [](std::size_t) { return 1.0; };
  obj.accumulate = [&](std::size_t i, double weight, std::span<double> grads) {
    return model.pair_loss(pairs[i].a, pairs[i].b, pairs[i].label, grads, weight);
  };
  obj.loss = [&](std::size_t i) { return model.pair_loss(pairs[i].a, pairs[i].b, pairs[i].label); };
  auto r = fit(model.body().weights(), obj, pairs.size(), cfg);
  if (report != nullptr) {
    report->train = std::move(r);
    const auto bench = adjacent_pairs(heldout, vocab, cfg.seed + 1);
    report->heldout_accuracy = accuracy(model, bench);
    report->heldout_pairs = bench.size();
  }
  return model;
}

void save_ranker(const std::filesystem::path& path, const CoherenceModel& model) {
  save_checkpoint(path, Checkpoint{"ranker", model.vocab(), model.body()});
}

CoherenceModel load_ranker(const std::filesystem::path& path) {
  auto ckpt = load_checkpoint(path, "ranker");
  if (ckpt.body.head_classes() != 2) throw CheckpointError("ranker checkpoint must carry a two-way head");
  CoherenceModel m(ckpt.vocab, ckpt.body.shape());
  m.body() = std::move(ckpt.body);
  return m;
}

std::vector<TokenSeq> sentence_split(const TokenSeq& y, TokenId period) { return split_on_period(y, period); }

namespace {

TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::vector<RankedCandidate> sort_ranked(std::vector<RankedCandidate> r) {
  std::sort(r.begin(), r.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.candidate.iteration != b.candidate.iteration) return a.candidate.iteration < b.candidate.iteration;
    if (a.candidate.config_id != b.candidate.config_id) return a.candidate.config_id < b.candidate.config_id;
    return a.candidate.tokens < b.candidate.tokens;
  });
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i].rank = static_cast<int>(i) + 1;
    r[i].candidate.score = r[i].score;
  }
  return r;
}

}  // namespace

std::vector<RankedCandidate> rank_abductive(const CoherenceFn& c, const TokenSeq& x,
                                            const std::vector<Candidate>& candidates, const TokenSeq& z) {
  if (candidates.empty()) throw std::invalid_argument("no candidates to rank");
  std::vector<RankedCandidate> r;
  for (const auto& cand : candidates) {
    const auto& y = cand.tokens;
    r.push_back({cand, c(concat(x, y), z) + c(x, concat(y, z)), 0});
  }
  return sort_ranked(std::move(r));
}

std::vector<RankedCandidate> rank_counterfactual(const CoherenceFn& c, const TokenSeq& x,
                                                 const std::vector<Candidate>& candidates, TokenId period) {
  if (candidates.empty()) throw std::invalid_argument("no candidates to rank");
  std::vector<RankedCandidate> r;
  for (const auto& cand : candidates) {
    const auto sentences = sentence_split(cand.tokens, period);
    double score = c(x, cand.tokens);
    for (std::size_t s = 0; s + 1 < sentences.size(); ++s) score += c(sentences[s], sentences[s + 1]);
    r.push_back({cand, score, 0});
  }
  return sort_ranked(std::move(r));
}

CoherenceFn coherence_fn(const CoherenceModel& model) {
  return [&model](const TokenSeq& a, const TokenSeq& b) { return model.coherence(a, b); };
}

}  // namespace retro
