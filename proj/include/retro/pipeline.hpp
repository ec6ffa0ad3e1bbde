#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retro/constraints.hpp"
#include "retro/corpus.hpp"
#include "retro/decode.hpp"
#include "retro/metrics.hpp"
#include "retro/model.hpp"
#include "retro/ranker.hpp"
#include "retro/train.hpp"

namespace retro {

enum class DecodeMode { Delorean, ZeroShot, ZeroShotRanked };
std::string to_string(DecodeMode m);
DecodeMode decode_mode_from(const std::string& s);

struct CorpusSection {
  int n_stories = 2000;
  std::int64_t seed = -1;  // negative: the global seed
  int gold_sentences = 1;
};

struct LmSection {
  ModelShape shape;  // vocab_size comes from the corpus vocabulary
  TrainConfig train;
};

struct RankerSection {
  TrainConfig train;
  int pairs_per_story = 6;
  bool init_from_lm = true;
};

struct DecodeSection {
  std::string task = "abductive";  // abductive | counterfactual
  DecodeMode mode = DecodeMode::Delorean;
  int limit = 0;  // 0: every instance
  DecodeConfig engine;
  ConstraintSpec constraint;
};

struct EvalSection {
  bool bleu4 = true;
  bool rouge_l = true;
  bool embed = true;
};

struct PathsSection {
  std::string stories;
  std::string dataset;
  std::string lm;
  std::string ranker;
  std::string outputs;
  std::string out_dir = "run";
  std::string traces;  // empty: <out_dir>/traces
};

struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  CorpusSection corpus;
  LmSection lm;
  RankerSection ranker;
  DecodeSection decode;
  EvalSection eval;
  PathsSection paths;

  // Defaults for a task: the engine and constraint carry the task's
  // hyperparameters, everything else is shared.
  static RunConfig defaults(const std::string& task = "abductive");
  void validate() const;
  std::uint64_t corpus_seed() const { return corpus.seed < 0 ? seed : static_cast<std::uint64_t>(corpus.seed); }
};

nlohmann::json to_json(const RunConfig& c);
// Reads a complete tree as produced by to_json.
RunConfig config_from_json(const nlohmann::json& j);

// Overlays `patch` onto `base`; every key of the patch must already exist in
// the base (ConfigError naming the dotted path otherwise). Objects merge,
// everything else replaces.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

// Turns "a.b.c=value" into {"a":{"b":{"c":value}}}; the value is parsed as
// JSON when it can be and kept as a string otherwise.
nlohmann::json assignment_patch(const std::string& assignment);

// Layers are applied in order over the defaults of the task they select (the
// last layer naming decode.task wins; abductive otherwise).
RunConfig resolve_config(const std::vector<nlohmann::json>& layers);

struct InstanceOutput {
  std::string id;
  std::string task;
  TokenSeq output;
  std::vector<RankedCandidate> ranked;  // empty for plain zero-shot
  std::vector<DecodeTrace> traces;
};

// Decodes one instance. `ranker` may be null only in zero-shot mode. All
// randomness derives from `seed`.
InstanceOutput decode_instance(const LanguageModel& lm, const CoherenceModel* ranker, const corpus::Instance& inst,
                               const DecodeSection& cfg, std::uint64_t seed);

// Per-instance seeds come from (global seed, instance id), so results do not
// depend on the worker count.
std::vector<InstanceOutput> decode_instances(const LanguageModel& lm, const CoherenceModel* ranker,
                                             const std::vector<corpus::Instance>& instances,
                                             const DecodeSection& cfg, std::uint64_t global_seed, int workers);

TokenSeq context_tokens(const Vocab& vocab, const std::string& x);  // <bos> x

// Sentence targets of a counterfactual ending for the given segment count:
// one per sentence when it matches, otherwise the ending as one target.
std::vector<TokenSeq> ending_segments(const Vocab& vocab, const std::string& z, int segments);

nlohmann::json output_record(const Vocab& vocab, const InstanceOutput& out);
nlohmann::json candidates_record(const Vocab& vocab, const InstanceOutput& out);
// Timings are left out so that run directories stay byte-identical.
nlohmann::json traces_record(const InstanceOutput& out);

}  // namespace retro
