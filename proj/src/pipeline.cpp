#include "retro/pipeline.hpp"

#include <algorithm>
#include <exception>

#include "retro/error.hpp"
#include "retro/seed.hpp"

namespace retro {
namespace {

using nlohmann::json;

std::string sample_mode_name(SampleMode m) { return m == SampleMode::Greedy ? "greedy" : "top_k"; }

SampleMode sample_mode_from(const std::string& s) {
  if (s == "greedy") return SampleMode::Greedy;
  if (s == "top_k") return SampleMode::TopK;
  throw ConfigError("unknown sample mode '" + s + "' (greedy | top_k)");
}

std::string harvest_name(Harvest h) { return h == Harvest::PerIteration ? "per_iteration" : "final_iteration"; }

Harvest harvest_from(const std::string& s) {
  if (s == "per_iteration") return Harvest::PerIteration;
  if (s == "final_iteration") return Harvest::FinalIteration;
  throw ConfigError("unknown harvest '" + s + "' (per_iteration | final_iteration)");
}

json shape_json(const ModelShape& s) {
  return {{"d_model", s.d_model}, {"n_layers", s.n_layers}, {"n_heads", s.n_heads}, {"max_len", s.max_len}};
}

ModelShape shape_from(const json& j) {
  ModelShape s;
  s.d_model = j.at("d_model").get<int>();
  s.n_layers = j.at("n_layers").get<int>();
  s.n_heads = j.at("n_heads").get<int>();
  s.max_len = j.at("max_len").get<int>();
  return s;
}

json train_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size}, {"epochs", t.epochs},
          {"seed", t.seed},                   {"clip_norm", t.clip_norm},   {"val_fraction", t.val_fraction}};
}

TrainConfig train_from(const json& j) {
  TrainConfig t;
  t.learning_rate = j.at("learning_rate").get<double>();
  t.batch_size = j.at("batch_size").get<int>();
  t.epochs = j.at("epochs").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.clip_norm = j.at("clip_norm").get<double>();
  t.val_fraction = j.at("val_fraction").get<double>();
  return t;
}

json engine_json(const DecodeConfig& c) {
  json schedule = json::array();
  for (const auto& e : c.schedule) schedule.push_back({{"iterations", e.iterations}, {"backward_steps", e.backward_steps}});
  return {{"n_tokens", c.n_tokens},
          {"iterations", c.iterations},
          {"backward_steps", c.backward_steps},
          {"step_size", c.step_size},
          {"mix_weight", c.mix_weight},
          {"tau_sample", c.tau_sample},
          {"tau_input", c.tau_input},
          {"sample_mode", sample_mode_name(c.mode)},
          {"top_k", c.top_k},
          {"overgen_budget", c.overgen_budget},
          {"segments", c.segments},
          {"schedule", schedule},
          {"harvest", harvest_name(c.harvest)}};
}

DecodeConfig engine_from(const json& j) {
  DecodeConfig c;
  c.n_tokens = j.at("n_tokens").get<int>();
  c.iterations = j.at("iterations").get<int>();
  c.backward_steps = j.at("backward_steps").get<int>();
  c.step_size = j.at("step_size").get<double>();
  c.mix_weight = j.at("mix_weight").get<double>();
  c.tau_sample = j.at("tau_sample").get<double>();
  c.tau_input = j.at("tau_input").get<double>();
  c.mode = sample_mode_from(j.at("sample_mode").get<std::string>());
  c.top_k = j.at("top_k").get<int>();
  c.overgen_budget = j.at("overgen_budget").get<int>();
  c.segments = j.at("segments").get<int>();
  for (const auto& e : j.at("schedule")) {
    c.schedule.push_back({e.at("iterations").get<int>(), e.at("backward_steps").get<int>()});
  }
  c.harvest = harvest_from(j.at("harvest").get<std::string>());
  return c;
}

json constraint_json(const ConstraintSpec& s) {
  return {{"kind", to_string(s.kind)},       {"tau_kl", s.tau_kl},       {"prefix_mode", s.prefix_mode},
          {"pad_to_length", s.pad_to_length}, {"tau_input", s.tau_input}, {"probe_center", s.probe_center}};
}

ConstraintSpec constraint_from(const json& j) {
  ConstraintSpec s;
  s.kind = constraint_kind_from(j.at("kind").get<std::string>());
  s.tau_kl = j.at("tau_kl").get<double>();
  s.prefix_mode = j.at("prefix_mode").get<bool>();
  s.pad_to_length = j.at("pad_to_length").get<bool>();
  s.tau_input = j.at("tau_input").get<double>();
  s.probe_center = j.at("probe_center").get<double>();
  return s;
}

// First PERIOD-terminated sentence, or the whole sequence without one.
TokenSeq first_sentence(const TokenSeq& y, TokenId period) {
  const auto it = std::find(y.begin(), y.end(), period);
  return it == y.end() ? y : TokenSeq(y.begin(), it + 1);
}

TokenSeq concat(TokenSeq a, const TokenSeq& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Zero-shot continuation following the same segment protocol as the
// counterfactual engine: each segment continues the running context for the
// length of its target and keeps its first sentence.
Candidate segmented_zero_shot(const LanguageModel& lm, const TokenSeq& context, const std::vector<TokenSeq>& targets,
                              const DecodeConfig& cfg, Sampler& sampler) {
  if (targets.size() == 1) {
    const int n = static_cast<int>(targets[0].size());
    return zero_shot(lm, context, n, cfg.overgen_budget < 0 ? n : cfg.overgen_budget, sampler);
  }
  const TokenId period = lm.vocab().period();
  Candidate out;
  TokenSeq ctx = context;
  for (const auto& target : targets) {
    const int n = static_cast<int>(target.size());
    const auto c = zero_shot(lm, ctx, n, cfg.overgen_budget < 0 ? n : cfg.overgen_budget, sampler);
    const auto sentence = first_sentence(c.tokens, period);
    out.tokens = concat(out.tokens, sentence);
    out.raw = concat(out.raw, c.raw);
    ctx = concat(ctx, sentence);
  }
  out.complete = !out.tokens.empty() && out.tokens.back() == period;
  out.iteration = 1;
  return out;
}

std::vector<RankedCandidate> rank(const CoherenceModel& ranker, const std::string& task, const TokenSeq& x,
                                  const TokenSeq& z, const std::vector<Candidate>& candidates) {
  const auto c = coherence_fn(ranker);
  if (task == "abductive") return rank_abductive(c, x, candidates, z);
  return rank_counterfactual(c, x, candidates, ranker.vocab().period());
}

}  // namespace

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::Delorean: return "delorean";
    case DecodeMode::ZeroShot: return "zeroshot";
    case DecodeMode::ZeroShotRanked: return "zeroshot-ranked";
  }
  return "delorean";
}

DecodeMode decode_mode_from(const std::string& s) {
  if (s == "delorean") return DecodeMode::Delorean;
  if (s == "zeroshot") return DecodeMode::ZeroShot;
  if (s == "zeroshot-ranked") return DecodeMode::ZeroShotRanked;
  throw ConfigError("unknown mode '" + s + "' (delorean | zeroshot | zeroshot-ranked)");
}

RunConfig RunConfig::defaults(const std::string& task) {
  RunConfig c;
  c.lm.train.epochs = 8;
  c.ranker.train.epochs = 3;
  c.ranker.train.learning_rate = 1e-3;
  c.decode.task = task;
  if (task == "abductive") {
    c.decode.engine = DecodeConfig::abductive_defaults();
    c.decode.constraint.kind = ConstraintKind::AbductiveFuture;
  } else if (task == "counterfactual") {
    c.decode.engine = DecodeConfig::counterfactual_defaults();
    c.decode.constraint.kind = ConstraintKind::CounterfactualKl;
  } else {
    throw ConfigError("unknown task '" + task + "' (abductive | counterfactual)");
  }
  return c;
}

void RunConfig::validate() const {
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (corpus.n_stories < 1) throw ConfigError("corpus.n_stories must be >= 1");
  if (corpus.gold_sentences != 1 && corpus.gold_sentences != 3) throw ConfigError("corpus.gold_sentences must be 1 or 3");
  if (decode.task != "abductive" && decode.task != "counterfactual") {
    throw ConfigError("decode.task must be abductive or counterfactual");
  }
  if (decode.limit < 0) throw ConfigError("decode.limit must be >= 0");
  if (ranker.pairs_per_story < 2) throw ConfigError("ranker.pairs_per_story must be >= 2");
  lm.train.validate();
  ranker.train.validate();
  decode.engine.validate();
  decode.constraint.validate();
  const bool counterfactual_kind = decode.constraint.kind == ConstraintKind::CounterfactualKl;
  if (counterfactual_kind != (decode.task == "counterfactual")) {
    throw ConfigError("decode.constraint.kind does not match decode.task");
  }
}

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"corpus", {{"n_stories", c.corpus.n_stories}, {"seed", c.corpus.seed}, {"gold_sentences", c.corpus.gold_sentences}}},
          {"lm", {{"shape", shape_json(c.lm.shape)}, {"train", train_json(c.lm.train)}}},
          {"ranker",
           {{"train", train_json(c.ranker.train)},
            {"pairs_per_story", c.ranker.pairs_per_story},
            {"init_from_lm", c.ranker.init_from_lm}}},
          {"decode",
           {{"task", c.decode.task},
            {"mode", to_string(c.decode.mode)},
            {"limit", c.decode.limit},
            {"engine", engine_json(c.decode.engine)},
            {"constraint", constraint_json(c.decode.constraint)}}},
          {"eval", {{"bleu4", c.eval.bleu4}, {"rouge_l", c.eval.rouge_l}, {"embed", c.eval.embed}}},
          {"paths",
           {{"stories", c.paths.stories},
            {"dataset", c.paths.dataset},
            {"lm", c.paths.lm},
            {"ranker", c.paths.ranker},
            {"outputs", c.paths.outputs},
            {"out_dir", c.paths.out_dir},
            {"traces", c.paths.traces}}}};
}

RunConfig config_from_json(const json& j) {
  try {
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.workers = j.at("workers").get<int>();
    const auto& corpus = j.at("corpus");
    c.corpus.n_stories = corpus.at("n_stories").get<int>();
    c.corpus.seed = corpus.at("seed").get<std::int64_t>();
    c.corpus.gold_sentences = corpus.at("gold_sentences").get<int>();
    c.lm.shape = shape_from(j.at("lm").at("shape"));
    c.lm.train = train_from(j.at("lm").at("train"));
    const auto& ranker = j.at("ranker");
    c.ranker.train = train_from(ranker.at("train"));
    c.ranker.pairs_per_story = ranker.at("pairs_per_story").get<int>();
    c.ranker.init_from_lm = ranker.at("init_from_lm").get<bool>();
    const auto& decode = j.at("decode");
    c.decode.task = decode.at("task").get<std::string>();
    c.decode.mode = decode_mode_from(decode.at("mode").get<std::string>());
    c.decode.limit = decode.at("limit").get<int>();
    c.decode.engine = engine_from(decode.at("engine"));
    c.decode.constraint = constraint_from(decode.at("constraint"));
    const auto& eval = j.at("eval");
    c.eval.bleu4 = eval.at("bleu4").get<bool>();
    c.eval.rouge_l = eval.at("rouge_l").get<bool>();
    c.eval.embed = eval.at("embed").get<bool>();
    const auto& paths = j.at("paths");
    c.paths.stories = paths.at("stories").get<std::string>();
    c.paths.dataset = paths.at("dataset").get<std::string>();
    c.paths.lm = paths.at("lm").get<std::string>();
    c.paths.ranker = paths.at("ranker").get<std::string>();
    c.paths.outputs = paths.at("outputs").get<std::string>();
    c.paths.out_dir = paths.at("out_dir").get<std::string>();
    c.paths.traces = paths.at("traces").get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config " + (where.empty() ? std::string("root") : where) + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, path);
    } else {
      const bool numbers = slot.is_number() && value.is_number();
      if (!numbers && slot.type() != value.type()) {
        throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " +
                          value.type_name());
      }
      slot = value;
    }
  }
}

json assignment_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::size_t end = key.size();
  while (true) {
    const auto dot = key.rfind('.', end - 1);
    const std::size_t begin = dot == std::string::npos ? 0 : dot + 1;
    const std::string part = key.substr(begin, end - begin);
    if (part.empty()) throw ConfigError("empty key segment in '" + key + "'");
    patch = json{{part, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  return patch;
}

RunConfig resolve_config(const std::vector<json>& layers) {
  std::string task = "abductive";
  for (const auto& layer : layers) {
    if (!layer.is_object()) throw ConfigError("config must be a JSON object");
    const auto d = layer.find("decode");
    if (d != layer.end() && d->is_object() && d->contains("task")) {
      const auto& t = d->at("task");
      if (!t.is_string()) throw ConfigError("config key 'decode.task' expects string");
      task = t.get<std::string>();
    }
  }
  json tree = to_json(RunConfig::defaults(task));
  for (const auto& layer : layers) merge_strict(tree, layer);
  auto c = config_from_json(tree);
  c.validate();
  return c;
}

TokenSeq context_tokens(const Vocab& vocab, const std::string& x) {
  TokenSeq ctx{vocab.bos()};
  const auto ids = vocab.encode(x);
  ctx.insert(ctx.end(), ids.begin(), ids.end());
  return ctx;
}

std::vector<TokenSeq> ending_segments(const Vocab& vocab, const std::string& z, int segments) {
  const auto tokens = vocab.encode(z);
  auto pieces = split_on_period(tokens, vocab.period());
  if (segments == 1 || static_cast<int>(pieces.size()) != segments) return {tokens};
  return pieces;
}

InstanceOutput decode_instance(const LanguageModel& lm, const CoherenceModel* ranker, const corpus::Instance& inst,
                               const DecodeSection& cfg, std::uint64_t seed) {
  const Vocab& vocab = lm.vocab();
  if (inst.task != cfg.task) throw ConfigError("instance " + inst.id + " is " + inst.task + ", run is " + cfg.task);
  if (cfg.mode != DecodeMode::ZeroShot && ranker == nullptr) throw ConfigError("ranking needs a ranker checkpoint");

  InstanceOutput out;
  out.id = inst.id;
  out.task = inst.task;
  const TokenSeq ctx = context_tokens(vocab, inst.x);
  const TokenSeq x = vocab.encode(inst.x);
  const TokenSeq z = vocab.encode(inst.z);
  const bool abductive = inst.task == "abductive";
  DecodeConfig engine = cfg.engine;
  engine.seed = seed;

  std::vector<Candidate> candidates;
  if (cfg.mode == DecodeMode::Delorean) {
    DecodeResult r;
    if (abductive) {
      const auto constraint = make_constraint(cfg.constraint, lm, ctx, z);
      r = run(lm, *constraint, ctx, engine);
    } else {
      const auto targets = ending_segments(vocab, inst.z, engine.segments);
      engine.segments = static_cast<int>(targets.size());
      if (engine.segments == 1) engine.n_tokens = static_cast<int>(targets[0].size());
      const ConstraintFactory factory = [&](const TokenSeq& c, const TokenSeq& target) {
        return make_constraint(cfg.constraint, lm, c, target);
      };
      r = segmented_run(lm, factory, ctx, targets, engine);
    }
    candidates = std::move(r.candidates);
    out.traces = std::move(r.traces);
  } else {
    const auto targets = abductive ? std::vector<TokenSeq>{} : ending_segments(vocab, inst.z, engine.segments);
    auto one = [&](Sampler& sampler) {
      if (abductive) return zero_shot(lm, ctx, engine.n_tokens, engine.budget(), sampler);
      return segmented_zero_shot(lm, ctx, targets, engine, sampler);
    };
    if (cfg.mode == DecodeMode::ZeroShot) {
      Sampler sampler(engine.mode, engine.tau_sample, engine.top_k, splitmix64(seed));
      out.output = one(sampler).tokens;
      return out;
    }
    const int count = abductive ? engine.iterations : static_cast<int>(engine.entries().size());
    for (int c = 0; c < count; ++c) {
      Sampler sampler(SampleMode::TopK, engine.tau_sample, engine.top_k, splitmix64(seed + static_cast<std::uint64_t>(c)));
      auto cand = one(sampler);
      cand.iteration = c + 1;
      cand.config_id = c;
      candidates.push_back(std::move(cand));
    }
  }
  if (candidates.empty()) return out;
  out.ranked = rank(*ranker, inst.task, x, z, candidates);
  out.output = out.ranked.front().candidate.tokens;
  return out;
}

std::vector<InstanceOutput> decode_instances(const LanguageModel& lm, const CoherenceModel* ranker,
                                             const std::vector<corpus::Instance>& instances,
                                             const DecodeSection& cfg, std::uint64_t global_seed, int workers) {
  const long n = static_cast<long>(instances.size());
  std::vector<InstanceOutput> out(instances.size());
  std::vector<std::exception_ptr> errors(instances.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(workers)
  for (long i = 0; i < n; ++i) {
    try {
      const auto& inst = instances[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(i)] = decode_instance(lm, ranker, inst, cfg, instance_seed(global_seed, inst.id));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

json output_record(const Vocab& vocab, const InstanceOutput& out) {
  return {{"id", out.id}, {"task", out.task}, {"output", vocab.decode(out.output)}};
}

json candidates_record(const Vocab& vocab, const InstanceOutput& out) {
  json list = json::array();
  for (const auto& r : out.ranked) {
    list.push_back({{"rank", r.rank},
                    {"score", r.score},
                    {"iteration", r.candidate.iteration},
                    {"config_id", r.candidate.config_id},
                    {"complete", r.candidate.complete},
                    {"text", vocab.decode(r.candidate.tokens)},
                    {"raw", vocab.decode(r.candidate.raw)}});
  }
  return {{"id", out.id}, {"candidates", list}};
}

json traces_record(const InstanceOutput& out) {
  json list = json::array();
  for (const auto& t : out.traces) {
    list.push_back({{"config_id", t.config_id},
                    {"segment", t.segment},
                    {"initial_loss", t.initial_loss},
                    {"loss", t.loss},
                    {"loss_after", t.loss_after},
                    {"grad_norm", t.grad_norm},
                    {"final_loss", t.final_loss},
                    {"aborted", t.aborted},
                    {"error", t.error}});
  }
  return {{"id", out.id}, {"traces", list}};
}

}  // namespace retro
