#include "retro/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "retro/error.hpp"
#include "retro/kernels.hpp"
#include "retro/seed.hpp"

namespace retro {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Rollout {
  Matrix rows;
  TokenSeq raw;
};

// One left-to-right pass over N positions. With `backward` the rows are mixed
// and fed back softly; without it the rows are pure forward logits and the
// drawn tokens are fed back as hard tokens. With `extend` decoding continues
// past N on pure forward logits until the sequence ends a sentence.
Rollout roll(const LanguageModel& lm, const TokenSeq& context, int n_tokens, const Matrix* backward,
             double mix_weight, double tau_input, Sampler& sampler, bool extend, int budget) {
  const auto& shape = lm.shape();
  const int V = shape.vocab_size;
  if (context.empty()) throw std::invalid_argument("decoding needs a non-empty context");
  const std::size_t needed = context.size() + static_cast<std::size_t>(n_tokens) +
                             (extend ? static_cast<std::size_t>(budget) : 0);
  if (needed > static_cast<std::size_t>(shape.max_len)) throw ContextOverflow(needed, shape.max_len);
  if (backward != nullptr && (static_cast<int>(backward->rows()) != n_tokens || static_cast<int>(backward->cols()) != V)) {
    throw std::invalid_argument("backward logits have the wrong shape");
  }
  const TokenId eos = lm.vocab().eos();
  const TokenId period = lm.vocab().period();

  Rollout out{Matrix(static_cast<std::size_t>(n_tokens), static_cast<std::size_t>(V)), {}};
  IncrementalState st(lm.body());
  for (TokenId t : context) st.push_token(t);
  std::vector<double> f(V);
  bool ended = false;
  for (int n = 0; n < n_tokens; ++n) {
    lm.logits_from(st, f);
    auto row = out.rows.row(n);
    if (backward != nullptr) {
      const auto b = backward->row(n);
      for (int v = 0; v < V; ++v) row[v] = mix_weight * f[v] + (1.0 - mix_weight) * b[v];
    } else {
      std::copy(f.begin(), f.end(), row.begin());
    }
    const TokenId y = sampler.draw(row);
    if (!ended) {
      if (y == eos) {
        ended = true;
      } else {
        out.raw.push_back(y);
      }
    }
    const bool more = n + 1 < n_tokens || (extend && !ended && y != period && budget > 0);
    if (!more) continue;
    if (backward != nullptr) {
      st.push_soft(row, tau_input);
    } else {
      st.push_token(y);
    }
  }
  if (!extend || ended || (!out.raw.empty() && out.raw.back() == period)) return out;
  for (int e = 0; e < budget; ++e) {
    lm.logits_from(st, f);
    const TokenId y = sampler.draw(f);
    if (y == eos) break;
    out.raw.push_back(y);
    if (y == period || e + 1 == budget) break;
    if (backward != nullptr) {
      st.push_soft(f, tau_input);
    } else {
      st.push_token(y);
    }
  }
  return out;
}

Candidate make_candidate(TokenSeq raw, TokenId period) {
  Candidate c;
  auto [tokens, complete] = prune(raw, period);
  c.tokens = std::move(tokens);
  c.complete = complete;
  c.raw = std::move(raw);
  return c;
}

double frobenius(const Matrix& m) {
  double s = 0.0;
  for (double v : m.flat()) s += v * v;
  return std::sqrt(s);
}

void check_shape(const Matrix& m, std::size_t rows, std::size_t cols) {
  if (m.rows() != rows || m.cols() != cols || !m.all_finite()) {
    throw std::logic_error("soft sequence lost its shape or became non-finite");
  }
}

}  // namespace

DecodeConfig DecodeConfig::abductive_defaults() { return DecodeConfig{}; }

DecodeConfig DecodeConfig::counterfactual_defaults() {
  DecodeConfig c;
  c.step_size = 0.0004;
  c.mix_weight = 0.92;
  c.segments = 3;
  c.harvest = Harvest::FinalIteration;
  for (int t : {5, 10}) {
    for (int s : {5, 8, 10, 15}) c.schedule.push_back({t, s});
  }
  return c;
}

void DecodeConfig::validate() const {
  if (n_tokens < 1) throw ConfigError("n_tokens must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (backward_steps < 0) throw ConfigError("backward_steps must be >= 0");
  if (!(step_size > 0.0)) throw ConfigError("step_size must be > 0");
  if (!(mix_weight > 0.0 && mix_weight <= 1.0)) throw ConfigError("mix_weight must lie in (0, 1]");
  if (!(tau_sample > 0.0)) throw ConfigError("tau_sample must be > 0");
  if (!(tau_input >= 0.0)) throw ConfigError("tau_input must be >= 0");
  if (mode == SampleMode::TopK && top_k < 1) throw ConfigError("top_k must be >= 1");
  if (segments < 1) throw ConfigError("segments must be >= 1");
  for (const auto& e : schedule) {
    if (e.iterations < 1 || e.backward_steps < 0) throw ConfigError("invalid schedule entry");
  }
}

std::vector<ScheduleEntry> DecodeConfig::entries() const {
  if (!schedule.empty()) return schedule;
  return {{iterations, backward_steps}};
}

Sampler::Sampler(SampleMode mode, double tau, int top_k, std::uint64_t seed)
    : mode_(mode), tau_(tau), top_k_(top_k), rng_(seed) {
  if (!(tau_ > 0.0)) throw ConfigError("sampling temperature must be > 0");
}

TokenId Sampler::draw(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("empty logit row");
  if (mode_ == SampleMode::Greedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const int V = static_cast<int>(logits.size());
  const int k = std::min(top_k_, V);
  std::vector<int> ids(V);
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  std::vector<double> scaled(k), probs(k);
  for (int i = 0; i < k; ++i) scaled[i] = logits[ids[i]];
  kernels::softmax(probs, scaled, 1.0 / tau_);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += probs[i];
    if (u < acc) return ids[i];
  }
  return ids[k - 1];
}

TokenSeq sample(const Matrix& soft, SampleMode mode, double tau, std::uint64_t seed, int top_k) {
  Sampler s(mode, tau, top_k, seed);
  TokenSeq out;
  out.reserve(soft.rows());
  for (std::size_t r = 0; r < soft.rows(); ++r) out.push_back(s.draw(soft.row(r)));
  return out;
}

Matrix initialize(const LanguageModel& lm, const TokenSeq& context, int n_tokens) {
  if (n_tokens < 1) throw ConfigError("n_tokens must be >= 1");
  Sampler greedy(SampleMode::Greedy, 1.0, 1, 0);
  return roll(lm, context, n_tokens, nullptr, 1.0, 1.0, greedy, false, 0).rows;
}

Matrix backward_pass(const Constraint& constraint, const Matrix& soft, double step_size, int steps,
                     double* first_grad_norm) {
  Matrix y = soft;
  for (int s = 0; s < steps; ++s) {
    const auto r = loss_grad([&](const Matrix& m) { return constraint.evaluate(m); }, y);
    if (s == 0 && first_grad_norm != nullptr) *first_grad_norm = frobenius(r.grad);
    auto yf = y.flat();
    const auto g = r.grad.flat();
    for (std::size_t i = 0; i < yf.size(); ++i) yf[i] -= step_size * g[i];
  }
  if (steps == 0 && first_grad_norm != nullptr) *first_grad_norm = 0.0;
  return y;
}

Matrix forward_pass(const LanguageModel& lm, const TokenSeq& context, const Matrix& backward, double mix_weight,
                    double tau_input) {
  Sampler greedy(SampleMode::Greedy, 1.0, 1, 0);
  return roll(lm, context, static_cast<int>(backward.rows()), &backward, mix_weight, tau_input, greedy, false, 0)
      .rows;
}

std::pair<TokenSeq, bool> prune(const TokenSeq& raw, TokenId period) {
  for (std::size_t i = raw.size(); i > 0; --i) {
    if (raw[i - 1] == period) return {TokenSeq(raw.begin(), raw.begin() + static_cast<long>(i)), true};
  }
  return {raw, false};
}

Candidate overgenerate_and_prune(const LanguageModel& lm, const TokenSeq& context, const Matrix& backward,
                                 double mix_weight, double tau_input, int budget, Sampler& sampler,
                                 Matrix* mixed_out) {
  if (budget < 0) throw ConfigError("over-generation budget must be >= 0");
  auto r = roll(lm, context, static_cast<int>(backward.rows()), &backward, mix_weight, tau_input, sampler, true,
                budget);
  if (mixed_out != nullptr) *mixed_out = std::move(r.rows);
  return make_candidate(std::move(r.raw), lm.vocab().period());
}

Candidate zero_shot(const LanguageModel& lm, const TokenSeq& context, int n_tokens, int budget, Sampler& sampler) {
  if (n_tokens < 1) throw ConfigError("n_tokens must be >= 1");
  auto r = roll(lm, context, n_tokens, nullptr, 1.0, 1.0, sampler, true, budget);
  return make_candidate(std::move(r.raw), lm.vocab().period());
}

DecodeResult run(const LanguageModel& lm, const Constraint& constraint, const TokenSeq& context,
                 const DecodeConfig& cfg) {
  cfg.validate();
  const int N = cfg.n_tokens;
  const auto V = static_cast<std::size_t>(lm.shape().vocab_size);
  DecodeResult result;
  const auto entries = cfg.entries();
  for (std::size_t c = 0; c < entries.size(); ++c) {
    const auto& entry = entries[c];
    DecodeTrace trace;
    trace.config_id = static_cast<int>(c);
    Sampler sampler(cfg.mode, cfg.tau_sample, cfg.top_k, splitmix64(cfg.seed + c));
    std::vector<Candidate> found;
    try {
      Matrix y = initialize(lm, context, N);
      trace.initial_loss = constraint.loss(y);
      for (int t = 1; t <= entry.iterations; ++t) {
        auto t0 = Clock::now();
        double gnorm = 0.0;
        trace.loss.push_back(t == 1 ? trace.initial_loss : constraint.loss(y));
        Matrix yb = backward_pass(constraint, y, cfg.step_size, entry.backward_steps, &gnorm);
        trace.grad_norm.push_back(gnorm);
        trace.loss_after.push_back(entry.backward_steps > 0 ? constraint.loss(yb) : trace.loss.back());
        trace.backward_seconds.push_back(seconds_since(t0));

        t0 = Clock::now();
        const bool harvest = cfg.harvest == Harvest::PerIteration || t == entry.iterations;
        if (harvest) {
          Candidate cand = overgenerate_and_prune(lm, context, yb, cfg.mix_weight, cfg.tau_input, cfg.budget(),
                                                  sampler, &y);
          cand.iteration = t;
          cand.config_id = static_cast<int>(c);
          found.push_back(std::move(cand));
        } else {
          y = forward_pass(lm, context, yb, cfg.mix_weight, cfg.tau_input);
        }
        check_shape(y, static_cast<std::size_t>(N), V);
        trace.forward_seconds.push_back(seconds_since(t0));
      }
      trace.final_loss = constraint.loss(y);
    } catch (const NonFiniteGradient& e) {
      trace.aborted = true;
      trace.error = e.what();
      found.clear();
    }
    for (auto& cand : found) result.candidates.push_back(std::move(cand));
    result.traces.push_back(std::move(trace));
  }
  return result;
}

std::vector<TokenSeq> split_on_period(const TokenSeq& seq, TokenId period) {
  std::vector<TokenSeq> out;
  TokenSeq cur;
  for (TokenId t : seq) {
    cur.push_back(t);
    if (t == period) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

DecodeResult segmented_run(const LanguageModel& lm, const ConstraintFactory& factory, const TokenSeq& context,
                           const std::vector<TokenSeq>& target_segments, const DecodeConfig& cfg) {
  cfg.validate();
  if (target_segments.empty()) throw ConfigError("segmented decoding needs at least one target segment");
  if (static_cast<int>(target_segments.size()) != cfg.segments) {
    throw ConfigError("expected " + std::to_string(cfg.segments) + " target segments, got " +
                      std::to_string(target_segments.size()));
  }
  if (target_segments.size() == 1) {
    const auto constraint = factory(context, target_segments[0]);
    return run(lm, *constraint, context, cfg);
  }
  if (cfg.harvest != Harvest::FinalIteration) {
    throw ConfigError("multi-segment decoding produces one candidate per configuration; use final-iteration harvest");
  }
  const TokenId period = lm.vocab().period();
  DecodeResult result;
  const auto entries = cfg.entries();
  for (std::size_t c = 0; c < entries.size(); ++c) {
    TokenSeq ctx = context;
    Candidate joined;
    joined.config_id = static_cast<int>(c);
    joined.iteration = entries[c].iterations;
    bool ok = true;
    for (std::size_t i = 0; i < target_segments.size(); ++i) {
      if (target_segments[i].empty()) throw ConfigError("empty target segment");
      DecodeConfig sub = cfg;
      sub.n_tokens = static_cast<int>(target_segments[i].size());
      sub.schedule = {entries[c]};
      sub.segments = 1;
      sub.overgen_budget = cfg.overgen_budget;
      sub.seed = splitmix64(cfg.seed + c * 131 + i);
      const auto constraint = factory(ctx, target_segments[i]);
      auto part = run(lm, *constraint, ctx, sub);
      for (auto& tr : part.traces) {
        tr.config_id = static_cast<int>(c);
        tr.segment = static_cast<int>(i);
        result.traces.push_back(std::move(tr));
      }
      if (part.candidates.empty()) {
        ok = false;
        break;
      }
      const Candidate& seg = part.candidates.back();
      const auto sentences = split_on_period(seg.tokens, period);
      TokenSeq first = sentences.empty() ? TokenSeq{} : sentences.front();
      joined.complete = joined.complete && seg.complete;
      joined.raw.insert(joined.raw.end(), seg.raw.begin(), seg.raw.end());
      joined.tokens.insert(joined.tokens.end(), first.begin(), first.end());
      ctx.insert(ctx.end(), first.begin(), first.end());
    }
    if (ok) result.candidates.push_back(std::move(joined));
  }
  return result;
}

}  // namespace retro
