#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "retro/constraints.hpp"
#include "retro/matrix.hpp"
#include "retro/model.hpp"

namespace retro {

enum class SampleMode { Greedy, TopK };
enum class Harvest { PerIteration, FinalIteration };

struct ScheduleEntry {
  int iterations = 0;
  int backward_steps = 0;
  friend bool operator==(const ScheduleEntry&, const ScheduleEntry&) = default;
};

struct DecodeConfig {
  int n_tokens = 15;
  int iterations = 20;
  int backward_steps = 20;
  double step_size = 0.0003;
  double mix_weight = 0.88;
  double tau_sample = 1.0;
  // Temperature of the expected embedding through which the forward pass feeds
  // each mixed row back to the LM. 0 feeds the row's argmax token, so with
  // gamma = 1 the pass is exactly the LM's own greedy decoding.
  double tau_input = 0.0;
  SampleMode mode = SampleMode::Greedy;
  int top_k = 40;
  int overgen_budget = -1;  // negative: N extra tokens
  std::uint64_t seed = 0;
  int segments = 1;
  std::vector<ScheduleEntry> schedule;  // empty: one entry (iterations, backward_steps)
  Harvest harvest = Harvest::PerIteration;

  static DecodeConfig abductive_defaults();
  static DecodeConfig counterfactual_defaults();

  void validate() const;
  int budget() const { return overgen_budget < 0 ? n_tokens : overgen_budget; }
  std::vector<ScheduleEntry> entries() const;
};

struct Candidate {
  TokenSeq tokens;  // pruned to complete sentences
  TokenSeq raw;     // before pruning
  bool complete = true;
  int iteration = 0;  // 1-based
  int config_id = 0;
  std::optional<double> score;
};

// Diagnostics of one schedule entry (or one segment of it).
struct DecodeTrace {
  int config_id = 0;
  int segment = 0;
  double initial_loss = 0.0;         // constraint loss of the greedy initialization
  std::vector<double> loss;          // per iteration, before the backward pass
  std::vector<double> loss_after;    // per iteration, after the backward pass
  std::vector<double> grad_norm;     // per iteration, first backward step
  std::vector<double> backward_seconds;
  std::vector<double> forward_seconds;
  double final_loss = 0.0;           // constraint loss of the last mixed logits
  bool aborted = false;
  std::string error;
};

struct DecodeResult {
  std::vector<Candidate> candidates;
  std::vector<DecodeTrace> traces;
};

// Draws tokens from logit rows. Greedy picks the lowest id among maxima; top-k
// samples from softmax(row / tau) renormalized over the k largest logits.
class Sampler {
 public:
  Sampler(SampleMode mode, double tau, int top_k, std::uint64_t seed);
  TokenId draw(std::span<const double> logits);

 private:
  SampleMode mode_;
  double tau_;
  int top_k_;
  std::mt19937_64 rng_;
};

TokenSeq sample(const Matrix& soft, SampleMode mode, double tau, std::uint64_t seed, int top_k = 40);

// Greedy hard continuation logits: row n is the LM's logits at step n while
// decoding greedily from the context.
Matrix initialize(const LanguageModel& lm, const TokenSeq& context, int n_tokens);

// `steps` gradient-descent updates y~ <- y~ - lambda * grad L, recomputing the
// gradient each step. Writes the first-step gradient norm when asked.
Matrix backward_pass(const Constraint& constraint, const Matrix& soft, double step_size, int steps,
                     double* first_grad_norm = nullptr);

// Left-to-right recomputation: row n = gamma * f_n + (1 - gamma) * backward row n,
// where f_n is conditioned on the context and the already mixed rows 1..n-1.
Matrix forward_pass(const LanguageModel& lm, const TokenSeq& context, const Matrix& backward, double mix_weight,
                    double tau_input);

// Truncates at the last PERIOD; without one the sequence is returned whole and
// flagged incomplete.
std::pair<TokenSeq, bool> prune(const TokenSeq& raw, TokenId period);

// Mixes forward and backward logits like forward_pass, then keeps decoding
// from pure forward logits past N until a PERIOD (or <eos>) or the budget runs
// out. Tokens are drawn from every row with `sampler`; <eos> ends the sequence.
Candidate overgenerate_and_prune(const LanguageModel& lm, const TokenSeq& context, const Matrix& backward,
                                 double mix_weight, double tau_input, int budget, Sampler& sampler,
                                 Matrix* mixed_out = nullptr);

// Zero-shot baseline: hard continuation of the context for N tokens plus the
// same over-generation and pruning rule.
Candidate zero_shot(const LanguageModel& lm, const TokenSeq& context, int n_tokens, int budget, Sampler& sampler);

DecodeResult run(const LanguageModel& lm, const Constraint& constraint, const TokenSeq& context,
                 const DecodeConfig& cfg);

// Segment i is decoded with the context extended by the sentences chosen for
// segments 1..i-1, the constraint built from target_segments[i] and N set to
// that segment's length. Each segment contributes the first sentence of its
// pruned output; candidates are the concatenations, one per schedule entry.
using ConstraintFactory = std::function<std::unique_ptr<Constraint>(const TokenSeq& context, const TokenSeq& target)>;
DecodeResult segmented_run(const LanguageModel& lm, const ConstraintFactory& factory, const TokenSeq& context,
                           const std::vector<TokenSeq>& target_segments, const DecodeConfig& cfg);

std::vector<TokenSeq> split_on_period(const TokenSeq& seq, TokenId period);

}  // namespace retro
