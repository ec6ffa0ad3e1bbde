#pragma once

#include <memory>
#include <string>

#include "retro/matrix.hpp"
#include "retro/model.hpp"

namespace retro {

enum class ConstraintKind { AbductiveFuture, CounterfactualKl, ZeroProbe, QuadraticProbe };

std::string to_string(ConstraintKind kind);
ConstraintKind constraint_kind_from(const std::string& name);  // throws ConfigError

struct ConstraintSpec {
  ConstraintKind kind = ConstraintKind::AbductiveFuture;
  double tau_kl = 1.0;
  // Abductive only: average the loss over every prefix of the soft sequence.
  bool prefix_mode = false;
  // Counterfactual only: pad Z with <pad> (or truncate it) to the soft length
  // instead of raising LengthMismatch.
  bool pad_to_length = false;
  // Temperature of the soft positions seen by the abductive loss; this is the
  // relaxation the backward gradient flows through.
  double tau_input = 1.0;
  // Quadratic probe minimum, broadcast to every coordinate.
  double probe_center = 0.0;

  void validate() const;
};

// A differentiable loss L(X, Y~, Z) of the N x V soft sequence.
class Constraint {
 public:
  virtual ~Constraint() = default;
  virtual LossAndGrad evaluate(const Matrix& soft) const = 0;
  virtual double loss(const Matrix& soft) const { return evaluate(soft).loss; }
};

// -sum_n log P(z_n | context, Y~, z_<n). `context` is the full hard prefix
// (beginning with <bos>).
class AbductiveLoss final : public Constraint {
 public:
  AbductiveLoss(const LanguageModel& lm, TokenSeq context, TokenSeq future, double tau_input = 1.0,
                bool prefix_mode = false);
  LossAndGrad evaluate(const Matrix& soft) const override;
  double loss(const Matrix& soft) const override;

 private:
  double prefix_loss(const Matrix& soft, int rows, Matrix* grad) const;

  const LanguageModel* lm_;
  TokenSeq context_, future_;
  double tau_input_;
  bool prefix_mode_;
};

// -sum_n log softmax(y~_n / tau)[z_n]: the KL from the one-hot original ending.
class CounterfactualKl final : public Constraint {
 public:
  CounterfactualKl(TokenSeq original_ending, double tau, bool pad_to_length = false, TokenId pad = 3);
  LossAndGrad evaluate(const Matrix& soft) const override;

 private:
  TokenSeq targets_for(std::size_t rows) const;

  TokenSeq ending_;
  double tau_;
  bool pad_;
  TokenId pad_id_;
};

class ZeroProbe final : public Constraint {
 public:
  LossAndGrad evaluate(const Matrix& soft) const override;
};

// sum (y~ - c)^2 with gradient 2 (y~ - c). An empty center means the scalar one.
class QuadraticProbe final : public Constraint {
 public:
  explicit QuadraticProbe(double center = 0.0) : scalar_(center) {}
  explicit QuadraticProbe(Matrix center) : center_(std::move(center)) {}
  LossAndGrad evaluate(const Matrix& soft) const override;

 private:
  double scalar_ = 0.0;
  Matrix center_;
};

std::unique_ptr<Constraint> make_constraint(const ConstraintSpec& spec, const LanguageModel& lm,
                                            const TokenSeq& context, const TokenSeq& target);

// -log P_LM(Z | context, Y) for a hard hypothesis Y.
double hard_future_nll(const LanguageModel& lm, const TokenSeq& context, const TokenSeq& hypothesis,
                       const TokenSeq& future);

}  // namespace retro
