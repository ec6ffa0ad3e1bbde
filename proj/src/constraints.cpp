#include "retro/constraints.hpp"

#include <cmath>

#include "retro/error.hpp"
#include "retro/kernels.hpp"

namespace retro {

std::string to_string(ConstraintKind kind) {
  switch (kind) {
    case ConstraintKind::AbductiveFuture: return "abductive_future";
    case ConstraintKind::CounterfactualKl: return "counterfactual_kl";
    case ConstraintKind::ZeroProbe: return "zero_probe";
    case ConstraintKind::QuadraticProbe: return "quadratic_probe";
  }
  return "unknown";
}

ConstraintKind constraint_kind_from(const std::string& name) {
  for (auto k : {ConstraintKind::AbductiveFuture, ConstraintKind::CounterfactualKl, ConstraintKind::ZeroProbe,
                 ConstraintKind::QuadraticProbe}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown constraint kind '" + name + "'");
}

void ConstraintSpec::validate() const {
  if (kind == ConstraintKind::CounterfactualKl && !(tau_kl > 0.0)) throw ConfigError("tau_kl must be > 0");
  if (!(tau_input > 0.0)) throw ConfigError("tau_input must be > 0");
}

AbductiveLoss::AbductiveLoss(const LanguageModel& lm, TokenSeq context, TokenSeq future, double tau_input,
                             bool prefix_mode)
    : lm_(&lm),
      context_(std::move(context)),
      future_(std::move(future)),
      tau_input_(tau_input),
      prefix_mode_(prefix_mode) {
  if (context_.empty()) throw std::invalid_argument("abductive loss needs a context");
  if (future_.empty()) throw std::invalid_argument("abductive loss needs a non-empty future constraint");
}

double AbductiveLoss::prefix_loss(const Matrix& soft, int rows, Matrix* grad) const {
  SequenceInput in;
  in.prefix = context_;
  in.soft = {&soft, rows, tau_input_};
  // The last future token is only ever a target.
  in.suffix = std::span<const TokenId>(future_).first(future_.size() - 1);
  std::vector<Target> targets;
  const int first = static_cast<int>(context_.size()) + rows - 1;
  for (std::size_t i = 0; i < future_.size(); ++i) targets.push_back({first + static_cast<int>(i), future_[i]});
  return lm_->nll(in, targets, grad);
}

LossAndGrad AbductiveLoss::evaluate(const Matrix& soft) const {
  const int N = static_cast<int>(soft.rows());
  if (N < 1) throw std::invalid_argument("empty soft sequence");
  LossAndGrad out{0.0, Matrix(soft.rows(), soft.cols())};
  if (!prefix_mode_) {
    out.loss = prefix_loss(soft, N, &out.grad);
    return out;
  }
  Matrix g;
  for (int m = 1; m <= N; ++m) {
    out.loss += prefix_loss(soft, m, &g) / N;
    for (int r = 0; r < m; ++r) {
      auto dst = out.grad.row(r);
      const auto src = g.row(r);
      for (std::size_t v = 0; v < dst.size(); ++v) dst[v] += src[v] / N;
    }
  }
  return out;
}

double AbductiveLoss::loss(const Matrix& soft) const {
  const int N = static_cast<int>(soft.rows());
  if (!prefix_mode_) return prefix_loss(soft, N, nullptr);
  double total = 0.0;
  for (int m = 1; m <= N; ++m) total += prefix_loss(soft, m, nullptr) / N;
  return total;
}

CounterfactualKl::CounterfactualKl(TokenSeq original_ending, double tau, bool pad_to_length, TokenId pad)
    : ending_(std::move(original_ending)), tau_(tau), pad_(pad_to_length), pad_id_(pad) {
  if (!(tau_ > 0.0)) throw ConfigError("tau_kl must be > 0");
}

TokenSeq CounterfactualKl::targets_for(std::size_t rows) const {
  if (ending_.size() == rows) return ending_;
  if (!pad_) throw LengthMismatch(ending_.size(), rows);
  TokenSeq t(ending_.begin(), ending_.begin() + static_cast<long>(std::min(rows, ending_.size())));
  t.resize(rows, pad_id_);
  return t;
}

LossAndGrad CounterfactualKl::evaluate(const Matrix& soft) const {
  const auto targets = targets_for(soft.rows());
  LossAndGrad out{0.0, Matrix(soft.rows(), soft.cols())};
  std::vector<double> scaled(soft.cols());
  for (std::size_t n = 0; n < soft.rows(); ++n) {
    const auto row = soft.row(n);
    for (std::size_t v = 0; v < row.size(); ++v) scaled[v] = row[v] / tau_;
    // d/d(row) = (softmax(row / tau) - onehot) / tau
    out.loss += kernels::cross_entropy(out.grad.row(n), scaled, targets[n], 1.0 / tau_);
  }
  return out;
}

LossAndGrad ZeroProbe::evaluate(const Matrix& soft) const { return {0.0, Matrix(soft.rows(), soft.cols())}; }

LossAndGrad QuadraticProbe::evaluate(const Matrix& soft) const {
  if (!center_.empty() && (center_.rows() != soft.rows() || center_.cols() != soft.cols())) {
    throw std::invalid_argument("quadratic probe center shape");
  }
  LossAndGrad out{0.0, Matrix(soft.rows(), soft.cols())};
  const auto x = soft.flat();
  auto g = out.grad.flat();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double diff = x[i] - (center_.empty() ? scalar_ : center_.flat()[i]);
    out.loss += diff * diff;
    g[i] = 2.0 * diff;
  }
  return out;
}

std::unique_ptr<Constraint> make_constraint(const ConstraintSpec& spec, const LanguageModel& lm,
                                            const TokenSeq& context, const TokenSeq& target) {
  spec.validate();
  switch (spec.kind) {
    case ConstraintKind::AbductiveFuture:
      return std::make_unique<AbductiveLoss>(lm, context, target, spec.tau_input, spec.prefix_mode);
    case ConstraintKind::CounterfactualKl:
      return std::make_unique<CounterfactualKl>(target, spec.tau_kl, spec.pad_to_length, lm.vocab().pad());
    case ConstraintKind::ZeroProbe: return std::make_unique<ZeroProbe>();
    case ConstraintKind::QuadraticProbe: return std::make_unique<QuadraticProbe>(spec.probe_center);
  }
  throw ConfigError("unknown constraint kind");
}

double hard_future_nll(const LanguageModel& lm, const TokenSeq& context, const TokenSeq& hypothesis,
                       const TokenSeq& future) {
  if (future.empty()) return 0.0;
  TokenSeq seq = context;
  seq.insert(seq.end(), hypothesis.begin(), hypothesis.end());
  const int first = static_cast<int>(seq.size()) - 1;
  seq.insert(seq.end(), future.begin(), future.end() - 1);
  std::vector<Target> targets;
  for (std::size_t i = 0; i < future.size(); ++i) targets.push_back({first + static_cast<int>(i), future[i]});
  SequenceInput in;
  in.prefix = seq;
  return lm.nll(in, targets);
}

}  // namespace retro
