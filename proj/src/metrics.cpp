#include "retro/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "retro/error.hpp"

namespace retro::metrics {
namespace {

using Counts = std::map<std::vector<TokenId>, double>;

Counts ngrams(const TokenSeq& s, std::size_t n) {
  Counts c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) c[std::vector<TokenId>(s.begin() + i, s.begin() + i + n)] += 1.0;
  return c;
}

bool has_reference(const std::vector<TokenSeq>& refs) {
  return std::any_of(refs.begin(), refs.end(), [](const TokenSeq& r) { return !r.empty(); });
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

double greedy_side(const Matrix& table, const TokenSeq& from, const TokenSeq& to) {
  double sum = 0.0;
  for (const TokenId a : from) {
    double best = -1.0;
    for (const TokenId b : to) best = std::max(best, cosine(table.row(a), table.row(b)));
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

void check_ids(const Matrix& table, const TokenSeq& s) {
  for (const TokenId t : s) {
    if (t < 0 || static_cast<std::size_t>(t) >= table.rows()) throw UnknownToken(std::to_string(t));
  }
}

}  // namespace

BleuStats bleu_stats(const TokenSeq& hyp, const std::vector<TokenSeq>& refs) {
  if (!has_reference(refs)) throw EmptyReference();
  BleuStats st;
  st.hyp_length = static_cast<double>(hyp.size());
  double best_gap = -1.0;
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.size());
    const double gap = std::abs(len - st.hyp_length);
    if (best_gap < 0.0 || gap < best_gap || (gap == best_gap && len < st.ref_length)) {
      best_gap = gap;
      st.ref_length = len;
    }
  }
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngrams(hyp, n);
    Counts max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    for (const auto& [g, c] : h) {
      st.total[n - 1] += c;
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) st.matched[n - 1] += std::min(c, it->second);
    }
  }
  return st;
}

double bleu_from(const BleuStats& st) {
  if (st.hyp_length == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p;
    if (st.total[n] == 0.0) {
      p = kBleuEpsilon;
    } else if (st.matched[n] == 0.0) {
      p = kBleuEpsilon / st.total[n];
    } else {
      p = st.matched[n] / st.total[n];
    }
    log_sum += std::log(p);
  }
  const double bp = st.hyp_length >= st.ref_length ? 1.0 : std::exp(1.0 - st.ref_length / st.hyp_length);
  return std::clamp(bp * std::exp(log_sum / 4.0), 0.0, 1.0);
}

double bleu4(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references) {
  return bleu_from(bleu_stats(hypothesis, references));
}

double corpus_bleu4(const std::vector<TokenSeq>& hypotheses, const std::vector<std::vector<TokenSeq>>& references) {
  if (hypotheses.size() != references.size()) throw std::invalid_argument("hypothesis and reference counts differ");
  if (hypotheses.empty()) throw EmptyReference();
  BleuStats pooled;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto s = bleu_stats(hypotheses[i], references[i]);
    for (std::size_t n = 0; n < 4; ++n) {
      pooled.matched[n] += s.matched[n];
      pooled.total[n] += s.total[n];
    }
    pooled.hyp_length += s.hyp_length;
    pooled.ref_length += s.ref_length;
  }
  return bleu_from(pooled);
}

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PRF rouge_l(const TokenSeq& hyp, const TokenSeq& ref) {
  if (hyp.empty() || ref.empty()) return {};
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0.0) return {};
  PRF out;
  out.p = lcs / static_cast<double>(hyp.size());
  out.r = lcs / static_cast<double>(ref.size());
  out.f = 2.0 * out.p * out.r / (out.p + out.r);
  return out;
}

PRF embed_score(const Matrix& table, const TokenSeq& hyp, const TokenSeq& ref) {
  if (ref.empty()) throw EmptyReference();
  check_ids(table, hyp);
  check_ids(table, ref);
  if (hyp.empty()) return {};
  PRF out;
  out.p = (greedy_side(table, hyp, ref) + 1.0) / 2.0;
  out.r = (greedy_side(table, ref, hyp) + 1.0) / 2.0;
  out.f = out.p + out.r > 0.0 ? 2.0 * out.p * out.r / (out.p + out.r) : 0.0;
  return out;
}

Matrix embedding_table(const LanguageModel& lm) {
  const auto v = static_cast<std::size_t>(lm.shape().vocab_size);
  const auto d = static_cast<std::size_t>(lm.shape().d_model);
  Matrix m(v, d);
  for (std::size_t t = 0; t < v; ++t) {
    const auto e = lm.embedding(static_cast<TokenId>(t));
    std::copy(e.begin(), e.end(), m.row(t).begin());
  }
  return m;
}

MetricReport score_one(const Matrix& table, const TokenSeq& hyp, const TokenSeq& ref) {
  if (ref.empty()) throw EmptyReference();
  MetricReport r;
  r.bleu4 = bleu4(hyp, {ref});
  r.rouge_l_f = rouge_l(hyp, ref).f;
  const auto e = embed_score(table, hyp, ref);
  r.embed_p = e.p;
  r.embed_r = e.r;
  r.embed_f = e.f;
  r.count = 1;
  return r;
}

MetricReport score_corpus(const Matrix& table, const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("hypothesis and reference counts differ");
  if (hyps.empty()) throw EmptyReference();
  MetricReport r;
  std::vector<std::vector<TokenSeq>> wrapped;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto one = score_one(table, hyps[i], refs[i]);
    r.rouge_l_f += one.rouge_l_f;
    r.embed_p += one.embed_p;
    r.embed_r += one.embed_r;
    r.embed_f += one.embed_f;
    wrapped.push_back({refs[i]});
  }
  const double n = static_cast<double>(hyps.size());
  r.rouge_l_f /= n;
  r.embed_p /= n;
  r.embed_r /= n;
  r.embed_f /= n;
  r.bleu4 = corpus_bleu4(hyps, wrapped);
  r.count = hyps.size();
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"bleu4", r.bleu4},     {"rouge_l_f", r.rouge_l_f}, {"embed_p", r.embed_p},
          {"embed_r", r.embed_r}, {"embed_f", r.embed_f},     {"count", r.count}};
}

std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::size_t width = 6;
  for (const auto& [name, r] : rows) width = std::max(width, name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "system" << std::right << std::setw(10) << "BLEU-4"
      << std::setw(10) << "ROUGE-L" << std::setw(10) << "embed-F" << std::setw(8) << "n" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& [name, r] : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << name << std::right << std::setw(10) << 100.0 * r.bleu4
        << std::setw(10) << 100.0 * r.rouge_l_f << std::setw(10) << 100.0 * r.embed_f << std::setw(8) << r.count
        << '\n';
  }
  return out.str();
}

}  // namespace retro::metrics
