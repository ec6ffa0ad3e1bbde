#include "retro/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace retro::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr long kParallelWork = 1L << 16;

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)

// One head of one query row. probs receives `count` normalized weights.
inline void attend_head(double* out, double* probs, const double* q, const double* keys, const double* values,
                        int stride, int count, int head_dim, double scale) {
  double max_score = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < count; ++j) {
    const double* k = keys + static_cast<long>(j) * stride;
    double s = 0.0;
    for (int c = 0; c < head_dim; ++c) s += q[c] * k[c];
    s *= scale;
    probs[j] = s;
    max_score = std::max(max_score, s);
  }
  double sum = 0.0;
  for (int j = 0; j < count; ++j) {
    probs[j] = std::exp(probs[j] - max_score);
    sum += probs[j];
  }
  const double inv = 1.0 / sum;
  for (int j = 0; j < count; ++j) probs[j] *= inv;
  for (int c = 0; c < head_dim; ++c) out[c] = 0.0;
  for (int j = 0; j < count; ++j) {
    const double* v = values + static_cast<long>(j) * stride;
    const double p = probs[j];
    for (int c = 0; c < head_dim; ++c) out[c] += p * v[c];
  }
}

}  // namespace

void matmul_forward(std::span<double> out, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, int rows, int in_dim, int out_dim) {
  assert(out.size() >= static_cast<std::size_t>(rows) * out_dim);
  assert(in.size() >= static_cast<std::size_t>(rows) * in_dim);
  assert(w.size() == static_cast<std::size_t>(in_dim) * out_dim);
  const long work = static_cast<long>(rows) * in_dim * out_dim;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int r = 0; r < rows; ++r) {
    double* o = out.data() + static_cast<long>(r) * out_dim;
    const double* x = in.data() + static_cast<long>(r) * in_dim;
    if (bias.empty()) {
      std::fill(o, o + out_dim, 0.0);
    } else {
      std::copy(bias.begin(), bias.begin() + out_dim, o);
    }
    for (int k = 0; k < in_dim; ++k) {
      const double xk = x[k];
      const double* wk = w.data() + static_cast<long>(k) * out_dim;
      for (int c = 0; c < out_dim; ++c) o[c] += xk * wk[c];
    }
  }
}

void matmul_backward(std::span<double> d_in, std::span<double> d_w, std::span<double> d_bias,
                     std::span<const double> d_out, std::span<const double> in, std::span<const double> w,
                     int rows, int in_dim, int out_dim) {
  const long work = static_cast<long>(rows) * in_dim * out_dim;
  if (!d_in.empty()) {
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int r = 0; r < rows; ++r) {
      const double* g = d_out.data() + static_cast<long>(r) * out_dim;
      double* dx = d_in.data() + static_cast<long>(r) * in_dim;
      for (int k = 0; k < in_dim; ++k) {
        const double* wk = w.data() + static_cast<long>(k) * out_dim;
        double s = 0.0;
        for (int c = 0; c < out_dim; ++c) s += g[c] * wk[c];
        dx[k] += s;
      }
    }
  }
  if (!d_w.empty()) {
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int k = 0; k < in_dim; ++k) {
      double* dwk = d_w.data() + static_cast<long>(k) * out_dim;
      for (int r = 0; r < rows; ++r) {
        const double xk = in[static_cast<long>(r) * in_dim + k];
        const double* g = d_out.data() + static_cast<long>(r) * out_dim;
        for (int c = 0; c < out_dim; ++c) dwk[c] += xk * g[c];
      }
    }
  }
  if (!d_bias.empty()) {
    for (int r = 0; r < rows; ++r) {
      const double* g = d_out.data() + static_cast<long>(r) * out_dim;
      for (int c = 0; c < out_dim; ++c) d_bias[c] += g[c];
    }
  }
}

void project_rows(std::span<double> out, std::span<const double> h, std::span<const double> table, int rows,
                  int dim, int n_out) {
  const long work = static_cast<long>(rows) * dim * n_out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (int r = 0; r < rows; ++r) {
    const double* x = h.data() + static_cast<long>(r) * dim;
    double* o = out.data() + static_cast<long>(r) * n_out;
    for (int v = 0; v < n_out; ++v) {
      const double* t = table.data() + static_cast<long>(v) * dim;
      double s = 0.0;
      for (int c = 0; c < dim; ++c) s += x[c] * t[c];
      o[v] = s;
    }
  }
}

void project_rows_backward(std::span<double> d_h, std::span<double> d_table, std::span<const double> d_out,
                           std::span<const double> h, std::span<const double> table, int rows, int dim,
                           int n_out) {
  const long work = static_cast<long>(rows) * dim * n_out;
  if (!d_h.empty()) {
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int r = 0; r < rows; ++r) {
      const double* g = d_out.data() + static_cast<long>(r) * n_out;
      double* dx = d_h.data() + static_cast<long>(r) * dim;
      for (int v = 0; v < n_out; ++v) {
        const double gv = g[v];
        const double* t = table.data() + static_cast<long>(v) * dim;
        for (int c = 0; c < dim; ++c) dx[c] += gv * t[c];
      }
    }
  }
  if (!d_table.empty()) {
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int v = 0; v < n_out; ++v) {
      double* dt = d_table.data() + static_cast<long>(v) * dim;
      for (int r = 0; r < rows; ++r) {
        const double gv = d_out[static_cast<long>(r) * n_out + v];
        const double* x = h.data() + static_cast<long>(r) * dim;
        for (int c = 0; c < dim; ++c) dt[c] += gv * x[c];
      }
    }
  }
}

void layernorm_forward(std::span<double> out, std::span<double> mean, std::span<double> rstd,
                       std::span<const double> in, std::span<const double> gamma, std::span<const double> beta,
                       int rows, int dim) {
  constexpr double eps = 1e-5;
  for (int r = 0; r < rows; ++r) {
    const double* x = in.data() + static_cast<long>(r) * dim;
    double* o = out.data() + static_cast<long>(r) * dim;
    double m = 0.0;
    for (int c = 0; c < dim; ++c) m += x[c];
    m /= dim;
    double var = 0.0;
    for (int c = 0; c < dim; ++c) {
      const double d = x[c] - m;
      var += d * d;
    }
    var /= dim;
    const double s = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < dim; ++c) o[c] = (x[c] - m) * s * gamma[c] + beta[c];
    if (!mean.empty()) mean[r] = m;
    if (!rstd.empty()) rstd[r] = s;
  }
}

void layernorm_backward(std::span<double> d_in, std::span<double> d_gamma, std::span<double> d_beta,
                        std::span<const double> d_out, std::span<const double> in, std::span<const double> mean,
                        std::span<const double> rstd, std::span<const double> gamma, int rows, int dim) {
  for (int r = 0; r < rows; ++r) {
    const double* x = in.data() + static_cast<long>(r) * dim;
    const double* g = d_out.data() + static_cast<long>(r) * dim;
    const double m = mean[r];
    const double s = rstd[r];
    double mean_dnorm = 0.0;
    double mean_dnorm_xhat = 0.0;
    for (int c = 0; c < dim; ++c) {
      const double xhat = (x[c] - m) * s;
      const double dnorm = gamma[c] * g[c];
      mean_dnorm += dnorm;
      mean_dnorm_xhat += dnorm * xhat;
    }
    mean_dnorm /= dim;
    mean_dnorm_xhat /= dim;
    for (int c = 0; c < dim; ++c) {
      const double xhat = (x[c] - m) * s;
      if (!d_beta.empty()) d_beta[c] += g[c];
      if (!d_gamma.empty()) d_gamma[c] += xhat * g[c];
      if (!d_in.empty()) {
        const double dnorm = gamma[c] * g[c];
        d_in[static_cast<long>(r) * dim + c] += (dnorm - mean_dnorm - xhat * mean_dnorm_xhat) * s;
      }
    }
  }
}

void gelu_forward(std::span<double> out, std::span<const double> in) {
  const long n = static_cast<long>(in.size());
#pragma omp parallel for schedule(static) if (n > kParallelWork)
  for (long i = 0; i < n; ++i) {
    const double x = in[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + 0.044715 * x * x * x)));
  }
}

void gelu_backward(std::span<double> d_in, std::span<const double> d_out, std::span<const double> in) {
  const long n = static_cast<long>(in.size());
#pragma omp parallel for schedule(static) if (n > kParallelWork)
  for (long i = 0; i < n; ++i) {
    const double x = in[i];
    const double u = kGeluScale * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluScale * (1.0 + 3.0 * 0.044715 * x * x);
    const double grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    d_in[i] += grad * d_out[i];
  }
}

void attention_forward(std::span<double> out, std::span<double> probs, std::span<const double> qkv, int rows,
                       int dim, int heads) {
  const int hd = dim / heads;
  const int stride = 3 * dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const long work = static_cast<long>(rows) * rows * dim;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelWork)
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < rows; ++i) {
      const double* q = qkv.data() + static_cast<long>(i) * stride + h * hd;
      const double* k = qkv.data() + dim + h * hd;
      const double* v = qkv.data() + 2 * dim + h * hd;
      double* p = probs.data() + (static_cast<long>(h) * rows + i) * rows;
      attend_head(out.data() + static_cast<long>(i) * dim + h * hd, p, q, k, v, stride, i + 1, hd, scale);
    }
  }
}

void attention_backward(std::span<double> d_qkv, std::span<const double> d_out, std::span<const double> qkv,
                        std::span<const double> probs, int rows, int dim, int heads) {
  const int hd = dim / heads;
  const int stride = 3 * dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const long work = static_cast<long>(rows) * rows * dim;
  // Each head owns a disjoint column slice of d_qkv.
#pragma omp parallel if (work > kParallelWork)
  {
    std::vector<double> dp(static_cast<std::size_t>(rows));
#pragma omp for schedule(static)
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < rows; ++i) {
        const double* p = probs.data() + (static_cast<long>(h) * rows + i) * rows;
        const double* g = d_out.data() + static_cast<long>(i) * dim + h * hd;
        const double* q = qkv.data() + static_cast<long>(i) * stride + h * hd;
        double* dq = d_qkv.data() + static_cast<long>(i) * stride + h * hd;
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double* v = qkv.data() + static_cast<long>(j) * stride + 2 * dim + h * hd;
          double* dv = d_qkv.data() + static_cast<long>(j) * stride + 2 * dim + h * hd;
          double s = 0.0;
          for (int c = 0; c < hd; ++c) {
            s += g[c] * v[c];
            dv[c] += p[j] * g[c];
          }
          dp[j] = s;
          dot += p[j] * s;
        }
        for (int j = 0; j <= i; ++j) {
          const double ds = p[j] * (dp[j] - dot) * scale;
          const double* k = qkv.data() + static_cast<long>(j) * stride + dim + h * hd;
          double* dk = d_qkv.data() + static_cast<long>(j) * stride + dim + h * hd;
          for (int c = 0; c < hd; ++c) {
            dq[c] += ds * k[c];
            dk[c] += ds * q[c];
          }
        }
      }
    }
  }
}

void attention_query(std::span<double> out, std::span<const double> q, const double* keys, const double* values,
                     int stride, int count, int dim, int heads) {
  const int hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> probs(static_cast<std::size_t>(count));
  for (int h = 0; h < heads; ++h) {
    attend_head(out.data() + h * hd, probs.data(), q.data() + h * hd, keys + h * hd, values + h * hd, stride, count,
                hd, scale);
  }
}

void softmax(std::span<double> out, std::span<const double> in, double inv_temperature) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : in) m = std::max(m, v * inv_temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] * inv_temperature - m);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (std::size_t i = 0; i < in.size(); ++i) out[i] *= inv;
}

double log_sum_exp(std::span<const double> in) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : in) m = std::max(m, v);
  double sum = 0.0;
  for (double v : in) sum += std::exp(v - m);
  return m + std::log(sum);
}

double cross_entropy(std::span<double> d_logits, std::span<const double> logits, int target, double weight) {
  const double lse = log_sum_exp(logits);
  if (!d_logits.empty()) {
    for (std::size_t v = 0; v < logits.size(); ++v) d_logits[v] = weight * std::exp(logits[v] - lse);
    d_logits[target] -= weight;
  }
  return lse - logits[target];
}

void soft_embed_forward(std::span<double> out, std::span<double> probs, std::span<const double> logits,
                        std::span<const double> table, double inv_tau, int rows, int vocab, int dim) {
  for (int r = 0; r < rows; ++r) {
    auto p = probs.subspan(static_cast<std::size_t>(r) * vocab, vocab);
    softmax(p, logits.subspan(static_cast<std::size_t>(r) * vocab, vocab), inv_tau);
    double* o = out.data() + static_cast<long>(r) * dim;
    std::fill(o, o + dim, 0.0);
    for (int v = 0; v < vocab; ++v) {
      const double pv = p[v];
      const double* t = table.data() + static_cast<long>(v) * dim;
      for (int c = 0; c < dim; ++c) o[c] += pv * t[c];
    }
  }
}

void soft_embed_backward(std::span<double> d_logits, std::span<double> d_table, std::span<const double> d_out,
                         std::span<const double> probs, std::span<const double> table, double inv_tau, int rows,
                         int vocab, int dim) {
  std::vector<double> dp(static_cast<std::size_t>(vocab));
  for (int r = 0; r < rows; ++r) {
    const double* g = d_out.data() + static_cast<long>(r) * dim;
    const double* p = probs.data() + static_cast<long>(r) * vocab;
    double dot = 0.0;
    for (int v = 0; v < vocab; ++v) {
      const double* t = table.data() + static_cast<long>(v) * dim;
      double s = 0.0;
      for (int c = 0; c < dim; ++c) s += g[c] * t[c];
      dp[v] = s;
      dot += p[v] * s;
    }
    if (!d_logits.empty()) {
      double* dl = d_logits.data() + static_cast<long>(r) * vocab;
      for (int v = 0; v < vocab; ++v) dl[v] = inv_tau * p[v] * (dp[v] - dot);
    }
    if (!d_table.empty()) {
      for (int v = 0; v < vocab; ++v) {
        double* dt = d_table.data() + static_cast<long>(v) * dim;
        for (int c = 0; c < dim; ++c) dt[c] += p[v] * g[c];
      }
    }
  }
}

}  // namespace retro::kernels
