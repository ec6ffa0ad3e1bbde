#include <cmath>
#include <numbers>
#include <vector>

#include "retro/kernels.hpp"

namespace retro::kernels::reference {

void matmul_forward(std::span<double> out, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, int rows, int in_dim, int out_dim) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < out_dim; ++c) {
      double acc = bias.empty() ? 0.0 : bias[c];
      for (int k = 0; k < in_dim; ++k) acc += in[r * in_dim + k] * w[k * out_dim + c];
      out[r * out_dim + c] = acc;
    }
  }
}

void matmul_backward(std::span<double> d_in, std::span<double> d_w, std::span<double> d_bias,
                     std::span<const double> d_out, std::span<const double> in, std::span<const double> w,
                     int rows, int in_dim, int out_dim) {
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < in_dim; ++k) {
      for (int c = 0; c < out_dim; ++c) {
        const double g = d_out[r * out_dim + c];
        if (!d_in.empty()) d_in[r * in_dim + k] += g * w[k * out_dim + c];
        if (!d_w.empty()) d_w[k * out_dim + c] += g * in[r * in_dim + k];
      }
    }
    if (!d_bias.empty()) {
      for (int c = 0; c < out_dim; ++c) d_bias[c] += d_out[r * out_dim + c];
    }
  }
}

void layernorm_forward(std::span<double> out, std::span<const double> in, std::span<const double> gamma,
                       std::span<const double> beta, int rows, int dim) {
  for (int r = 0; r < rows; ++r) {
    double m = 0.0;
    for (int c = 0; c < dim; ++c) m += in[r * dim + c];
    m /= dim;
    double var = 0.0;
    for (int c = 0; c < dim; ++c) var += (in[r * dim + c] - m) * (in[r * dim + c] - m);
    var /= dim;
    for (int c = 0; c < dim; ++c) {
      out[r * dim + c] = (in[r * dim + c] - m) / std::sqrt(var + 1e-5) * gamma[c] + beta[c];
    }
  }
}

void gelu_forward(std::span<double> out, std::span<const double> in) {
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double x = in[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * std::pow(x, 3))));
  }
}

void attention_forward(std::span<double> out, std::span<const double> qkv, int rows, int dim, int heads) {
  const int hd = dim / heads;
  const auto q = [&](int i, int h, int c) { return qkv[i * 3 * dim + h * hd + c]; };
  const auto k = [&](int i, int h, int c) { return qkv[i * 3 * dim + dim + h * hd + c]; };
  const auto v = [&](int i, int h, int c) { return qkv[i * 3 * dim + 2 * dim + h * hd + c]; };
  std::vector<double> scores(static_cast<std::size_t>(rows) * rows);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < rows; ++j) {
        double s = 0.0;
        for (int c = 0; c < hd; ++c) s += q(i, h, c) * k(j, h, c);
        scores[i * rows + j] = j <= i ? s / std::sqrt(static_cast<double>(hd)) : -INFINITY;
      }
      softmax(std::span<double>(scores).subspan(i * rows, rows),
              std::span<const double>(scores).subspan(i * rows, rows));
      for (int c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (int j = 0; j < rows; ++j) acc += scores[i * rows + j] * v(j, h, c);
        out[i * dim + h * hd + c] = acc;
      }
    }
  }
}

void softmax(std::span<double> out, std::span<const double> in, double inv_temperature) {
  double m = -INFINITY;
  for (double x : in) m = std::max(m, x * inv_temperature);
  double z = 0.0;
  for (double x : in) z += std::exp(x * inv_temperature - m);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i] * inv_temperature - m) / z;
}

void soft_embed_forward(std::span<double> out, std::span<const double> logits, std::span<const double> table,
                        double inv_tau, int rows, int vocab, int dim) {
  std::vector<double> p(static_cast<std::size_t>(vocab));
  for (int r = 0; r < rows; ++r) {
    softmax(p, logits.subspan(static_cast<std::size_t>(r) * vocab, vocab), inv_tau);
    for (int c = 0; c < dim; ++c) {
      double acc = 0.0;
      for (int t = 0; t < vocab; ++t) acc += p[t] * table[t * dim + c];
      out[r * dim + c] = acc;
    }
  }
}

}  // namespace retro::kernels::reference
