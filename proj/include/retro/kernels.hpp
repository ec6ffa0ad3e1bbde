#pragma once

#include <span>

// Data-parallel building blocks of the transformer. Every kernel is written so
// that each output element is produced by exactly one thread with a fixed
// summation order; results are therefore bit-identical for any thread count.
// Backward kernels accumulate (+=) into parameter gradients and overwrite
// activation gradients unless documented otherwise. An empty span skips that
// output.
namespace retro::kernels {

// out[r,o] = bias[o] + sum_k in[r,k] * w[k,o]; w is in_dim x out_dim.
void matmul_forward(std::span<double> out, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, int rows, int in_dim, int out_dim);

// d_in += d_out * w^T, d_w += in^T * d_out, d_bias += column sums of d_out.
void matmul_backward(std::span<double> d_in, std::span<double> d_w, std::span<double> d_bias,
                     std::span<const double> d_out, std::span<const double> in, std::span<const double> w,
                     int rows, int in_dim, int out_dim);

// out[r,v] = sum_k h[r,k] * table[v,k]. Used for the tied output projection.
void project_rows(std::span<double> out, std::span<const double> h, std::span<const double> table, int rows,
                  int dim, int n_out);

// d_h += d_out * table, d_table += d_out^T * h.
void project_rows_backward(std::span<double> d_h, std::span<double> d_table, std::span<const double> d_out,
                           std::span<const double> h, std::span<const double> table, int rows, int dim,
                           int n_out);

void layernorm_forward(std::span<double> out, std::span<double> mean, std::span<double> rstd,
                       std::span<const double> in, std::span<const double> gamma, std::span<const double> beta,
                       int rows, int dim);

// d_in += ..., d_gamma += ..., d_beta += ...
void layernorm_backward(std::span<double> d_in, std::span<double> d_gamma, std::span<double> d_beta,
                        std::span<const double> d_out, std::span<const double> in, std::span<const double> mean,
                        std::span<const double> rstd, std::span<const double> gamma, int rows, int dim);

// tanh approximation of GELU.
void gelu_forward(std::span<double> out, std::span<const double> in);
// d_in += gelu'(in) * d_out
void gelu_backward(std::span<double> d_in, std::span<const double> d_out, std::span<const double> in);

// Causal multi-head attention. qkv rows hold [q | k | v] (3*dim wide); probs is
// heads x rows x rows with only the lower triangle written.
void attention_forward(std::span<double> out, std::span<double> probs, std::span<const double> qkv, int rows,
                       int dim, int heads);

// d_qkv += ...
void attention_backward(std::span<double> d_qkv, std::span<const double> d_out, std::span<const double> qkv,
                        std::span<const double> probs, int rows, int dim, int heads);

// Single query row attending over `count` cached key/value rows with the given
// row stride. Produces the same bits as the corresponding attention_forward row.
void attention_query(std::span<double> out, std::span<const double> q, const double* keys, const double* values,
                     int stride, int count, int dim, int heads);

// out = softmax(in * inv_temperature), one row.
void softmax(std::span<double> out, std::span<const double> in, double inv_temperature = 1.0);

// log(sum(exp(in))) computed stably.
double log_sum_exp(std::span<const double> in);

// Negative log-likelihood of `target` under softmax(logits). When d_logits is
// non-empty it receives weight * (softmax - onehot(target)).
double cross_entropy(std::span<double> d_logits, std::span<const double> logits, int target, double weight = 1.0);

// Expected embedding of each soft row: probs = softmax(logits * inv_tau),
// out[r] = sum_v probs[r,v] * table[v]. out rows are `dim` wide.
void soft_embed_forward(std::span<double> out, std::span<double> probs, std::span<const double> logits,
                        std::span<const double> table, double inv_tau, int rows, int vocab, int dim);

// d_logits = gradient wrt the soft logits (overwritten); d_table += ... when non-empty.
void soft_embed_backward(std::span<double> d_logits, std::span<double> d_table, std::span<const double> d_out,
                         std::span<const double> probs, std::span<const double> table, double inv_tau, int rows,
                         int vocab, int dim);

}  // namespace retro::kernels

// Plain serial implementations with the most direct loop structure. They are
// kept as the reference the parallel kernels are checked and benchmarked against.
namespace retro::kernels::reference {

void matmul_forward(std::span<double> out, std::span<const double> in, std::span<const double> w,
                    std::span<const double> bias, int rows, int in_dim, int out_dim);
void matmul_backward(std::span<double> d_in, std::span<double> d_w, std::span<double> d_bias,
                     std::span<const double> d_out, std::span<const double> in, std::span<const double> w,
                     int rows, int in_dim, int out_dim);
void layernorm_forward(std::span<double> out, std::span<const double> in, std::span<const double> gamma,
                       std::span<const double> beta, int rows, int dim);
void gelu_forward(std::span<double> out, std::span<const double> in);
void attention_forward(std::span<double> out, std::span<const double> qkv, int rows, int dim, int heads);
void softmax(std::span<double> out, std::span<const double> in, double inv_temperature = 1.0);
void soft_embed_forward(std::span<double> out, std::span<const double> logits, std::span<const double> table,
                        double inv_tau, int rows, int vocab, int dim);

}  // namespace retro::kernels::reference
