// OpenMP kernels against the serial reference at desk-LM shapes, plus the
// end-to-end costs the decoder pays per step.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "retro/constraints.hpp"
#include "retro/decode.hpp"
#include "retro/kernels.hpp"
#include "retro/model.hpp"

namespace k = retro::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Args: rows, in_dim, out_dim.
template <bool Parallel>
void BM_MatmulForward(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), in = static_cast<int>(state.range(1)),
            out = static_cast<int>(state.range(2));
  const auto x = noise(rows * in, 1), w = noise(in * out, 2), b = noise(out, 3);
  std::vector<double> y(rows * out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul_forward(y, x, w, b, rows, in, out);
    } else {
      k::reference::matmul_forward(y, x, w, b, rows, in, out);
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * rows * in * out);
}

template <bool Parallel>
void BM_MatmulBackward(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), in = static_cast<int>(state.range(1)),
            out = static_cast<int>(state.range(2));
  const auto x = noise(rows * in, 1), w = noise(in * out, 2), dy = noise(rows * out, 4);
  std::vector<double> dx(rows * in), dw(in * out), db(out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::matmul_backward(dx, dw, db, dy, x, w, rows, in, out);
    } else {
      k::reference::matmul_backward(dx, dw, db, dy, x, w, rows, in, out);
    }
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * rows * in * out);
}

// Args: rows, dim, heads.
template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), dim = static_cast<int>(state.range(1)),
            heads = static_cast<int>(state.range(2));
  const auto qkv = noise(rows * 3 * dim, 5);
  std::vector<double> out(rows * dim), probs(heads * rows * rows);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::attention_forward(out, probs, qkv, rows, dim, heads);
    } else {
      k::reference::attention_forward(out, qkv, rows, dim, heads);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

// Args: rows, vocab, dim.
template <bool Parallel>
void BM_SoftEmbed(benchmark::State& state) {
  const int rows = static_cast<int>(state.range(0)), vocab = static_cast<int>(state.range(1)),
            dim = static_cast<int>(state.range(2));
  const auto logits = noise(rows * vocab, 6), table = noise(vocab * dim, 7);
  std::vector<double> out(rows * dim), probs(rows * vocab);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::soft_embed_forward(out, probs, logits, table, 1.0, rows, vocab, dim);
    } else {
      k::reference::soft_embed_forward(out, logits, table, 1.0, rows, vocab, dim);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

retro::LanguageModel desk_lm() {
  std::vector<std::string> words;
  for (int i = 0; i < 186; ++i) words.push_back("w" + std::to_string(i));
  retro::LanguageModel lm(retro::Vocab(words), retro::ModelShape{});
  lm.body().init_random(1);
  return lm;
}

// One constraint gradient at abductive default sizes: |X| = 7, N = 15, |Z| = 6.
void BM_AbductiveGradient(benchmark::State& state) {
  const auto lm = desk_lm();
  const retro::TokenSeq ctx{lm.vocab().bos(), 10, 11, 12, 13, 14, 15};
  const retro::AbductiveLoss c(lm, ctx, {20, 21, 22, 23, 24, 25});
  retro::Matrix soft(15, lm.vocab().size());
  const auto n = noise(soft.size(), 8);
  std::copy(n.begin(), n.end(), soft.data());
  for (auto _ : state) benchmark::DoNotOptimize(c.evaluate(soft).loss);
}

void BM_ForwardPass(benchmark::State& state) {
  const auto lm = desk_lm();
  const retro::TokenSeq ctx{lm.vocab().bos(), 10, 11, 12, 13, 14, 15};
  const auto init = retro::initialize(lm, ctx, 15);
  for (auto _ : state) benchmark::DoNotOptimize(retro::forward_pass(lm, ctx, init, 0.88, 0.0).data());
}

}  // namespace

BENCHMARK(BM_MatmulForward<false>)->Args({96, 64, 192})->Args({96, 64, 256})->Args({96, 256, 64})->Name("matmul_forward/reference");
BENCHMARK(BM_MatmulForward<true>)->Args({96, 64, 192})->Args({96, 64, 256})->Args({96, 256, 64})->Name("matmul_forward/openmp");
BENCHMARK(BM_MatmulBackward<false>)->Args({96, 64, 192})->Args({96, 256, 64})->Name("matmul_backward/reference");
BENCHMARK(BM_MatmulBackward<true>)->Args({96, 64, 192})->Args({96, 256, 64})->Name("matmul_backward/openmp");
BENCHMARK(BM_Attention<false>)->Args({32, 64, 2})->Args({96, 64, 2})->Name("attention_forward/reference");
BENCHMARK(BM_Attention<true>)->Args({32, 64, 2})->Args({96, 64, 2})->Name("attention_forward/openmp");
BENCHMARK(BM_SoftEmbed<false>)->Args({15, 191, 64})->Name("soft_embed_forward/reference");
BENCHMARK(BM_SoftEmbed<true>)->Args({15, 191, 64})->Name("soft_embed_forward/openmp");
BENCHMARK(BM_AbductiveGradient)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ForwardPass)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
