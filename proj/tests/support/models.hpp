#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "retro/model.hpp"

namespace retro::testing {

inline Vocab tiny_vocab(int words) {
  std::vector<std::string> w;
  for (int i = 0; i < words; ++i) w.push_back("w" + std::to_string(i));
  return Vocab(w);
}

// Small random transformer; `scale` inflates the weights so logits and
// gradients are far from zero.
inline LanguageModel tiny_lm(int words, std::uint64_t seed, double scale = 1.0, int max_len = 24) {
  ModelShape s;
  s.d_model = 8;
  s.n_layers = 2;
  s.n_heads = 2;
  s.max_len = max_len;
  LanguageModel lm(tiny_vocab(words), s);
  lm.body().init_random(seed);
  if (scale != 1.0) {
    for (double& w : lm.body().weights()) w *= scale;
  }
  return lm;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("retro-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Directory of the CTest-trained models, or empty when unset.
inline std::filesystem::path fixtures_dir() {
  const char* env = std::getenv("RETRO_FIXTURES");
  return env == nullptr ? std::filesystem::path() : std::filesystem::path(env);
}

}  // namespace retro::testing
