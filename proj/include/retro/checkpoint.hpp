#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "retro/model.hpp"
#include "retro/vocab.hpp"

namespace retro {

// Binary checkpoint framing shared by the language model and the coherence
// model:
//   8 bytes  magic "RETROCKP"
//   u32      format version
//   u64      header length
//   header   UTF-8 JSON: kind, shape, head_classes, vocab, tensor table
//   payload  num_params little-endian IEEE-754 doubles
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "lm" or "ranker"
  Vocab vocab;
  Transformer body;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws MissingFile, or CheckpointError on a bad magic, a version other than
// kCheckpointVersion, a kind other than `expected_kind`, or a truncated payload.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind);

void save_language_model(const std::filesystem::path& path, const LanguageModel& lm);
LanguageModel load_language_model(const std::filesystem::path& path);

}  // namespace retro
