#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace retro {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Closed whitespace-token vocabulary. The four control tokens always occupy
// ids 0..3; the sentence terminator "." may sit anywhere.
class Vocab {
 public:
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kSep = "<sep>";
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kPeriod = ".";

  Vocab() = default;
  // `words` are the ordinary tokens; the control tokens are prepended and "."
  // is appended when missing. Duplicates are rejected.
  explicit Vocab(const std::vector<std::string>& words);
  // Rebuilds a vocabulary from a full token listing (as stored in checkpoints).
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId bos() const noexcept { return 0; }
  TokenId eos() const noexcept { return 1; }
  TokenId sep() const noexcept { return 2; }
  TokenId pad() const noexcept { return 3; }
  TokenId period() const noexcept { return period_; }

  bool contains(std::string_view token) const;
  TokenId id(std::string_view token) const;  // throws UnknownToken
  const std::string& token(TokenId id) const;

  TokenSeq encode(std::string_view text) const;
  std::string decode(const TokenSeq& ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  TokenId period_ = -1;
};

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace retro
