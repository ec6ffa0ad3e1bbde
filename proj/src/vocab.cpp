#include "retro/vocab.hpp"

#include <cctype>
#include <stdexcept>

#include "retro/error.hpp"

namespace retro {

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocab::Vocab(const std::vector<std::string>& words) {
  tokens_ = {std::string(kBos), std::string(kEos), std::string(kSep), std::string(kPad)};
  bool has_period = false;
  for (const auto& w : words) {
    if (w == kBos || w == kEos || w == kSep || w == kPad) continue;
    has_period = has_period || w == kPeriod;
    tokens_.push_back(w);
  }
  if (!has_period) tokens_.emplace_back(kPeriod);
  index();
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < 5 || tokens[0] != kBos || tokens[1] != kEos || tokens[2] != kSep || tokens[3] != kPad) {
    throw CheckpointError("vocabulary listing does not start with the control tokens");
  }
  Vocab v;
  v.tokens_ = tokens;
  v.index();
  return v;
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw std::invalid_argument("empty token in vocabulary");
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate token in vocabulary: " + tokens_[i]);
    }
  }
  auto it = ids_.find(std::string(kPeriod));
  if (it == ids_.end()) throw std::invalid_argument("vocabulary has no sentence terminator");
  period_ = it->second;
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

TokenId Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw UnknownToken(std::string(token));
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  for (const auto& w : split_whitespace(text)) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(const TokenSeq& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

}  // namespace retro
