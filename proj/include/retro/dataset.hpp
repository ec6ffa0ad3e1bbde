#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "retro/corpus.hpp"

namespace retro::corpus {

inline constexpr int kSchemaVersion = 1;

// JSONL framing shared by every dataset file: a header line
// {"schema_version": 1, "kind": <kind>} followed by one record per line.
// Blank lines are skipped. Malformed JSON raises ParseError with the 1-based
// line number; a wrong header raises SchemaError.
struct JsonlRecord {
  std::size_t line = 0;
  nlohmann::json value;
};
std::vector<JsonlRecord> read_jsonl(std::istream& in, const std::string& kind);
std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path, const std::string& kind);
void write_jsonl(std::ostream& out, const std::string& kind, const std::vector<nlohmann::json>& records);
void write_jsonl(const std::filesystem::path& path, const std::string& kind,
                 const std::vector<nlohmann::json>& records);

nlohmann::json to_json(const Instance& instance);
// `line` only labels errors.
Instance instance_from_json(const nlohmann::json& j, std::size_t line = 0);

nlohmann::json to_json(const Story& story);
// Tags are recovered from the sentences; a story that breaks the rule table is
// a SchemaError on "sentences".
Story story_from_json(const nlohmann::json& j, std::size_t line = 0);

void write_instances(std::ostream& out, const std::vector<Instance>& instances);
std::vector<Instance> read_instances(std::istream& in);
void write_instances(const std::filesystem::path& path, const std::vector<Instance>& instances);
std::vector<Instance> read_instances(const std::filesystem::path& path);

void write_stories(const std::filesystem::path& path, const std::vector<Story>& stories);
std::vector<Story> read_stories(const std::filesystem::path& path);

}  // namespace retro::corpus
