#include "retro/dataset.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "retro/error.hpp"

namespace retro::corpus {
namespace {

using nlohmann::json;

const json& field(const json& j, const char* name, std::size_t line) {
  const auto it = j.find(name);
  if (it == j.end()) throw SchemaError(line, name, "missing");
  return *it;
}

std::string string_field(const json& j, const char* name, std::size_t line) {
  const auto& v = field(j, name, line);
  if (!v.is_string()) throw SchemaError(line, name, "expected a string");
  return v.get<std::string>();
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, std::size_t line) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) throw SchemaError(line, key, "unknown field");
  }
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw MissingFile(path.string());
  return out;
}

}  // namespace

std::vector<JsonlRecord> read_jsonl(std::istream& in, const std::string& kind) {
  std::vector<JsonlRecord> records;
  std::string text;
  std::size_t line = 0;
  bool header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(line, e.what());
    }
    if (!j.is_object()) throw ParseError(line, "expected a JSON object");
    if (!header) {
      const auto& version = field(j, "schema_version", line);
      if (!version.is_number_integer() || version.get<int>() != kSchemaVersion) {
        throw SchemaError(line, "schema_version", "unsupported version " + version.dump());
      }
      if (string_field(j, "kind", line) != kind) throw SchemaError(line, "kind", "expected '" + kind + "'");
      header = true;
      continue;
    }
    records.push_back({line, std::move(j)});
  }
  if (!header) throw SchemaError(line, "schema_version", "missing header line");
  return records;
}

std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path, const std::string& kind) {
  auto in = open_in(path);
  return read_jsonl(in, kind);
}

void write_jsonl(std::ostream& out, const std::string& kind, const std::vector<json>& records) {
  out << json{{"schema_version", kSchemaVersion}, {"kind", kind}}.dump() << '\n';
  for (const auto& r : records) out << r.dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const std::string& kind, const std::vector<json>& records) {
  auto out = open_out(path);
  write_jsonl(out, kind, records);
}

json to_json(const Instance& instance) {
  json j{{"id", instance.id}, {"task", instance.task}, {"x", instance.x}, {"z", instance.z}};
  if (instance.x_ori) j["x_ori"] = *instance.x_ori;
  j["gold"] = instance.gold;
  return j;
}

Instance instance_from_json(const json& j, std::size_t line) {
  const json& body = j;
  reject_unknown(body, {"id", "task", "x", "z", "x_ori", "gold"}, line);
  Instance out;
  out.id = string_field(body, "id", line);
  out.task = string_field(body, "task", line);
  if (out.task != "abductive" && out.task != "counterfactual") {
    throw SchemaError(line, "task", "must be 'abductive' or 'counterfactual'");
  }
  out.x = string_field(body, "x", line);
  out.z = string_field(body, "z", line);
  if (body.contains("x_ori")) out.x_ori = string_field(body, "x_ori", line);
  if (out.task == "counterfactual" && !out.x_ori) throw SchemaError(line, "x_ori", "missing");
  out.gold = string_field(body, "gold", line);
  return out;
}

json to_json(const Story& story) {
  return json{{"id", story.id}, {"split", story.split}, {"sentences", story.sentences}};
}

Story story_from_json(const json& j, std::size_t line) {
  const json& body = j;
  reject_unknown(body, {"id", "split", "sentences"}, line);
  Story s;
  s.id = string_field(body, "id", line);
  s.split = string_field(body, "split", line);
  if (s.split != "train" && s.split != "dev" && s.split != "test") {
    throw SchemaError(line, "split", "must be train, dev or test");
  }
  const auto& sentences = field(body, "sentences", line);
  if (!sentences.is_array() || sentences.size() != 5) throw SchemaError(line, "sentences", "expected 5 strings");
  for (std::size_t i = 0; i < 5; ++i) {
    if (!sentences[i].is_string()) throw SchemaError(line, "sentences", "expected 5 strings");
    s.sentences[i] = sentences[i].get<std::string>();
  }
  const auto tags = parse_story(s.sentences);
  if (!tags) throw SchemaError(line, "sentences", "story breaks the rule table");
  s.tags = *tags;
  return s;
}

void write_instances(std::ostream& out, const std::vector<Instance>& instances) {
  std::vector<json> records;
  for (const auto& i : instances) records.push_back(to_json(i));
  write_jsonl(out, "instances", records);
}

std::vector<Instance> read_instances(std::istream& in) {
  std::vector<Instance> out;
  for (const auto& r : read_jsonl(in, "instances")) out.push_back(instance_from_json(r.value, r.line));
  return out;
}

void write_instances(const std::filesystem::path& path, const std::vector<Instance>& instances) {
  auto out = open_out(path);
  write_instances(out, instances);
}

std::vector<Instance> read_instances(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_instances(in);
}

void write_stories(const std::filesystem::path& path, const std::vector<Story>& stories) {
  std::vector<json> records;
  for (const auto& s : stories) records.push_back(to_json(s));
  write_jsonl(path, "stories", records);
}

std::vector<Story> read_stories(const std::filesystem::path& path) {
  std::vector<Story> out;
  for (const auto& r : read_jsonl(path, "stories")) out.push_back(story_from_json(r.value, r.line));
  return out;
}

}  // namespace retro::corpus
