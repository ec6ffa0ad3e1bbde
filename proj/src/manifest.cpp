#include "retro/manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <sstream>

#include "retro/error.hpp"

namespace retro {

std::string sha1_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string git_blob_sha1(std::string_view content) {
  std::string framed = "blob " + std::to_string(content.size());
  framed.push_back('\0');
  framed.append(content);
  return sha1_hex(framed);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_blob_sha1(const std::filesystem::path& path) { return git_blob_sha1(read_file(path)); }

nlohmann::json to_json(const Manifest& m) {
  return {{"command", m.command}, {"config_hash", m.config_hash}, {"seed", m.seed},
          {"inputs", m.inputs},   {"outputs", m.outputs},         {"wall_seconds", m.wall_seconds}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.wall_seconds = j.at("wall_seconds").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(0, "manifest", e.what());
  }
}

std::string config_hash(const nlohmann::json& config) { return sha1_hex(config.dump()); }

std::map<std::string, std::string> hash_outputs(const std::filesystem::path& run_dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), run_dir).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = file_blob_sha1(entry.path());
  }
  return out;
}

void write_manifest(const std::filesystem::path& run_dir, const Manifest& m) {
  std::ofstream out(run_dir / "manifest.json");
  if (!out) throw MissingFile((run_dir / "manifest.json").string());
  out << to_json(m).dump(2) << '\n';
}

Manifest read_manifest(const std::filesystem::path& run_dir) {
  const auto text = read_file(run_dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, e.what());
  }
  return manifest_from_json(j);
}

void verify_manifest(const std::filesystem::path& run_dir) {
  const auto m = read_manifest(run_dir);
  const auto now = hash_outputs(run_dir);
  for (const auto& [file, hash] : m.outputs) {
    const auto it = now.find(file);
    if (it == now.end()) throw VerifyMismatch("missing output: " + file);
    if (it->second != hash) throw VerifyMismatch("content changed: " + file);
  }
  for (const auto& [file, hash] : now) {
    if (!m.outputs.contains(file)) throw VerifyMismatch("unrecorded output: " + file);
  }
}

}  // namespace retro
