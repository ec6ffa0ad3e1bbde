#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include <json.hpp>

namespace retro {

std::string sha1_hex(std::string_view bytes);
// The id git gives the file content: SHA-1 of "blob <size>\0" + content.
std::string git_blob_sha1(std::string_view content);
std::string file_blob_sha1(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);

// Written as manifest.json beside a command's outputs. Output paths are
// relative to the run directory; input paths are as given.
struct Manifest {
  std::string command;
  std::string config_hash;  // SHA-1 of the canonical config JSON
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;
  double wall_seconds = 0.0;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
std::string config_hash(const nlohmann::json& config);

// Hashes every file under the run directory except the manifest itself.
std::map<std::string, std::string> hash_outputs(const std::filesystem::path& run_dir);
void write_manifest(const std::filesystem::path& run_dir, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& run_dir);
// Re-hashes the recorded outputs and throws VerifyMismatch on the first
// difference (changed, missing or unrecorded file).
void verify_manifest(const std::filesystem::path& run_dir);

}  // namespace retro
