#include "retro/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "retro/error.hpp"

namespace retro {
namespace {

constexpr char kMagic[8] = {'R', 'E', 'T', 'R', 'O', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw CheckpointError("truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto& s = ckpt.body.shape();
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["shape"] = {{"vocab_size", s.vocab_size}, {"d_model", s.d_model}, {"n_layers", s.n_layers},
                     {"n_heads", s.n_heads},       {"max_len", s.max_len}};
  header["head_classes"] = ckpt.body.head_classes();
  header["vocab"] = ckpt.vocab.tokens();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : tensor_layout(s, ckpt.body.head_classes())) {
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["tensors"] = tensors;
  header["num_params"] = ckpt.body.num_params();
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingFile(path.string());
  os.write(kMagic, sizeof kMagic);
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto w = ckpt.body.weights();
  os.write(reinterpret_cast<const char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(double)));
  if (!os) throw Error(ErrorKind::MissingFile, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFile(path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " in " + path.string() +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = read_pod<std::uint64_t>(is);
  if (header_len > (1u << 26)) throw CheckpointError("implausible checkpoint header length");
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw CheckpointError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.kind = header.at("kind").get<std::string>();
    if (ckpt.kind != expected_kind) {
      throw CheckpointError("checkpoint kind '" + ckpt.kind + "' where '" + expected_kind + "' was expected");
    }
    const auto& js = header.at("shape");
    ModelShape s;
    s.vocab_size = js.at("vocab_size").get<int>();
    s.d_model = js.at("d_model").get<int>();
    s.n_layers = js.at("n_layers").get<int>();
    s.n_heads = js.at("n_heads").get<int>();
    s.max_len = js.at("max_len").get<int>();
    ckpt.vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    if (ckpt.vocab.size() != s.vocab_size) throw CheckpointError("vocabulary size disagrees with shape");
    ckpt.body = Transformer(s, header.at("head_classes").get<int>());
    if (header.at("num_params").get<std::size_t>() != ckpt.body.num_params()) {
      throw CheckpointError("parameter count disagrees with shape");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  auto w = ckpt.body.weights();
  is.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(double)));
  if (!is) throw CheckpointError("truncated checkpoint payload");
  return ckpt;
}

void save_language_model(const std::filesystem::path& path, const LanguageModel& lm) {
  save_checkpoint(path, Checkpoint{"lm", lm.vocab(), lm.body()});
}

LanguageModel load_language_model(const std::filesystem::path& path) {
  auto ckpt = load_checkpoint(path, "lm");
  LanguageModel lm(ckpt.vocab, ckpt.body.shape());
  lm.body() = std::move(ckpt.body);
  return lm;
}

}  // namespace retro
