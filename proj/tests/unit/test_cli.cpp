#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "models.hpp"
#include "retro/error.hpp"
#include "retro/manifest.hpp"
#include "retro/pipeline.hpp"

using namespace retro;
using nlohmann::json;
namespace fs = std::filesystem;
namespace t = retro::testing;

namespace {

// Runs the CLI with `args`, output discarded, and returns its exit status.
int cli(const std::string& args) {
  const std::string cmd = std::string(RETRO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

// Tiny shapes so the end-to-end commands finish in seconds.
const std::string kSmall =
    " --set corpus.n_stories=120 --set lm.shape.d_model=16 --set lm.shape.n_layers=1 --set lm.train.epochs=1"
    " --set ranker.train.epochs=1 --set ranker.pairs_per_story=2";

}  // namespace

TEST_CASE("strict merge rejects unknown keys and wrong types") {
  json base = to_json(RunConfig::defaults());
  CHECK_NOTHROW(merge_strict(base, json::parse(R"({"decode":{"engine":{"step_size":0.1}}})")));
  CHECK(base["decode"]["engine"]["step_size"] == 0.1);
  CHECK_NOTHROW(merge_strict(base, json::parse(R"({"decode":{"engine":{"step_size":1}}})")));
  try {
    merge_strict(base, json::parse(R"({"decode":{"engine":{"stepsize":0.1}}})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("decode.engine.stepsize") != std::string::npos);
  }
  CHECK_THROWS_AS(merge_strict(base, json::parse(R"({"decode":{"engine":{"n_tokens":"ten"}}})")), ConfigError);
  CHECK_THROWS_AS(merge_strict(base, json::parse(R"({"decode":5})")), ConfigError);
}

TEST_CASE("assignments become nested patches") {
  CHECK(assignment_patch("a.b.c=3") == json::parse(R"({"a":{"b":{"c":3}}})"));
  CHECK(assignment_patch("decode.task=counterfactual") ==
        json::parse(R"({"decode":{"task":"counterfactual"}})"));
  CHECK(assignment_patch("x=true") == json::parse(R"({"x":true})"));
  CHECK(assignment_patch("x=[1,2]") == json::parse(R"({"x":[1,2]})"));
  CHECK_THROWS_AS(assignment_patch("novalue"), ConfigError);
  CHECK_THROWS_AS(assignment_patch("=3"), ConfigError);
}

TEST_CASE("config layers resolve over task defaults") {
  const auto abd = resolve_config({});
  CHECK(abd.decode.task == "abductive");
  CHECK(abd.decode.engine.mix_weight == 0.88);
  CHECK(abd.decode.engine.n_tokens == 15);

  const auto cf = resolve_config({json::parse(R"({"decode":{"task":"counterfactual"}})")});
  CHECK(cf.decode.engine.mix_weight == 0.92);
  CHECK(cf.decode.engine.step_size == 0.0004);
  CHECK(cf.decode.engine.entries().size() == 8);
  CHECK(cf.decode.constraint.kind == ConstraintKind::CounterfactualKl);

  // Later layers win, including over the task defaults.
  const auto both = resolve_config({json::parse(R"({"seed":3,"decode":{"engine":{"mix_weight":0.5}}})"),
                                    json::parse(R"({"seed":4,"decode":{"task":"counterfactual"}})")});
  CHECK(both.seed == 4);
  CHECK(both.decode.engine.mix_weight == 0.5);
  CHECK(both.decode.task == "counterfactual");

  CHECK_THROWS_AS(resolve_config({json::parse(R"({"decode":{"task":"poetry"}})")}), ConfigError);
  CHECK_THROWS_AS(resolve_config({json::parse(R"({"workers":0})")}), ConfigError);
  CHECK_THROWS_AS(resolve_config({json::parse(R"({"decode":{"mode":"beam"}})")}), ConfigError);
}

TEST_CASE("config round-trips through JSON") {
  for (const char* task : {"abductive", "counterfactual"}) {
    auto c = RunConfig::defaults(task);
    c.seed = 77;
    c.decode.mode = DecodeMode::ZeroShotRanked;
    c.paths.lm = "m.ckpt";
    const auto j = to_json(c);
    CHECK(to_json(config_from_json(j)) == j);
    CHECK(config_hash(j) == config_hash(to_json(config_from_json(j))));
  }
  CHECK(decode_mode_from(to_string(DecodeMode::ZeroShot)) == DecodeMode::ZeroShot);
}

TEST_CASE("manifests hash and verify run directories") {
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  // `printf 'hello\n' | git hash-object --stdin`
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");

  const auto dir = t::scratch_dir("manifest");
  fs::create_directories(dir / "traces");
  write_text(dir / "outputs.jsonl", "{}\n");
  write_text(dir / "traces" / "a.json", "[1]\n");
  Manifest m;
  m.command = "decode";
  m.config_hash = config_hash(json{{"k", 1}});
  m.seed = 5;
  m.outputs = hash_outputs(dir);
  CHECK(m.outputs.size() == 2);
  CHECK(m.outputs.contains("traces/a.json"));
  write_manifest(dir, m);
  CHECK(to_json(read_manifest(dir)) == to_json(m));
  CHECK_NOTHROW(verify_manifest(dir));

  write_text(dir / "traces" / "a.json", "[2]\n");
  CHECK_THROWS_AS(verify_manifest(dir), VerifyMismatch);
  write_text(dir / "traces" / "a.json", "[1]\n");
  write_text(dir / "extra.txt", "x");
  CHECK_THROWS_AS(verify_manifest(dir), VerifyMismatch);
  fs::remove(dir / "extra.txt");
  fs::remove(dir / "outputs.jsonl");
  CHECK_THROWS_AS(verify_manifest(dir), VerifyMismatch);
}

TEST_CASE("command line exit codes") {
  const auto dir = t::scratch_dir("cli-codes");
  CHECK(cli("--help") == 0);
  CHECK(cli("--no-such-flag") == 2);
  CHECK(cli("corpus gen --set corpus.bogus=1 --out-dir " + (dir / "a").string()) == 2);
  CHECK(cli("corpus gen --config " + (dir / "absent.json").string()) == 3);
  write_text(dir / "broken.json", "{\"seed\":");
  CHECK(cli("corpus gen --config " + (dir / "broken.json").string()) == 2);
  CHECK(cli("lm train --stories " + (dir / "absent.jsonl").string() + " --out-dir " + (dir / "b").string()) == 3);
  write_text(dir / "bad.jsonl", "{\"schema_version\":1,\"kind\":\"stories\"}\n{oops\n");
  CHECK(cli("lm train --stories " + (dir / "bad.jsonl").string() + " --out-dir " + (dir / "c").string()) == 4);
  CHECK(cli("verify " + (dir / "nowhere").string()) == 3);
}

TEST_CASE("a small pipeline is reproducible and verifiable") {
  const auto dir = t::scratch_dir("cli-pipeline");
  const std::string d = dir.string();
  REQUIRE(cli("corpus gen --seed 3 --out-dir " + d + "/corpus" + kSmall) == 0);
  REQUIRE(cli("lm train --seed 3 --stories " + d + "/corpus/stories.jsonl --out-dir " + d + "/lm" + kSmall) == 0);
  CHECK(fs::exists(dir / "lm" / "lm.ckpt"));
  CHECK(fs::exists(dir / "lm" / "manifest.json"));
  CHECK(fs::exists(dir / "lm" / "config.json"));

  const std::string decode = "decode --seed 3 --mode zeroshot --dataset " + d + "/corpus/abductive.jsonl --lm " + d +
                             "/lm/lm.ckpt --set decode.limit=6" + kSmall;
  REQUIRE(cli(decode + " --workers 1 --out-dir " + d + "/z1") == 0);
  REQUIRE(cli(decode + " --workers 3 --out-dir " + d + "/z3") == 0);
  CHECK(read_file(dir / "z1" / "outputs.jsonl") == read_file(dir / "z3" / "outputs.jsonl"));
  CHECK(cli("verify " + d + "/z1") == 0);

  REQUIRE(cli("eval --dataset " + d + "/corpus/abductive.jsonl --lm " + d + "/lm/lm.ckpt --outputs " + d +
              "/z1/outputs.jsonl --out-dir " + d + "/ev" + kSmall) == 0);
  const auto metrics = json::parse(read_file(dir / "ev" / "metrics.json"));
  CHECK(metrics.dump().find("bleu4") != std::string::npos);
  CHECK(cli("report " + d + "/ev --out-dir " + d + "/rep") == 0);

  write_text(dir / "z1" / "outputs.jsonl", "tampered\n");
  CHECK(cli("verify " + d + "/z1") == 7);
}
