#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "retro/checkpoint.hpp"
#include "retro/corpus.hpp"
#include "retro/dataset.hpp"
#include "retro/error.hpp"
#include "retro/manifest.hpp"
#include "retro/metrics.hpp"
#include "retro/pipeline.hpp"
#include "retro/ranker.hpp"
#include "retro/seed.hpp"
#include "retro/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace retro;

namespace {

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected internal error\n"
    "  2  invalid configuration or command line\n"
    "  3  missing or unreadable file\n"
    "  4  malformed input (JSON syntax or schema)\n"
    "  5  model error (unknown token, context overflow, checkpoint, empty reference)\n"
    "  6  numeric failure (non-finite gradient, diverged training)\n"
    "  7  verification mismatch\n";

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> out_dir;
  std::optional<int> workers;
  std::optional<std::string> trace_out;
  std::optional<std::string> mode;
  std::optional<std::string> dataset, stories, lm, ranker, outputs;
  std::vector<std::string> sets;
};

json read_config_file(const std::string& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

// Config file (or $RETRO_CONFIG), then --set assignments, then dedicated flags.
RunConfig resolve(const Flags& f) {
  std::vector<json> layers;
  std::string path = f.config;
  if (path.empty()) {
    if (const char* env = std::getenv("RETRO_CONFIG"); env != nullptr && *env != '\0') path = env;
  }
  if (!path.empty()) layers.push_back(read_config_file(path));
  for (const auto& s : f.sets) layers.push_back(assignment_patch(s));
  json flags = json::object();
  if (f.seed) flags["seed"] = *f.seed;
  if (f.workers) flags["workers"] = *f.workers;
  if (f.task) flags["decode"]["task"] = *f.task;
  if (f.mode) flags["decode"]["mode"] = *f.mode;
  if (f.out_dir) flags["paths"]["out_dir"] = *f.out_dir;
  if (f.trace_out) flags["paths"]["traces"] = *f.trace_out;
  if (f.dataset) flags["paths"]["dataset"] = *f.dataset;
  if (f.stories) flags["paths"]["stories"] = *f.stories;
  if (f.lm) flags["paths"]["lm"] = *f.lm;
  if (f.ranker) flags["paths"]["ranker"] = *f.ranker;
  if (f.outputs) flags["paths"]["outputs"] = *f.outputs;
  layers.push_back(flags);
  return resolve_config(layers);
}

void log(const std::string& msg) { std::cerr << "[retro] " << msg << '\n'; }

std::string require_path(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError("paths." + key + " is required for this command");
  return value;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MissingFile(path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Runs one command inside its output directory: snapshots the resolved
// config, lets `body` write outputs and record its inputs, then writes the
// manifest over everything in the directory.
template <typename Body>
void in_run(const std::string& command, const RunConfig& cfg, Body body) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = cfg.paths.out_dir;
  fs::create_directories(dir);
  const json snapshot = to_json(cfg);
  write_json(dir / "config.json", snapshot);
  Manifest m;
  m.command = command;
  m.config_hash = config_hash(snapshot);
  m.seed = cfg.seed;
  body(dir, m.inputs);
  m.outputs = hash_outputs(dir);
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(dir, m);
  log(command + " done in " + std::to_string(m.wall_seconds) + " s -> " + dir.string());
}

void note_input(std::map<std::string, std::string>& inputs, const std::string& path) {
  inputs[path] = file_blob_sha1(path);
}

std::vector<corpus::Story> train_split(const std::vector<corpus::Story>& stories) {
  std::vector<corpus::Story> out;
  for (const auto& s : stories) {
    if (s.split == "train") out.push_back(s);
  }
  return out;
}

json report_json(const TrainReport& r) {
  return {{"initial_val_loss", r.initial_val_loss},
          {"train_loss", r.train_loss},
          {"val_loss", r.val_loss},
          {"train_examples", r.train_examples},
          {"val_examples", r.val_examples}};
}

void cmd_corpus_gen(const RunConfig& cfg) {
  in_run("corpus gen", cfg, [&](const fs::path& dir, auto&) {
    const auto stories = corpus::generate_corpus(cfg.corpus.n_stories, cfg.corpus_seed());
    std::vector<corpus::Instance> abductive, counterfactual;
    for (const auto& s : stories) {
      if (s.split != "test") continue;
      abductive.push_back(corpus::make_abductive(s, cfg.corpus.gold_sentences));
      counterfactual.push_back(corpus::make_counterfactual(s, instance_seed(cfg.corpus_seed(), s.id)));
    }
    corpus::write_stories(dir / "stories.jsonl", stories);
    corpus::write_instances(dir / "abductive.jsonl", abductive);
    corpus::write_instances(dir / "counterfactual.jsonl", counterfactual);
    std::ostringstream r;
    r << "stories " << stories.size() << "\ntest instances per task " << abductive.size() << '\n';
    write_text(dir / "report.txt", r.str());
  });
}

void cmd_lm_train(const RunConfig& cfg) {
  in_run("lm train", cfg, [&](const fs::path& dir, auto& inputs) {
    const auto path = require_path(cfg.paths.stories, "stories");
    note_input(inputs, path);
    const auto stories = corpus::read_stories(path);
    const Vocab vocab = corpus::build_vocab();
    std::vector<TokenSeq> seqs;
    for (const auto& s : train_split(stories)) seqs.push_back(corpus::story_tokens(s, vocab));
    log("training language model on " + std::to_string(seqs.size()) + " stories");
    TrainReport report;
    const auto lm = train_lm(vocab, seqs, cfg.lm.train, cfg.lm.shape, &report);
    save_language_model(dir / "lm.ckpt", lm);
    write_json(dir / "train_report.json", report_json(report));
    std::ostringstream r;
    r << std::fixed << std::setprecision(4) << "language model: initial val loss " << report.initial_val_loss
      << ", final val loss " << report.val_loss.back() << '\n';
    write_text(dir / "report.txt", r.str());
  });
}

void cmd_ranker_train(const RunConfig& cfg) {
  in_run("ranker train", cfg, [&](const fs::path& dir, auto& inputs) {
    const auto path = require_path(cfg.paths.stories, "stories");
    note_input(inputs, path);
    const auto stories = corpus::read_stories(path);
    std::optional<LanguageModel> init;
    if (cfg.ranker.init_from_lm) {
      const auto lm_path = require_path(cfg.paths.lm, "lm");
      note_input(inputs, lm_path);
      init = load_language_model(lm_path);
    }
    log("training coherence ranker on " + std::to_string(stories.size()) + " stories");
    RankerReport report;
    const auto model = train_ranker(stories, cfg.ranker.train, cfg.lm.shape, cfg.ranker.pairs_per_story, &report,
                                    init ? &*init : nullptr);
    save_ranker(dir / "ranker.ckpt", model);
    auto j = report_json(report.train);
    j["heldout_accuracy"] = report.heldout_accuracy;
    j["heldout_pairs"] = report.heldout_pairs;
    write_json(dir / "train_report.json", j);
    std::ostringstream r;
    r << std::fixed << std::setprecision(4) << "ranker: held-out accuracy " << report.heldout_accuracy << " on "
      << report.heldout_pairs << " pairs\n";
    write_text(dir / "report.txt", r.str());
  });
}

void cmd_decode(const RunConfig& cfg) {
  in_run("decode", cfg, [&](const fs::path& dir, auto& inputs) {
    const auto dataset = require_path(cfg.paths.dataset, "dataset");
    const auto lm_path = require_path(cfg.paths.lm, "lm");
    note_input(inputs, dataset);
    note_input(inputs, lm_path);
    auto instances = corpus::read_instances(fs::path(dataset));
    if (cfg.decode.limit > 0 && static_cast<int>(instances.size()) > cfg.decode.limit) instances.resize(cfg.decode.limit);
    const auto lm = load_language_model(lm_path);
    std::optional<CoherenceModel> ranker;
    if (cfg.decode.mode != DecodeMode::ZeroShot) {
      const auto ranker_path = require_path(cfg.paths.ranker, "ranker");
      note_input(inputs, ranker_path);
      ranker = load_ranker(ranker_path);
    }
    const fs::path traces = cfg.paths.traces.empty() ? dir / "traces" : fs::path(cfg.paths.traces);
    fs::remove_all(traces);
    log("decoding " + std::to_string(instances.size()) + " " + cfg.decode.task + " instances (" +
        to_string(cfg.decode.mode) + ", " + std::to_string(cfg.workers) + " workers)");
    const auto results =
        decode_instances(lm, ranker ? &*ranker : nullptr, instances, cfg.decode, cfg.seed, cfg.workers);

    std::vector<json> outputs, candidates;
    std::size_t n_candidates = 0, aborted = 0;
    for (const auto& r : results) {
      outputs.push_back(output_record(lm.vocab(), r));
      candidates.push_back(candidates_record(lm.vocab(), r));
      n_candidates += r.ranked.size();
      for (const auto& t : r.traces) aborted += t.aborted ? 1 : 0;
      if (!r.traces.empty()) write_json(traces / (r.id + ".json"), traces_record(r));
    }
    corpus::write_jsonl(dir / "outputs.jsonl", "outputs", outputs);
    corpus::write_jsonl(dir / "candidates.jsonl", "candidates", candidates);
    std::ostringstream rep;
    rep << "task " << cfg.decode.task << ", mode " << to_string(cfg.decode.mode) << '\n'
        << "instances " << results.size() << ", candidates " << n_candidates << ", aborted entries " << aborted
        << '\n';
    write_text(dir / "report.txt", rep.str());
  });
}

void cmd_eval(const RunConfig& cfg) {
  in_run("eval", cfg, [&](const fs::path& dir, auto& inputs) {
    const auto dataset = require_path(cfg.paths.dataset, "dataset");
    const auto outputs_path = require_path(cfg.paths.outputs, "outputs");
    note_input(inputs, dataset);
    note_input(inputs, outputs_path);
    std::map<std::string, corpus::Instance> by_id;
    for (auto& inst : corpus::read_instances(fs::path(dataset))) by_id.emplace(inst.id, inst);

    Matrix table;
    Vocab vocab = corpus::build_vocab();
    if (cfg.eval.embed) {
      const auto lm_path = require_path(cfg.paths.lm, "lm");
      note_input(inputs, lm_path);
      const auto lm = load_language_model(lm_path);
      table = metrics::embedding_table(lm);
      vocab = lm.vocab();
    }
    std::vector<TokenSeq> hyps, refs;
    json per_instance = json::array();
    for (const auto& rec : corpus::read_jsonl(fs::path(outputs_path), "outputs")) {
      const auto& j = rec.value;
      if (!j.contains("id") || !j["id"].is_string()) throw SchemaError(rec.line, "id", "missing");
      if (!j.contains("output") || !j["output"].is_string()) throw SchemaError(rec.line, "output", "missing");
      const auto it = by_id.find(j["id"].get<std::string>());
      if (it == by_id.end()) throw SchemaError(rec.line, "id", "not in the dataset");
      hyps.push_back(vocab.encode(j["output"].get<std::string>()));
      refs.push_back(vocab.encode(it->second.gold));
      json one{{"id", it->first}};
      if (cfg.eval.bleu4) one["bleu4"] = metrics::bleu4(hyps.back(), {refs.back()});
      if (cfg.eval.rouge_l) one["rouge_l_f"] = metrics::rouge_l(hyps.back(), refs.back()).f;
      if (cfg.eval.embed) one["embed_f"] = metrics::embed_score(table, hyps.back(), refs.back()).f;
      per_instance.push_back(one);
    }
    if (hyps.empty()) throw EmptyReference();
    metrics::MetricReport total;
    total.count = hyps.size();
    if (cfg.eval.embed) {
      total = metrics::score_corpus(table, hyps, refs);
    } else {
      std::vector<std::vector<TokenSeq>> wrapped;
      for (const auto& r : refs) wrapped.push_back({r});
      total.bleu4 = metrics::corpus_bleu4(hyps, wrapped);
      for (std::size_t i = 0; i < hyps.size(); ++i) total.rouge_l_f += metrics::rouge_l(hyps[i], refs[i]).f;
      total.rouge_l_f /= static_cast<double>(hyps.size());
    }
    json corpus_j = metrics::to_json(total);
    if (!cfg.eval.bleu4) corpus_j.erase("bleu4");
    if (!cfg.eval.rouge_l) corpus_j.erase("rouge_l_f");
    if (!cfg.eval.embed) {
      corpus_j.erase("embed_p");
      corpus_j.erase("embed_r");
      corpus_j.erase("embed_f");
    }
    write_json(dir / "metrics.json", {{"corpus", corpus_j}, {"instances", per_instance}});
    const std::string name = fs::path(outputs_path).parent_path().filename().string();
    write_text(dir / "report.txt", metrics::format_table({{name.empty() ? "outputs" : name, total}}));
    std::cout << metrics::format_table({{name.empty() ? "outputs" : name, total}});
  });
}

// Collects the config snapshot and metrics of finished runs into one table
// plus a verbatim echo of each run's decode hyperparameters.
void cmd_report(const RunConfig& cfg, const std::vector<std::string>& runs) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  in_run("report", cfg, [&](const fs::path& dir, auto& inputs) {
    std::vector<std::pair<std::string, metrics::MetricReport>> rows;
    std::ostringstream echo;
    for (const auto& run : runs) {
      const fs::path r = run;
      const auto config_path = (r / "config.json").string();
      note_input(inputs, config_path);
      const auto snapshot = read_config_file(config_path);
      const auto run_cfg = config_from_json(snapshot);
      echo << "== " << run << " ==\n" << "config hash " << config_hash(snapshot) << '\n'
           << "decode " << snapshot.at("decode").dump(2) << "\nseed " << run_cfg.seed << "\n\n";
      if (fs::exists(r / "metrics.json")) {
        note_input(inputs, (r / "metrics.json").string());
        const auto m = read_config_file((r / "metrics.json").string()).at("corpus");
        metrics::MetricReport row;
        row.bleu4 = m.value("bleu4", 0.0);
        row.rouge_l_f = m.value("rouge_l_f", 0.0);
        row.embed_p = m.value("embed_p", 0.0);
        row.embed_r = m.value("embed_r", 0.0);
        row.embed_f = m.value("embed_f", 0.0);
        row.count = m.value("count", std::size_t{0});
        rows.push_back({r.filename().string(), row});
      }
    }
    std::string text = rows.empty() ? std::string() : metrics::format_table(rows) + "\n";
    text += echo.str();
    write_text(dir / "report.txt", text);
    std::cout << text;
  });
}

void cmd_verify(const std::string& run) {
  verify_manifest(run);
  std::cout << "ok " << run << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retro: backprop-based constrained decoding on a desk-scale story corpus"};
  app.footer(kExitCodes);
  app.fallthrough();
  app.require_subcommand(1);

  Flags f;
  app.add_option("--config", f.config, "JSON config file (default: $RETRO_CONFIG)");
  app.add_option("--seed", f.seed, "Global seed");
  app.add_option("--task", f.task, "abductive | counterfactual");
  app.add_option("--out-dir", f.out_dir, "Run directory for outputs");
  app.add_option("--workers", f.workers, "Decode worker threads");
  app.add_option("--trace-out", f.trace_out, "Directory for per-instance traces (default: <out-dir>/traces)");
  app.add_option("--mode", f.mode, "delorean | zeroshot | zeroshot-ranked");
  app.add_option("--dataset", f.dataset, "Instance JSONL (paths.dataset)");
  app.add_option("--stories", f.stories, "Story JSONL (paths.stories)");
  app.add_option("--lm", f.lm, "Language model checkpoint (paths.lm)");
  app.add_option("--ranker", f.ranker, "Ranker checkpoint (paths.ranker)");
  app.add_option("--outputs", f.outputs, "Decode outputs.jsonl to evaluate (paths.outputs)");
  app.add_option("--set", f.sets, "Override a config key: dotted.key=value (repeatable)");

  auto* corpus_cmd = app.add_subcommand("corpus", "Synthetic story corpus");
  corpus_cmd->require_subcommand(1);
  auto* corpus_gen = corpus_cmd->add_subcommand("gen", "Generate stories and test-split task instances");
  auto* lm_cmd = app.add_subcommand("lm", "Language model");
  lm_cmd->require_subcommand(1);
  auto* lm_train = lm_cmd->add_subcommand("train", "Train the desk language model");
  auto* ranker_cmd = app.add_subcommand("ranker", "Coherence ranker");
  ranker_cmd->require_subcommand(1);
  auto* ranker_train = ranker_cmd->add_subcommand("train", "Train the next-sentence coherence classifier");
  auto* decode_cmd = app.add_subcommand("decode", "Decode and rank task instances");
  auto* eval_cmd = app.add_subcommand("eval", "Score decode outputs against gold references");
  auto* report_cmd = app.add_subcommand("report", "Tabulate metrics and echo the hyperparameters of runs");
  std::vector<std::string> report_runs;
  report_cmd->add_option("runs", report_runs, "Run directories")->required();
  auto* verify_cmd = app.add_subcommand("verify", "Re-hash a run directory against its manifest");
  std::string verify_run;
  verify_cmd->add_option("run", verify_run, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ErrorKind::Config);
  }

  try {
    if (verify_cmd->parsed()) {
      cmd_verify(verify_run);
      return 0;
    }
    const RunConfig cfg = resolve(f);
    if (corpus_gen->parsed()) cmd_corpus_gen(cfg);
    if (lm_train->parsed()) cmd_lm_train(cfg);
    if (ranker_train->parsed()) cmd_ranker_train(cfg);
    if (decode_cmd->parsed()) cmd_decode(cfg);
    if (eval_cmd->parsed()) cmd_eval(cfg);
    if (report_cmd->parsed()) cmd_report(cfg, report_runs);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}
