#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blp/config.hpp"
#include "blp/eval/report.hpp"
#include "blp/gradsuite.hpp"
#include "blp/hash.hpp"

namespace blp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumerical = 4, kOther = 1 };

/// Command-line values that override the config document.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
  bool force = false;
  std::string manifest;
  std::string cache;
  std::string checkpoint;
  std::string source_manifest;
  std::string source_cache;
  std::string mode;
  std::optional<double> weight;
  std::optional<double> alpha;
  std::optional<int> n_batteries;
  std::optional<std::uint64_t> split_seed;
  bool retrain = false;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return kConfig;
  if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
  if (dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const IoError*>(&e) || dynamic_cast<const DataError*>(&e) || dynamic_cast<const DomainError*>(&e)) {
    return kData;
  }
  if (dynamic_cast<const json::exception*>(&e)) return kConfig;
  return kOther;
}

inline std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("BLP_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw ConfigError(std::string("BLP_SEED: not an unsigned integer: '") + s + "'");
  return v;
}

/// Config file, then BLP_SEED, then flags; validated as one document.
inline config::RunConfig resolve_config(const std::string& command, const Overrides& o) {
  json doc = json::object();
  if (!o.config.empty()) {
    const std::string text = ingest::read_file(o.config);
    try {
      doc = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
    if (!doc.is_object()) throw ConfigError(o.config + ": expected a JSON object");
  }
  if (auto s = env_seed()) doc["seed"] = *s;
  if (o.seed) doc["seed"] = *o.seed;
  if (o.jobs) doc["jobs"] = *o.jobs;
  if (!o.out.empty()) doc["out"] = o.out;
  if (!o.manifest.empty()) doc["data"]["manifest"] = o.manifest;
  if (!o.cache.empty()) doc["preprocess"]["cache"] = o.cache;
  if (!o.checkpoint.empty()) {
    if (command == "transfer") {
      doc["eval"]["transfer"]["checkpoint"] = o.checkpoint;
    } else {
      doc["eval"]["checkpoint"] = o.checkpoint;
    }
  }
  if (!o.source_manifest.empty()) doc["eval"]["transfer"]["source_manifest"] = o.source_manifest;
  if (!o.source_cache.empty()) doc["eval"]["transfer"]["source_cache"] = o.source_cache;
  if (!o.mode.empty()) doc["eval"]["transfer"]["mode"] = o.mode;
  if (o.weight) doc["eval"]["transfer"]["weight"] = *o.weight;
  if (o.alpha) doc["eval"]["alpha"] = *o.alpha;
  if (o.n_batteries) doc["synth"]["n_batteries"] = *o.n_batteries;
  if (o.split_seed) doc["eval"]["split_seed"] = *o.split_seed;
  if (o.retrain) doc["eval"]["sweep_retrain"] = true;
  return config::parse_run_config(doc);
}

/// Named input contents, hashed for the report.
class Inputs {
 public:
  void add(std::string name, std::string content) { files_.emplace_back(std::move(name), std::move(content)); }

  json listing() const {
    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& [name, content] : files_) rows.emplace_back(name, git_blob_hash(content));
    std::sort(rows.begin(), rows.end());
    json out = json::array();
    for (const auto& [name, h] : rows) out.push_back({{"name", name}, {"blob", h}});
    return out;
  }

  std::string hash() const { return inputs_hash(files_); }

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

/// Samples from the cache when it exists, else from the manifest. Batteries
/// skipped by the labeling rules are logged to `log`.
inline std::vector<prep::SampleTensor> load_samples(const std::string& manifest_path, const std::string& cache_path,
                                                    const prep::DatasetOptions& opt, Inputs& inputs,
                                                    const std::string& role, std::ostream& log) {
  if (!cache_path.empty() && fs::exists(cache_path)) {
    inputs.add(role + "cache", ingest::read_file(cache_path));
    const auto side = prep::conditions_path(cache_path);
    if (fs::exists(side)) inputs.add(role + "cache.conditions", ingest::read_file(side));
    return prep::load_cache(cache_path);
  }
  if (manifest_path.empty()) {
    throw ConfigError("no input data: set data.manifest (--manifest) or an existing preprocess.cache (--cache)");
  }
  const auto manifest = ingest::load_manifest(manifest_path);
  inputs.add(role + "manifest", ingest::read_file(manifest_path));
  const auto base = fs::path(manifest_path).parent_path();
  for (const auto& e : manifest.entries) {
    const auto rel = fs::proximate(e.path, base.empty() ? fs::path(".") : base).generic_string();
    inputs.add(role + "battery/" + rel, ingest::read_file(e.path));
  }
  auto ds = prep::make_dataset(manifest, opt);
  for (const auto& s : ds.skipped) log << "skip " << s.battery_id << ": " << s.reason << "\n";
  return std::move(ds.samples);
}

inline fs::path out_dir(const config::RunConfig& c) { return c.out.empty() ? fs::path("out") : fs::path(c.out); }

inline json report_config(const config::RunConfig& c) {
  json j = config::to_json(c);
  j.erase("out");
  return j;
}

inline void write_report(const fs::path& dir, const std::string& command, const config::RunConfig& c,
                         const Inputs& inputs, const json& body, const std::string& text, std::ostream& out) {
  json doc = {{"command", command}, {"config", report_config(c)}, {"inputs_hash", inputs.hash()},
              {"inputs", inputs.listing()}};
  for (const auto& [k, v] : body.items()) doc[k] = v;
  fs::create_directories(dir);
  ingest::write_text_file(dir / "report.json", doc.dump(2) + "\n");
  ingest::write_text_file(dir / "report.txt", text);
  out << text;
}

inline void write_checkpoints(const fs::path& dir, const eval::EvalReport& rep, std::ostream& out) {
  fs::create_directories(dir);
  for (const auto& r : rep.runs) {
    if (r.checkpoint.empty()) continue;
    const auto path = dir / ("checkpoint_seed" + std::to_string(r.seed) + ".blpw");
    ingest::write_text_file(path, r.checkpoint);
    out << "wrote " << path.string() << "\n";
  }
}

inline json runs_json(const eval::EvalReport& rep) {
  json runs = json::array();
  for (const auto& r : rep.runs) {
    runs.push_back({{"seed", r.seed},
                    {"untrained", r.untrained},
                    {"best_epoch", r.best_epoch},
                    {"val_mape_curve", r.val_mape},
                    {"checkpoint_blob", r.checkpoint.empty() ? json(nullptr) : json(git_blob_hash(r.checkpoint))}});
  }
  return runs;
}

inline json eval_body(const eval::EvalReport& rep, double alpha) {
  return {{"model", rep.model},
          {"summary",
           {{"runs", rep.runs.size()},
            {"mape_mean", rep.mape.mean},
            {"mape_std", rep.mape.std},
            {eval::acc_metric_name(alpha) + "_mean", rep.acc.mean},
            {eval::acc_metric_name(alpha) + "_std", rep.acc.std}}},
          {"rows", eval::rows_json(eval::report_rows(rep, alpha))},
          {"runs", runs_json(rep)}};
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_synth(const config::RunConfig& c, bool force, std::ostream& out) {
  if (c.out.empty()) throw ConfigError("synth: an output directory is required (--out)");
  const fs::path dir = c.out;
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ConfigError("synth: output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
  }
  const auto fleet = synth::generate_fleet(c.synth, c.jobs);
  synth::write_fleet(fleet, dir);

  std::vector<double> labels;
  std::size_t truncated = 0;
  for (const auto& t : fleet.truth) {
    if (t.truncated) ++truncated;
    if (t.expected.status == LabelStatus::Label) labels.push_back(t.expected.cycle);
  }
  std::sort(labels.begin(), labels.end());
  out << "batteries " << fleet.records.size() << ", labeled " << labels.size() << ", stopped above band "
      << truncated << "\n";
  if (!labels.empty()) {
    out << "label quantiles";
    for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const auto k = static_cast<std::size_t>(std::lround(q * static_cast<double>(labels.size() - 1)));
      out << " q" << static_cast<int>(q * 100) << "=" << labels[k];
    }
    out << "\n";
  }
  out << "wrote " << (dir / "manifest.json").string() << "\n";
  return kOk;
}

inline int cmd_preprocess(const config::RunConfig& c, std::ostream& out, std::ostream& log) {
  if (c.data.manifest.empty()) throw ConfigError("preprocess: data.manifest is required (--manifest)");
  const fs::path dir = out_dir(c);
  const fs::path cache = c.preprocess.cache.empty() ? dir / "samples.blpt" : fs::path(c.preprocess.cache);
  Inputs inputs;
  const auto manifest = ingest::load_manifest(c.data.manifest);
  inputs.add("manifest", ingest::read_file(c.data.manifest));
  const auto base = fs::path(c.data.manifest).parent_path();
  for (const auto& e : manifest.entries) {
    inputs.add("battery/" + fs::proximate(e.path, base.empty() ? fs::path(".") : base).generic_string(),
               ingest::read_file(e.path));
  }
  const auto ds = prep::make_dataset(manifest, config::dataset_options(c));
  json skipped = json::array();
  for (const auto& s : ds.skipped) {
    log << "skip " << s.battery_id << ": " << s.reason << "\n";
    skipped.push_back({{"battery", s.battery_id}, {"reason", s.reason}});
  }
  json cleaned = json::array();
  for (const auto& r : ds.cleaning) {
    if (r.removed_cycle_indices.empty()) continue;
    json removed = json::array();
    for (const auto& [idx, why] : r.removal_reasons) removed.push_back({{"cycle", idx}, {"reason", ingest::to_string(why)}});
    cleaned.push_back({{"battery", r.battery_id}, {"removed", removed}});
  }
  if (cache.has_parent_path()) fs::create_directories(cache.parent_path());
  prep::save_cache(ds.samples, cache);

  std::map<int, std::size_t> per_s;
  std::set<std::string> ids;
  for (const auto& s : ds.samples) {
    ++per_s[s.usable_cycles()];
    ids.insert(s.battery_id());
  }
  json per_s_json = json::object();
  std::ostringstream text;
  text << "batteries " << manifest.entries.size() << ", labeled " << ids.size() << ", skipped " << ds.skipped.size()
       << ", samples " << ds.samples.size() << "\n";
  for (const auto& [s, n] : per_s) {
    per_s_json[std::to_string(s)] = n;
    text << "  S=" << s << ": " << n << " samples\n";
  }
  text << "cache " << cache.string() << "\n";
  write_report(dir, "preprocess", c, inputs,
               {{"samples", ds.samples.size()},
                {"batteries_labeled", ids.size()},
                {"samples_per_s", per_s_json},
                {"skipped", skipped},
                {"cleaning", cleaned},
                {"cache_blob", git_blob_hash(ingest::read_file(cache))}},
               text.str(), out);
  return kOk;
}

inline int cmd_train(const config::RunConfig& c, std::ostream& out, std::ostream& log) {
  Inputs inputs;
  const auto samples = load_samples(c.data.manifest, c.preprocess.cache, config::dataset_options(c), inputs, "", log);
  const auto ecfg = config::experiment_config(c);
  const auto rep = eval::run_experiment(samples, c.model, ecfg);
  const fs::path dir = out_dir(c);
  write_checkpoints(dir, rep, out);
  write_report(dir, "train", c, inputs, eval_body(rep, c.eval.alpha), eval::report_table(rep, c.eval.alpha), out);
  return kOk;
}

/// The test split of run `split_seed` when given, else every sample.
inline std::vector<prep::SampleTensor> evaluation_subset(const config::RunConfig& c,
                                                         std::vector<prep::SampleTensor> samples) {
  if (!c.eval.split_seed) return samples;
  const auto ecfg = config::experiment_config(c);
  const auto assignment = eval::split_dataset(samples, eval::run_stream(ecfg, *c.eval.split_seed), ecfg.split);
  return eval::select(samples, assignment, eval::SplitTag::Test);
}

inline std::unique_ptr<models::Network> load_checkpoint(const std::string& path, Inputs& inputs) {
  if (path.empty()) throw ConfigError("a checkpoint is required (--checkpoint or eval.checkpoint)");
  const std::string bytes = ingest::read_file(path);
  inputs.add("checkpoint", bytes);
  return models::decode_network(bytes);
}

inline int cmd_eval(const config::RunConfig& c, std::ostream& out, std::ostream& log) {
  Inputs inputs;
  auto net = load_checkpoint(c.eval.checkpoint, inputs);
  auto samples = evaluation_subset(
      c, load_samples(c.data.manifest, c.preprocess.cache, config::dataset_options(c), inputs, "", log));
  eval::EvalReport rep;
  rep.model = net->family();
  rep.runs.push_back(eval::evaluate_network(*net, samples, c.eval.alpha));
  rep.runs.back().seed = c.eval.split_seed.value_or(0);
  eval::finalize(rep);
  write_report(out_dir(c), "eval", c, inputs, eval_body(rep, c.eval.alpha), eval::report_table(rep, c.eval.alpha),
               out);
  return kOk;
}

inline int cmd_sweep(const config::RunConfig& c, std::ostream& out, std::ostream& log) {
  Inputs inputs;
  auto opt = config::dataset_options(c);
  opt.s_values = eval::sorted_s_list(c.eval.sweep_s);
  std::vector<eval::SweepPoint> points;
  std::string model;
  if (c.eval.sweep_retrain) {
    const auto samples = load_samples(c.data.manifest, c.preprocess.cache, opt, inputs, "", log);
    points = eval::sweep_usable_cycles(samples, c.model, c.eval.sweep_s, config::experiment_config(c));
    model = c.model.at("family").get<std::string>();
  } else {
    auto net = load_checkpoint(c.eval.checkpoint, inputs);
    const auto samples =
        evaluation_subset(c, load_samples(c.data.manifest, c.preprocess.cache, opt, inputs, "", log));
    points = eval::sweep_usable_cycles(*net, samples, c.eval.sweep_s, c.eval.alpha);
    model = net->family();
  }
  const std::string acc = eval::acc_metric_name(c.eval.alpha);
  json rows = json::array();
  std::ostringstream text;
  text << "sweep over usable cycles, model " << model << (c.eval.sweep_retrain ? " (retrained per S)" : "") << "\n";
  text << "  S      n      mape              " << acc << "\n";
  for (const auto& p : points) {
    rows.push_back({{"metric", "mape_mean"}, {"split", "test"}, {"S", p.s}, {"value", p.mape.mean}});
    rows.push_back({{"metric", "mape_std"}, {"split", "test"}, {"S", p.s}, {"value", p.mape.std}});
    rows.push_back({{"metric", acc + "_mean"}, {"split", "test"}, {"S", p.s}, {"value", p.acc.mean}});
    rows.push_back({{"metric", acc + "_std"}, {"split", "test"}, {"S", p.s}, {"value", p.acc.std}});
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-5d  %-5zu  %s  %s\n", p.s, p.n, eval::format_mean_std(p.mape).c_str(),
                  eval::format_mean_std(p.acc).c_str());
    text << buf;
  }
  const fs::path dir = out_dir(c);
  fs::create_directories(dir);
  ingest::write_text_file(dir / "sweep.csv", eval::sweep_csv(points, c.eval.alpha));
  write_report(dir, "sweep", c, inputs, {{"model", model}, {"rows", rows}}, text.str(), out);
  return kOk;
}

inline int cmd_transfer(const config::RunConfig& c, std::ostream& out, std::ostream& log) {
  const auto& t = c.eval.transfer;
  const std::string ckpt = t.checkpoint.empty() ? c.eval.checkpoint : t.checkpoint;
  if (ckpt.empty()) throw ConfigError("transfer: a pretrained checkpoint is required (--checkpoint)");
  Inputs inputs;
  const std::string bytes = ingest::read_file(ckpt);
  inputs.add("checkpoint", bytes);
  const auto target =
      load_samples(c.data.manifest, c.preprocess.cache, config::dataset_options(c), inputs, "target/", log);
  std::vector<prep::SampleTensor> source;
  if (t.mode.kind == eval::TransferKind::DomainAdapt) {
    if (t.source_manifest.empty() && t.source_cache.empty()) {
      throw ConfigError("transfer: domain_adapt needs source data (eval.transfer.source_manifest or source_cache)");
    }
    source = load_samples(t.source_manifest, t.source_cache, config::dataset_options(c), inputs, "source/", log);
  }
  const auto rep = eval::transfer_run(bytes, source, target, t.mode, config::experiment_config(c));
  const fs::path dir = out_dir(c);
  write_checkpoints(dir, rep, out);
  write_report(dir, "transfer", c, inputs, eval_body(rep, c.eval.alpha), eval::report_table(rep, c.eval.alpha),
               out);
  return kOk;
}

inline int cmd_gradcheck(const config::RunConfig& c, std::ostream& out) {
  const auto entries = gradsuite::run_gradient_suite(c.seed);
  std::ostringstream text;
  json rows = json::array();
  std::size_t failed = 0;
  for (const auto& e : entries) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-4s %-18s %-40s max rel err %.3e (tol %.0e)\n", e.passed() ? "ok" : "FAIL",
                  e.name.c_str(), e.shape.c_str(), e.max_rel_error, e.tolerance);
    text << buf;
    if (!e.passed()) ++failed;
    rows.push_back({{"op", e.name},
                    {"shape", e.shape},
                    {"max_rel_error", e.max_rel_error},
                    {"tolerance", e.tolerance},
                    {"worst_parameter", e.worst_parameter},
                    {"passed", e.passed()}});
  }
  text << entries.size() << " checks, " << failed << " failed\n";
  if (!c.out.empty()) {
    write_report(c.out, "gradcheck", c, Inputs{}, {{"rows", rows}, {"failed", failed}}, text.str(), out);
  } else {
    out << text.str();
  }
  return failed ? kNumerical : kOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Battery life prediction: synthetic fleets, preprocessing, training and evaluation", "blp"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("-c,--config", o.config, "JSON run configuration");
  app.add_option("--seed", o.seed, "top-level seed (overrides BLP_SEED and the config)");
  app.add_option("-j,--jobs", o.jobs, "worker threads for per-battery stages");
  app.add_option("-o,--out", o.out, "output directory");
  app.add_flag("--force", o.force, "allow writing into a non-empty directory");

  auto* synth = app.add_subcommand("synth", "generate a synthetic fleet");
  synth->add_option("-n,--batteries", o.n_batteries, "number of batteries");
  auto* pre = app.add_subcommand("preprocess", "clean, label and resample a fleet into a sample cache");
  auto* train = app.add_subcommand("train", "train and test over the configured seeds");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* sweep = app.add_subcommand("sweep", "metrics as a function of usable cycles S");
  auto* transfer = app.add_subcommand("transfer", "adapt a pretrained checkpoint to a target fleet");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  for (auto* sub : {pre, train, ev, sweep, transfer}) {
    sub->add_option("-m,--manifest", o.manifest, "fleet manifest");
    sub->add_option("--cache", o.cache, "sample cache (read when present; written by preprocess)");
  }
  for (auto* sub : {ev, sweep, transfer}) sub->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  for (auto* sub : {train, ev, sweep, transfer}) sub->add_option("--alpha", o.alpha, "accuracy tolerance");
  for (auto* sub : {ev, sweep}) sub->add_option("--split-seed", o.split_seed, "evaluate on the test split of this run");
  sweep->add_flag("--retrain", o.retrain, "train a fresh model at each S");
  transfer->add_option("--mode", o.mode, "frozen, finetune or domain_adapt");
  transfer->add_option("--weight", o.weight, "MMD weight for domain_adapt");
  transfer->add_option("--source-manifest", o.source_manifest, "source fleet manifest");
  transfer->add_option("--source-cache", o.source_cache, "source sample cache");
  for (auto* sub : {synth, pre, train, ev, sweep, transfer, grad}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto c = resolve_config(command, o);
    if (command == "synth") return cmd_synth(c, o.force, out);
    if (command == "preprocess") return cmd_preprocess(c, out, err);
    if (command == "train") return cmd_train(c, out, err);
    if (command == "eval") return cmd_eval(c, out, err);
    if (command == "sweep") return cmd_sweep(c, out, err);
    if (command == "transfer") return cmd_transfer(c, out, err);
    return cmd_gradcheck(c, out);
  } catch (const std::exception& e) {
    err << "blp " << command << ": " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace blp::cli
