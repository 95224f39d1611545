// Experiment runner: data generation, training in each setting, leave-one-out
// evaluation, k-shot sweeps, and report emission. Every command is a pure
// function of (config file, input files, seed); identical invocations write
// identical artifacts.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "paml/episodes.hpp"
#include "paml/evalsuite.hpp"
#include "paml/metatrain.hpp"
#include "paml/rng.hpp"
#include "paml/seqmodel.hpp"

namespace fs = std::filesystem;
using namespace paml;

namespace {

// ---------------------------------------------------------------------------
// config file: flat key=value sections
// ---------------------------------------------------------------------------

class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    KeyValueConfig cfg;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(path + ":" + std::to_string(line_no) +
                            ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(line_no) +
                          ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
      cfg.values_[qualified(section, key)] = value;
    }
    return cfg;
  }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto v = get(key);
    return v ? *v : fallback;
  }

  double get_double(const std::string& key, double fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    try {
      return std::stod(*v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not a number: " + *v);
    }
  }

  long get_long(const std::string& key, long fallback) const {
    auto v = get(key);
    if (!v) return fallback;
    try {
      return std::stol(*v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': not an integer: " + *v);
    }
  }

  void reject_unknown_keys() const {
    for (const auto& [key, value] : values_) {
      (void)value;
      if (used_.find(key) == used_.end())
        throw ConfigError("unknown config key: " + key);
    }
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
  }
  static std::string qualified(const std::string& section,
                               const std::string& key) {
    return section.empty() ? key : section + "." + key;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  // data
  std::string source = "synthetic";
  std::string corpus_path;
  std::string pc_train, pc_valid, pc_test;  // personachat split files
  int n_personas = 65;
  int facts_per_persona = 4;
  double dialogues_mean = 8.3;
  double train_fraction = 0.7;
  double valid_fraction = 0.1;

  ModelConfig model;  // vocab_size filled from the corpus at load time

  HyperParams hp;

  // evaluation
  std::vector<int> ks{0, 1, 3, 5, 10};
  EvalDecodeCfg decode;
  AdaptSpec adapt;
  std::string nli_backend = "rule";
};

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad integer list element: " + item);
    }
  }
  return out;
}

ExperimentConfig load_experiment(const std::string& path) {
  const KeyValueConfig kv = KeyValueConfig::parse_file(path);
  ExperimentConfig ec;

  const auto seed = kv.get("seed");
  if (!seed) throw ConfigError("config must set a top-level seed");
  ec.seed = static_cast<std::uint64_t>(std::stoull(*seed));
  ec.out_dir = kv.get_or("out_dir", "out");

  ec.source = kv.get_or("data.source", "synthetic");
  if (ec.source != "synthetic" && ec.source != "personachat")
    throw ConfigError("data.source must be synthetic or personachat");
  ec.corpus_path = kv.get_or("data.path", "");
  ec.pc_train = kv.get_or("data.train_path", "");
  ec.pc_valid = kv.get_or("data.valid_path", "");
  ec.pc_test = kv.get_or("data.test_path", "");
  ec.n_personas = static_cast<int>(kv.get_long("data.n_personas", 65));
  ec.facts_per_persona =
      static_cast<int>(kv.get_long("data.facts_per_persona", 4));
  ec.dialogues_mean = kv.get_double("data.dialogues_mean", 8.3);
  ec.train_fraction = kv.get_double("data.train_fraction", 0.7);
  ec.valid_fraction = kv.get_double("data.valid_fraction", 0.1);

  ec.model.embed_dim = static_cast<int>(kv.get_long("model.embed_dim", 16));
  ec.model.model_dim = static_cast<int>(kv.get_long("model.model_dim", 16));
  ec.model.layers = static_cast<int>(kv.get_long("model.layers", 2));
  ec.model.heads = static_cast<int>(kv.get_long("model.heads", 2));
  ec.model.ffn_dim = static_cast<int>(kv.get_long("model.ffn_dim", 32));
  ec.model.max_context = static_cast<int>(kv.get_long("model.max_context", 128));
  ec.model.dropout = kv.get_double("model.dropout", 0.0);

  ec.hp.alpha = kv.get_double("train.alpha", 0.01);
  ec.hp.beta = kv.get_double("train.beta", 0.0003);
  ec.hp.inner_steps = static_cast<int>(kv.get_long("train.inner_steps", 1));
  ec.hp.meta_batch_size = static_cast<int>(kv.get_long("train.batch_size", 16));
  ec.hp.outer_steps = static_cast<int>(kv.get_long("train.outer_steps", 100));
  ec.hp.warmup_steps = static_cast<int>(kv.get_long("train.warmup_steps", 200));
  const double clip = kv.get_double("train.clip_norm", 1.0);
  ec.hp.clip_norm = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
  ec.hp.support_fraction = kv.get_double("train.support_fraction", 0.75);
  const std::string mode = kv.get_or("train.grad_mode", "second");
  if (mode == "second")
    ec.hp.grad_mode = GradMode::SecondOrder;
  else if (mode == "first")
    ec.hp.grad_mode = GradMode::FirstOrder;
  else
    throw ConfigError("train.grad_mode must be second or first");

  const auto ks = kv.get("eval.ks");
  if (ks) ec.ks = parse_int_list(*ks);
  ec.decode.beam_width = static_cast<int>(kv.get_long("eval.beam", 5));
  ec.decode.max_response = static_cast<int>(kv.get_long("eval.max_response", 32));
  ec.adapt.alpha = kv.get_double("eval.adapt_alpha", 0.01);
  ec.adapt.steps = static_cast<int>(kv.get_long("eval.adapt_steps", 5));
  ec.nli_backend = kv.get_or("eval.nli", "rule");
  if (ec.nli_backend != "rule")
    throw ConfigError("eval.nli: only the 'rule' backend is built in");

  kv.reject_unknown_keys();
  return ec;
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

void require_exists(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is not set");
  if (!fs::exists(path)) throw ConfigError(what + " does not exist: " + path);
}

MetaDataset load_dataset(const ExperimentConfig& ec) {
  if (ec.source == "personachat") {
    require_exists(ec.pc_train, "data.train_path");
    require_exists(ec.pc_valid, "data.valid_path");
    require_exists(ec.pc_test, "data.test_path");
    return load_personachat_splits(ec.pc_train, ec.pc_valid, ec.pc_test);
  }
  require_exists(ec.corpus_path, "data.path");
  return load_corpus(ec.corpus_path);
}

ModelConfig model_for(const ExperimentConfig& ec, const MetaDataset& data) {
  ModelConfig cfg = ec.model;
  cfg.vocab_size = data.vocab.size();
  cfg.validate();
  return cfg;
}

std::string checkpoint_path(const ExperimentConfig& ec, const std::string& mode) {
  return (fs::path(ec.out_dir) / ("checkpoint_" + mode + ".bin")).string();
}

// "name=path" or bare "path" (named by the eval setting)
std::pair<std::string, std::string> split_named_path(const std::string& arg,
                                                     const std::string& fallback) {
  const std::size_t eq = arg.find('=');
  if (eq == std::string::npos) return {fallback, arg};
  return {arg.substr(0, eq), arg.substr(eq + 1)};
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& ec) {
  if (ec.source != "synthetic")
    throw ConfigError("gen-data only applies to data.source = synthetic");
  if (ec.corpus_path.empty()) throw ConfigError("data.path is not set");

  const MetaDataset data = generate_synthetic_corpus(
      ec.n_personas, ec.facts_per_persona, ec.dialogues_mean,
      substream_seed(ec.seed, "data"), ec.train_fraction, ec.valid_fraction);

  fs::create_directories(fs::path(ec.corpus_path).parent_path().empty()
                             ? "."
                             : fs::path(ec.corpus_path).parent_path().string());
  fs::create_directories(ec.out_dir);
  save_corpus(data, ec.corpus_path);
  data.vocab.save_file(ec.corpus_path + ".vocab.txt");

  // dialogue-count histogram: one row per count from 1 to the observed max
  std::vector<const PersonaTask*> tasks;
  for (const auto& t : data.train) tasks.push_back(&t);
  for (const auto& t : data.valid) tasks.push_back(&t);
  for (const auto& t : data.test) tasks.push_back(&t);
  std::size_t max_count = 0;
  double total = 0.0;
  for (const PersonaTask* t : tasks) {
    max_count = std::max(max_count, t->dialogues.size());
    total += static_cast<double>(t->dialogues.size());
  }
  std::vector<long> histogram(max_count + 1, 0);
  for (const PersonaTask* t : tasks) histogram[t->dialogues.size()]++;
  const std::string hist_path =
      (fs::path(ec.out_dir) / "dialogue_histogram.csv").string();
  std::ofstream hist(hist_path);
  hist << "dialogues,personas\n";
  for (std::size_t c = 1; c <= max_count; ++c)
    hist << c << ',' << histogram[c] << '\n';

  std::printf("corpus: %s\n", ec.corpus_path.c_str());
  std::printf("personas: %zu (train %zu / valid %zu / test %zu)\n",
              tasks.size(), data.train.size(), data.valid.size(),
              data.test.size());
  std::printf("vocabulary: %d tokens\n", data.vocab.size());
  std::printf("mean dialogues per persona: %.2f\n",
              total / static_cast<double>(tasks.size()));
  std::printf("histogram: %s\n", hist_path.c_str());
  return 0;
}

int cmd_train(const ExperimentConfig& ec, const std::string& mode) {
  const MetaDataset data = load_dataset(ec);
  const ModelConfig cfg = model_for(ec, data);
  HyperParams hp = ec.hp;
  hp.seed = substream_seed(ec.seed, "train");

  ParamVector theta;
  TrainLog log;
  if (mode == "paml") {
    std::tie(theta, log) = paml_train(data, cfg, hp);
  } else if (mode == "joint") {
    std::tie(theta, log) = joint_train(data, cfg, hp, false);
  } else if (mode == "joint_persona") {
    std::tie(theta, log) = joint_train(data, cfg, hp, true);
  } else {
    throw ConfigError("unknown training mode: " + mode);
  }

  fs::create_directories(ec.out_dir);
  Checkpoint ckpt{cfg, mode, hp.outer_steps, theta};
  const std::string cpath = checkpoint_path(ec, mode);
  save_checkpoint(ckpt, cpath);
  const std::string lpath =
      (fs::path(ec.out_dir) / ("trainlog_" + mode + ".csv")).string();
  log.save_csv(lpath);

  std::printf("mode: %s\n", mode.c_str());
  std::printf("parameters: %zu\n", theta.size());
  std::printf("outer steps: %d\n", hp.outer_steps);
  if (!log.records.empty())
    std::printf("final loss: %.6f\n", log.records.back().meta_loss);
  std::printf("checkpoint: %s\n", cpath.c_str());
  std::printf("train log: %s\n", lpath.c_str());
  return 0;
}

int cmd_eval(const ExperimentConfig& ec, const std::string& setting,
             const std::string& checkpoint_arg) {
  const MetaDataset data = load_dataset(ec);
  const ModelConfig cfg = model_for(ec, data);
  require_exists(checkpoint_arg, "--checkpoint");
  const Checkpoint ckpt = load_checkpoint(checkpoint_arg);
  ckpt.ensure_matches(cfg);

  std::optional<AdaptSpec> mode;
  if (setting == "zero_shot") {
    mode = std::nullopt;
  } else if (setting == "finetune" || setting == "paml_adapt") {
    mode = ec.adapt;
  } else {
    throw ConfigError("unknown eval setting: " + setting);
  }
  EvalDecodeCfg dc = ec.decode;
  dc.use_persona = (ckpt.mode == "joint_persona");

  std::vector<TranscriptEntry> transcripts;
  const EvalResult row =
      evaluate_setting(cfg, ckpt.theta, data.test, mode, rule_nli_fn(),
                       data.vocab, dc, setting, &transcripts);

  fs::create_directories(ec.out_dir);
  EvalReport report;
  report.rows = {row};
  const std::string rpath =
      (fs::path(ec.out_dir) / ("eval_" + setting + "_" + ckpt.mode + ".csv"))
          .string();
  report.save_csv(rpath);
  const std::string tpath =
      (fs::path(ec.out_dir) / ("transcripts_" + setting + "_" + ckpt.mode +
                               ".jsonl"))
          .string();
  save_transcripts(transcripts, tpath);

  std::fputs(report.table().c_str(), stdout);
  std::printf("report: %s\n", rpath.c_str());
  std::printf("transcripts: %s\n", tpath.c_str());
  return 0;
}

int cmd_kshot(const ExperimentConfig& ec,
              const std::vector<std::string>& checkpoint_args) {
  if (checkpoint_args.empty())
    throw ConfigError("kshot needs at least one --checkpoint");
  const MetaDataset data = load_dataset(ec);
  const ModelConfig cfg = model_for(ec, data);

  EvalReport report;
  for (const std::string& arg : checkpoint_args) {
    const auto [name, path] = split_named_path(arg, "paml_adapt");
    require_exists(path, "--checkpoint");
    const Checkpoint ckpt = load_checkpoint(path);
    ckpt.ensure_matches(cfg);
    EvalDecodeCfg dc = ec.decode;
    dc.use_persona = (ckpt.mode == "joint_persona");
    const auto rows =
        kshot_sweep(cfg, ckpt.theta, data.test, ec.ks, ec.adapt, rule_nli_fn(),
                    data.vocab, dc, name, substream_seed(ec.seed, "eval"));
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalResult& a, const EvalResult& b) {
              if (a.setting != b.setting) return a.setting < b.setting;
              return a.k < b.k;
            });

  fs::create_directories(ec.out_dir);
  const std::string rpath = (fs::path(ec.out_dir) / "kshot.csv").string();
  report.save_csv(rpath);
  std::fputs(report.table().c_str(), stdout);
  std::printf("curves: %s\n", rpath.c_str());
  return 0;
}

int cmd_report(const ExperimentConfig& ec) {
  // gather every eval_*.csv and kshot.csv in the output directory
  EvalReport combined;
  if (!fs::exists(ec.out_dir))
    throw ConfigError("output directory does not exist: " + ec.out_dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(ec.out_dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() &&
        ((name.rfind("eval_", 0) == 0 && name.ends_with(".csv")) ||
         name == "kshot.csv"))
      files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  for (const std::string& file : files) {
    std::ifstream in(file);
    std::string line;
    std::getline(in, line);  // header
    if (line != "setting,k,ppl,bleu,C,episodes")
      throw ParseError("unexpected report header in " + file);
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string field;
      EvalResult r;
      std::getline(ss, r.setting, ',');
      std::getline(ss, field, ',');
      r.k = std::stoi(field);
      std::getline(ss, field, ',');
      r.ppl = std::stod(field);
      std::getline(ss, field, ',');
      r.bleu = std::stod(field);
      std::getline(ss, field, ',');
      r.mean_c = std::stod(field);
      std::getline(ss, field, ',');
      r.episodes = std::stol(field);
      combined.rows.push_back(std::move(r));
    }
  }
  if (combined.rows.empty())
    throw ConfigError("no eval reports found under " + ec.out_dir);
  std::fputs(combined.table().c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"persona-agnostic meta-learning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  app.add_option("--config", config_path, "experiment config file")
      ->required();
  app.add_option("--seed", seed_override, "override the config seed");
  app.add_option("--out", out_override, "override the output directory");

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  CLI::App* train = app.add_subcommand("train", "train one setting");
  std::string train_mode = "paml";
  train->add_option("--mode", train_mode, "paml | joint | joint_persona");
  CLI::App* eval = app.add_subcommand("eval", "leave-one-out evaluation");
  std::string eval_setting = "zero_shot";
  std::string eval_checkpoint;
  eval->add_option("--setting", eval_setting,
                   "zero_shot | finetune | paml_adapt");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")
      ->required();
  CLI::App* kshot = app.add_subcommand("kshot", "k-shot consistency sweep");
  std::vector<std::string> kshot_checkpoints;
  kshot
      ->add_option("--checkpoint", kshot_checkpoints,
                   "checkpoint file, optionally as name=path; repeatable")
      ->required();
  CLI::App* report = app.add_subcommand("report", "print collected reports");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return (e.get_name() == "CallForHelp" || e.get_name() == "CallForVersion")
               ? code
               : 1;
  }

  try {
    ExperimentConfig ec = load_experiment(config_path);
    if (seed_override) ec.seed = *seed_override;
    if (out_override) ec.out_dir = *out_override;

    if (gen->parsed()) return cmd_gen_data(ec);
    if (train->parsed()) return cmd_train(ec, train_mode);
    if (eval->parsed()) return cmd_eval(ec, eval_setting, eval_checkpoint);
    if (kshot->parsed()) return cmd_kshot(ec, kshot_checkpoints);
    if (report->parsed()) return cmd_report(ec);
    return 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const InvalidHyperparameter& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
