#pragma once

// Experiment matrix: config file, on-disk layout, and the six commands that
// take a seed from a fresh base model to report tables.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptrojan/attack.hpp"
#include "ptrojan/continual.hpp"
#include "ptrojan/corpus.hpp"
#include "ptrojan/metrics.hpp"
#include "ptrojan/model.hpp"
#include "ptrojan/theory.hpp"
#include "ptrojan/trigger.hpp"

namespace ptrojan {

namespace fs = std::filesystem;

/// Bad config file, unknown key, or a config that does not match the output directory.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A checkpoint or trigger file a command depends on is absent.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  ModelConfig model;

  Task target_task = Task::Cls;
  std::vector<Task> pretrain_tasks = {Task::Cls};
  std::size_t pretrain_examples = 600;  // per task
  std::size_t attack_examples = 400;    // clean target-task set D_c
  std::size_t eval_examples = 200;      // per task, and triggered
  std::size_t alignment_sample = 16;
  std::size_t trigger_length = 3;

  std::size_t pretrain_steps = 600;
  double pretrain_lr = 3e-3;
  std::size_t pretrain_batch = 16;
  double acc_floor = 90.0;
  std::size_t eval_every = 25;  // 0 = run all steps

  SearchConfig search;

  double proportion = 0.4;
  std::size_t attack_epochs = 4;
  double attack_lr = 2e-3;
  std::size_t attack_batch = 16;
  std::vector<Provenance> arms = {Provenance::BadNet, Provenance::BadNetCe, Provenance::PTrojan};

  StageSpec cleanup;
  StageSpec cross;
  std::vector<Strategy> strategies = {Strategy::Full, Strategy::Replay, Strategy::Freeze};
  bool reversed_order = true;

  std::size_t theory_steps = 10;
  std::size_t theory_probe = 8;

  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};

  ExperimentConfig() {
    search.rounds = 10;
    cleanup.kind = StageKind::Cleanup;
    cleanup.tasks = {Task::Cls};
    cross.kind = StageKind::CrossTask;
    cross.tasks = {Task::Math, Task::Seq};
  }

  void set(const std::string& section, const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;

  /// FNV-1a of the canonical text, 16 hex digits.
  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(to_text())));
    return buf;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  const unsigned long long r = std::stoull(v, &pos);
  if (pos != v.size() || v.front() == '-') throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(r);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  const double r = std::stod(v, &pos);
  if (pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return r;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline void set_stage(StageSpec& s, const std::string& key, const std::string& v) {
  if (key == "tasks") {
    s.tasks.clear();
    for (const auto& t : split_list(v)) s.tasks.push_back(parse_task(t));
  } else if (key == "replay_fraction") s.replay_fraction = to_double(key, v);
  else if (key == "trainable") s.freeze_trainable = split_list(v);
  else if (key == "examples") s.examples_per_task = to_size(key, v);
  else if (key == "epochs") s.epochs = to_size(key, v);
  else if (key == "lr") s.lr = to_double(key, v);
  else if (key == "batch_size") s.batch_size = to_size(key, v);
  else throw ConfigError("unknown stage key '" + key + "'");
}

inline std::string stage_text(const std::string& section, const StageSpec& s) {
  std::ostringstream os;
  os << "[" << section << "]\n"
     << "tasks=" << join(s.tasks, task_name) << "\n"
     << "replay_fraction=" << num(s.replay_fraction) << "\n"
     << "trainable=" << join(s.freeze_trainable, [](const std::string& x) { return x; }) << "\n"
     << "examples=" << s.examples_per_task << "\n"
     << "epochs=" << s.epochs << "\n"
     << "lr=" << num(s.lr) << "\n"
     << "batch_size=" << s.batch_size << "\n";
  return os.str();
}

}  // namespace detail

inline void ExperimentConfig::set(const std::string& section, const std::string& key, const std::string& v) {
  using namespace detail;
  const std::string k = section + "." + key;
  try {
    if (section == "model") {
      if (key == "vocab_size") model.vocab_size = to_size(k, v);
      else if (key == "d_model") model.d_model = to_size(k, v);
      else if (key == "n_layers") model.n_layers = to_size(k, v);
      else if (key == "n_heads") model.n_heads = to_size(k, v);
      else if (key == "d_ff") model.d_ff = to_size(k, v);
      else if (key == "max_seq_len") model.max_seq_len = to_size(k, v);
      else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "corpus") {
      if (key == "target_task") target_task = parse_task(v);
      else if (key == "pretrain_tasks") {
        pretrain_tasks.clear();
        for (const auto& t : split_list(v)) pretrain_tasks.push_back(parse_task(t));
      } else if (key == "pretrain_examples") pretrain_examples = to_size(k, v);
      else if (key == "attack_examples") attack_examples = to_size(k, v);
      else if (key == "eval_examples") eval_examples = to_size(k, v);
      else if (key == "alignment_sample") alignment_sample = to_size(k, v);
      else if (key == "trigger_length") trigger_length = to_size(k, v);
      else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "pretrain") {
      if (key == "steps") pretrain_steps = to_size(k, v);
      else if (key == "lr") pretrain_lr = to_double(k, v);
      else if (key == "batch_size") pretrain_batch = to_size(k, v);
      else if (key == "acc_floor") acc_floor = to_double(k, v);
      else if (key == "eval_every") eval_every = to_size(k, v);
      else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "search") {
      if (key == "n_positions") search.n_positions = to_size(k, v);
      else if (key == "top_k") search.top_k = to_size(k, v);
      else if (key == "budget") search.budget = to_size(k, v);
      else if (key == "rounds") search.rounds = to_size(k, v);
      else if (key == "temperature") search.temperature = to_double(k, v);
      else if (key == "descent_candidates") search.descent_candidates = to_bool(k, v);
      else if (key == "pooling") {
        if (v == "mean") search.alignment.pooling = Pooling::MeanPool;
        else if (v == "response_flatten") search.alignment.pooling = Pooling::ResponseFlatten;
        else throw ConfigError(k + ": expected mean|response_flatten");
      } else if (key == "space") {
        if (v == "final_embedding") search.alignment.space = GradientSpace::FinalEmbedding;
        else if (v == "parameters") search.alignment.space = GradientSpace::Parameters;
        else throw ConfigError(k + ": expected final_embedding|parameters");
      } else if (key == "aggregation") {
        if (v == "batch_then_cosine") search.alignment.aggregation = Aggregation::BatchThenCosine;
        else if (v == "per_example_cosine") search.alignment.aggregation = Aggregation::PerExampleCosine;
        else throw ConfigError(k + ": expected batch_then_cosine|per_example_cosine");
      } else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "attack") {
      if (key == "proportion") proportion = to_double(k, v);
      else if (key == "epochs") attack_epochs = to_size(k, v);
      else if (key == "lr") attack_lr = to_double(k, v);
      else if (key == "batch_size") attack_batch = to_size(k, v);
      else if (key == "arms") {
        arms.clear();
        for (const auto& a : split_list(v)) arms.push_back(parse_provenance(a));
      } else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "cleanup") {
      set_stage(cleanup, key, v);
    } else if (section == "cross_task") {
      if (key == "strategies") {
        strategies.clear();
        for (const auto& s : split_list(v)) strategies.push_back(parse_strategy(s));
      } else if (key == "reversed_order") reversed_order = to_bool(k, v);
      else set_stage(cross, key, v);
    } else if (section == "theory") {
      if (key == "steps") theory_steps = to_size(k, v);
      else if (key == "probe") theory_probe = to_size(k, v);
      else throw ConfigError("unknown key '" + k + "'");
    } else if (section == "run") {
      if (key == "seeds") {
        seeds.clear();
        for (const auto& s : split_list(v)) seeds.push_back(to_size(k, s));
      } else throw ConfigError("unknown key '" + k + "'");
    } else {
      throw ConfigError("unknown section '" + section + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(k + ": " + e.what());
  }
}

inline std::string ExperimentConfig::to_text() const {
  using namespace detail;
  std::ostringstream os;
  os << "[model]\nvocab_size=" << model.vocab_size << "\nd_model=" << model.d_model << "\nn_layers="
     << model.n_layers << "\nn_heads=" << model.n_heads << "\nd_ff=" << model.d_ff
     << "\nmax_seq_len=" << model.max_seq_len << "\n";
  os << "[corpus]\ntarget_task=" << task_name(target_task) << "\npretrain_tasks=" << join(pretrain_tasks, task_name)
     << "\npretrain_examples=" << pretrain_examples << "\nattack_examples=" << attack_examples
     << "\neval_examples=" << eval_examples << "\nalignment_sample=" << alignment_sample
     << "\ntrigger_length=" << trigger_length << "\n";
  os << "[pretrain]\nsteps=" << pretrain_steps << "\nlr=" << num(pretrain_lr) << "\nbatch_size=" << pretrain_batch
     << "\nacc_floor=" << num(acc_floor) << "\neval_every=" << eval_every << "\n";
  os << "[search]\nn_positions=" << search.n_positions << "\ntop_k=" << search.top_k << "\nbudget=" << search.budget
     << "\nrounds=" << search.rounds << "\ntemperature=" << num(search.temperature)
     << "\ndescent_candidates=" << (search.descent_candidates ? "true" : "false")
     << "\npooling=" << pooling_name(search.alignment.pooling) << "\nspace=" << space_name(search.alignment.space)
     << "\naggregation=" << aggregation_name(search.alignment.aggregation) << "\n";
  os << "[attack]\nproportion=" << num(proportion) << "\nepochs=" << attack_epochs << "\nlr=" << num(attack_lr)
     << "\nbatch_size=" << attack_batch << "\narms=" << join(arms, provenance_name) << "\n";
  os << stage_text("cleanup", cleanup);
  os << stage_text("cross_task", cross) << "strategies=" << join(strategies, strategy_name)
     << "\nreversed_order=" << (reversed_order ? "true" : "false") << "\n";
  os << "[theory]\nsteps=" << theory_steps << "\nprobe=" << theory_probe << "\n";
  os << "[run]\nseeds=" << join(seeds, [](std::uint64_t s) { return std::to_string(s); }) << "\n";
  return os.str();
}

inline void ExperimentConfig::validate() const {
  try {
    model.validate();
    if (pretrain_tasks.empty()) throw ConfigError("corpus.pretrain_tasks is empty");
    if (pretrain_examples < 1 || attack_examples < 1 || eval_examples < 1) {
      throw ConfigError("corpus sizes must be >= 1");
    }
    if (alignment_sample < 1 || alignment_sample > attack_examples) {
      throw ConfigError("corpus.alignment_sample must be in [1, attack_examples]");
    }
    if (trigger_length < 1) throw ConfigError("corpus.trigger_length must be >= 1");
    if (pretrain_steps < 1) throw ConfigError("pretrain.steps must be >= 1");
    search.validate(trigger_length);
    if (!(proportion > 0.0 && proportion <= 1.0)) throw ConfigError("attack.proportion must be in (0, 1]");
    if (attack_epochs < 1) throw ConfigError("attack.epochs must be >= 1");
    if (arms.empty()) throw ConfigError("attack.arms is empty");
    if (cleanup.tasks.size() != 1 || cleanup.tasks.front() != target_task) {
      throw ConfigError("cleanup.tasks must be exactly the target task " + task_name(target_task));
    }
    if (cross.tasks.empty()) throw ConfigError("cross_task.tasks is empty");
    if (strategies.empty()) throw ConfigError("cross_task.strategies is empty");
    for (const auto* s : {&cleanup, &cross}) {
      if (!(s->replay_fraction >= 0.0 && s->replay_fraction < 1.0)) {
        throw ConfigError("replay_fraction must be in [0, 1)");
      }
      if (s->epochs < 1 || s->batch_size < 1) throw ConfigError("stage epochs and batch_size must be >= 1");
    }
    if (seeds.empty()) throw ConfigError("run.seeds is empty");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

/// Sections and key=value lines; '#' starts a comment.
inline ExperimentConfig parse_experiment_config(std::istream& is, ExperimentConfig base = {}) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || section.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected [section] or key=value");
    }
    base.set(section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

/// "section.key=value" override.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "': expected section.key=value");
  }
  cfg.set(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
}

// ---------------------------------------------------------------------------
// Per-seed data. Every derived seed is a fixed function of the run seed.

struct SeedData {
  std::uint64_t seed = 0;
  ModelConfig model;
  Vocab vocab;
  std::vector<int> target;
  std::vector<Example> pretrain;
  Dataset attack_clean;
  std::vector<Example> alignment_sample;
  EvalSet eval;  // triggered set is filled per arm
};

inline SeedData make_seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d;
  d.seed = seed;
  d.model = cfg.model;
  d.model.seed = seed;
  d.vocab = Vocab::build(cfg.model.vocab_size);
  d.target = d.vocab.tokenize(kRefusalText);
  for (Task t : cfg.pretrain_tasks) {
    auto ds = gen_task(d.vocab, t, cfg.pretrain_examples, seed * 10 + 1);
    d.pretrain.insert(d.pretrain.end(), ds.examples.begin(), ds.examples.end());
  }
  d.attack_clean = gen_task(d.vocab, cfg.target_task, cfg.attack_examples, seed * 10 + 2);
  d.alignment_sample.assign(d.attack_clean.examples.begin(),
                            d.attack_clean.examples.begin() + static_cast<std::ptrdiff_t>(cfg.alignment_sample));
  std::vector<Task> eval_tasks = {cfg.target_task};
  for (Task t : cfg.cross.tasks)
    if (std::find(eval_tasks.begin(), eval_tasks.end(), t) == eval_tasks.end()) eval_tasks.push_back(t);
  for (Task t : eval_tasks) d.eval.clean[t] = gen_task(d.vocab, t, cfg.eval_examples, seed, Split::Eval).examples;
  return d;
}

inline PretrainConfig pretrain_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  PretrainConfig p;
  p.model = cfg.model;
  p.model.seed = seed;
  p.steps = cfg.pretrain_steps;
  p.lr = cfg.pretrain_lr;
  p.batch_size = cfg.pretrain_batch;
  p.acc_floor = cfg.acc_floor;
  p.eval_every = cfg.eval_every;
  p.seed = seed;
  return p;
}

inline AttackConfig attack_config(const ExperimentConfig& cfg, std::uint64_t seed, const Trigger& trigger,
                                  const std::vector<int>& target) {
  AttackConfig a;
  a.trigger = trigger;
  a.target = target;
  a.proportion = cfg.proportion;
  a.epochs = cfg.attack_epochs;
  a.lr = cfg.attack_lr;
  a.batch_size = cfg.attack_batch;
  a.seed = seed;
  return a;
}

/// Uniform draw of m non-special tokens.
inline Trigger random_trigger(const ModelConfig& model, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x7a11dULL);
  std::uniform_int_distribution<int> pick(special::kCount, static_cast<int>(model.vocab_size) - 1);
  Trigger t{{}, Provenance::Random};
  for (std::size_t i = 0; i < m; ++i) t.ids.push_back(pick(rng));
  return t;
}

// ---------------------------------------------------------------------------
// Output directory.

class Workspace {
 public:
  Workspace(fs::path root, const ExperimentConfig& cfg) : root_(std::move(root)), hash_(cfg.hash()) {}

  const fs::path& root() const { return root_; }
  const std::string& config_hash() const { return hash_; }

  fs::path seed_dir(std::uint64_t seed) const { return root_ / ("seed_" + std::to_string(seed)); }
  fs::path base_ckpt(std::uint64_t seed) const { return seed_dir(seed) / "base.ckpt"; }
  fs::path clean_ckpt(std::uint64_t seed) const { return seed_dir(seed) / "clean.ckpt"; }
  fs::path trigger_file(std::uint64_t seed, Provenance arm) const {
    return seed_dir(seed) / (provenance_name(arm) + ".trigger");
  }
  fs::path implant_ckpt(std::uint64_t seed, Provenance arm) const {
    return seed_dir(seed) / (provenance_name(arm) + ".implant.ckpt");
  }
  fs::path stage_ckpt(std::uint64_t seed, Provenance arm, const std::string& stage) const {
    return seed_dir(seed) / (provenance_name(arm) + "." + stage + ".ckpt");
  }
  fs::path records_dir() const { return root_ / "records"; }
  fs::path records_file(const std::string& command, std::uint64_t seed, std::optional<Provenance> arm = {}) const {
    std::string name = command + "_s" + std::to_string(seed);
    if (arm) name += "_" + provenance_name(*arm);
    return records_dir() / (name + ".jsonl");
  }
  fs::path reports_dir() const { return root_ / "reports"; }

  /// Creates the directory tree and pins the config hash; a directory already
  /// holding another config is refused.
  void prepare(const ExperimentConfig& cfg) const {
    fs::create_directories(records_dir());
    const fs::path hash_file = root_ / "config_hash";
    if (fs::exists(hash_file)) {
      std::ifstream in(hash_file);
      std::string existing;
      in >> existing;
      if (existing != hash_) {
        throw ConfigError("output directory " + root_.string() + " holds config " + existing + ", this run is " +
                          hash_ + "; use another --out");
      }
      return;
    }
    write_atomic(root_ / "config.ini", cfg.to_text());
    write_atomic(hash_file, hash_ + "\n");
  }

  static void write_atomic(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + tmp.string());
      out << content;
      if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
  }

  static void save_checkpoint(const fs::path& path, const ModelParams& p) {
    write_atomic(path, checkpoint::serialize(p));
  }

  static ModelParams load_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifactError("missing checkpoint " + path.string());
    return checkpoint::load(path.string());
  }

 private:
  fs::path root_;
  std::string hash_;
};

/// Exclusive lock on an output directory for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw std::runtime_error("output directory is locked by another run (" + path_.string() +
                               "); remove the file if no run is active");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* pid is informational */ }
  }
  ~DirectoryLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Records.

class RecordWriter {
 public:
  RecordWriter(std::string config_hash, std::uint64_t seed) : hash_(std::move(config_hash)), seed_(seed) {}

  void metric(const std::string& arm, const std::string& stage, const std::string& task, const std::string& metric,
              double value) {
    nlohmann::ordered_json j;
    j["kind"] = "metric";
    j["arm"] = arm;
    j["stage"] = stage;
    j["task"] = task;
    j["metric"] = metric;
    j["value"] = value;
    j["seed"] = std::to_string(seed_);
    j["config_hash"] = hash_;
    lines_.push_back(j.dump());
  }

  /// Free-form object; arm, stage, seed and config hash are always attached.
  void object(const std::string& kind, const std::string& arm, const std::string& stage, nlohmann::ordered_json body) {
    nlohmann::ordered_json j;
    j["kind"] = kind;
    j["arm"] = arm;
    j["stage"] = stage;
    j["seed"] = std::to_string(seed_);
    j["config_hash"] = hash_;
    for (auto it = body.begin(); it != body.end(); ++it) j[it.key()] = it.value();
    lines_.push_back(j.dump());
  }

  void stage_report(const std::string& arm, const std::string& stage, const StageReport& r) {
    metric(arm, stage, "", "ASR", r.asr);
    for (const auto& [task, v] : r.acc) metric(arm, stage, task_name(task), "ACC", v);
    if (r.persis) metric(arm, stage, "", "PERSIS", *r.persis);
    if (r.cosine) metric(arm, stage, "", "COSINE", *r.cosine);
    nlohmann::ordered_json body;
    body["stage_id"] = r.stage_id;
    body["stage_kind"] = stage_kind_name(r.kind);
    body["strategy"] = strategy_name(r.strategy);
    body["frozen_unchanged"] = r.frozen_unchanged;
    body["wall_seconds"] = r.wall_seconds;
    object("stage_report", arm, stage, std::move(body));
  }

  std::string text() const {
    std::string out;
    for (const auto& l : lines_) out += l + "\n";
    return out;
  }

  void commit(const fs::path& path) const { Workspace::write_atomic(path, text()); }

 private:
  std::string hash_;
  std::uint64_t seed_;
  std::vector<std::string> lines_;
};

inline std::vector<MetricRecord> read_metric_records(const fs::path& records_dir) {
  std::vector<MetricRecord> out;
  if (!fs::exists(records_dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(records_dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.value("kind", "") != "metric") continue;
      auto str = [&](const char* k) { return j.at(k).get<std::string>(); };
      out.push_back({str("arm"), str("stage"), str("task"), str("metric"), j.at("value").get<double>(), str("seed"),
                     str("config_hash")});
    }
  }
  return out;
}

inline std::vector<nlohmann::json> read_objects(const fs::path& records_dir, const std::string& kind) {
  std::vector<nlohmann::json> out;
  if (!fs::exists(records_dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(records_dir))
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      if (j.value("kind", "") == kind) out.push_back(std::move(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

struct RunOptions {
  fs::path out;
  std::optional<std::uint64_t> seed;      // restrict to one seed
  std::optional<Provenance> arm;          // restrict to one arm
  bool force = false;
  std::function<void(const std::string&)> log = [](const std::string&) {};
};

class Experiment {
 public:
  Experiment(ExperimentConfig cfg, RunOptions opts)
      : cfg_(std::move(cfg)), opts_(std::move(opts)), ws_((cfg_.validate(), opts_.out), cfg_) {
    if (opts_.seed && std::find(cfg_.seeds.begin(), cfg_.seeds.end(), *opts_.seed) == cfg_.seeds.end()) {
      throw ConfigError("--seed " + std::to_string(*opts_.seed) + " is not in run.seeds");
    }
    if (opts_.arm && *opts_.arm != Provenance::Random &&
        std::find(cfg_.arms.begin(), cfg_.arms.end(), *opts_.arm) == cfg_.arms.end()) {
      throw ConfigError("--arm " + provenance_name(*opts_.arm) + " is not in attack.arms");
    }
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Workspace& workspace() const { return ws_; }

  /// Runs `fn` under the directory lock after pinning the config hash.
  template <class F>
  void locked(F&& fn) {
    ws_.prepare(cfg_);
    DirectoryLock lock(ws_.root());
    fn();
  }

  void cmd_pretrain() {
    locked([&] {
      for (auto seed : seeds()) pretrain_seed(seed);
    });
  }
  void cmd_trigger() {
    locked([&] {
      for (auto seed : seeds())
        for (auto arm : arms()) trigger_seed(seed, arm);
    });
  }
  void cmd_implant() {
    locked([&] {
      for (auto seed : seeds()) {
        clean_reference(seed);
        for (auto arm : arms()) implant_seed(seed, arm);
      }
    });
  }
  void cmd_eval() {
    locked([&] {
      for (auto seed : seeds()) eval_seed(seed);
    });
  }
  void cmd_finetune() {
    locked([&] {
      for (auto seed : seeds())
        for (auto arm : arms()) finetune_seed(seed, arm);
    });
  }
  /// Writes the report tables; returns the paths written.
  std::vector<fs::path> cmd_report() {
    std::vector<fs::path> written;
    locked([&] { written = write_reports(); });
    return written;
  }
  void cmd_all() {
    locked([&] {
      for (auto seed : seeds()) {
        pretrain_seed(seed);
        for (auto arm : arms()) trigger_seed(seed, arm);
        clean_reference(seed);
        for (auto arm : arms()) implant_seed(seed, arm);
        eval_seed(seed);
        for (auto arm : arms()) finetune_seed(seed, arm);
      }
      write_reports();
    });
  }

 private:
  std::vector<std::uint64_t> seeds() const {
    if (opts_.seed) return {*opts_.seed};
    return cfg_.seeds;
  }
  std::vector<Provenance> arms() const {
    if (opts_.arm) return {*opts_.arm};
    return cfg_.arms;
  }

  bool done(const fs::path& records) const { return !opts_.force && fs::exists(records); }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  void pretrain_seed(std::uint64_t seed) {
    const fs::path rec = ws_.records_file("pretrain", seed);
    if (done(rec) && fs::exists(ws_.base_ckpt(seed))) return;
    opts_.log("pretrain seed " + std::to_string(seed));
    const auto t0 = std::chrono::steady_clock::now();
    const SeedData d = make_seed_data(cfg_, seed);
    const PretrainResult r = pretrain_base(pretrain_config(cfg_, seed), d.pretrain, d.eval.clean.at(cfg_.target_task));
    Workspace::save_checkpoint(ws_.base_ckpt(seed), r.params);
    RecordWriter w(ws_.config_hash(), seed);
    nlohmann::ordered_json body;
    body["steps_run"] = r.steps_run;
    body["acc"] = r.cls_acc;
    body["floor_reached"] = r.floor_reached;
    body["final_loss"] = r.losses.empty() ? 0.0 : r.losses.back();
    body["wall_seconds"] = seconds_since(t0);
    w.object("pretrain", "BASE", "pretrain", std::move(body));
    if (!r.floor_reached) opts_.log("warning: seed " + std::to_string(seed) + " base model below the accuracy floor");
    w.commit(rec);
  }

  Trigger load_trigger(std::uint64_t seed, Provenance arm) const {
    const fs::path p = ws_.trigger_file(seed, arm);
    if (!fs::exists(p)) throw MissingArtifactError("missing trigger file " + p.string());
    std::ifstream in(p);
    return read_trigger_file(in).trigger;
  }

  void trigger_seed(std::uint64_t seed, Provenance arm) {
    const fs::path rec = ws_.records_file("trigger", seed, arm);
    if (done(rec) && fs::exists(ws_.trigger_file(seed, arm))) return;
    opts_.log("trigger seed " + std::to_string(seed) + " " + provenance_name(arm));
    const auto t0 = std::chrono::steady_clock::now();
    const SeedData d = make_seed_data(cfg_, seed);
    const ModelParams base = Workspace::load_checkpoint(ws_.base_ckpt(seed));
    SearchConfig sc = cfg_.search;
    sc.seed = seed;
    const Trigger initial = badnet_trigger(d.vocab, cfg_.trigger_length, seed);
    Trigger trig;
    std::optional<SearchResult> sr;
    switch (arm) {
      case Provenance::Random: trig = random_trigger(d.model, cfg_.trigger_length, seed); break;
      case Provenance::BadNet: trig = initial; break;
      case Provenance::BadNetCe: sr = badnet_ce_trigger(base, d.alignment_sample, initial, d.target, sc); break;
      case Provenance::PTrojan: sr = optimize_trigger(base, d.alignment_sample, initial, d.target, sc); break;
    }
    if (sr) trig = sr->trigger;
    TriggerFile tf;
    tf.trigger = trig;
    for (int id : trig.ids) tf.tokens.push_back(d.vocab.token(id));
    tf.alignment_cosine = alignment_cosine(base, d.alignment_sample, trig, d.target, sc.alignment);
    tf.similarity_loss = -tf.alignment_cosine;
    tf.search = sc;
    std::ostringstream os;
    write_trigger_file(os, tf);
    Workspace::write_atomic(ws_.trigger_file(seed, arm), os.str());
    RecordWriter w(ws_.config_hash(), seed);
    const std::string a = provenance_name(arm);
    w.metric(a, "trigger", task_name(cfg_.target_task), "COSINE", tf.alignment_cosine);
    nlohmann::ordered_json body;
    body["ids"] = trig.ids;
    body["tokens"] = tf.tokens;
    body["cosine"] = tf.alignment_cosine;
    if (sr) {
      body["initial_loss"] = sr->initial_loss;
      body["best_loss"] = sr->best_loss;
      body["evaluated"] = sr->evaluated;
      body["trace"] = sr->trace;
    }
    body["wall_seconds"] = seconds_since(t0);
    w.object("trigger", a, "trigger", std::move(body));
    w.commit(rec);
  }

  void clean_reference(std::uint64_t seed) {
    const fs::path rec = ws_.records_file("implant", seed);
    if (done(rec) && fs::exists(ws_.clean_ckpt(seed))) return;
    opts_.log("clean reference seed " + std::to_string(seed));
    const auto t0 = std::chrono::steady_clock::now();
    const SeedData d = make_seed_data(cfg_, seed);
    const ModelParams base = Workspace::load_checkpoint(ws_.base_ckpt(seed));
    // the clean-only model: same schedule, no poisoned examples
    const AttackConfig ac = attack_config(cfg_, seed, badnet_trigger(d.vocab, cfg_.trigger_length, seed), d.target);
    const ImplantResult r = implant(base, d.attack_clean.examples, {}, ac);
    Workspace::save_checkpoint(ws_.clean_ckpt(seed), r.params);
    RecordWriter w(ws_.config_hash(), seed);
    nlohmann::ordered_json body;
    body["epoch_losses"] = r.epoch_losses;
    body["wall_seconds"] = seconds_since(t0);
    w.object("implant", "CLEAN", "implant", std::move(body));
    w.commit(rec);
  }

  void implant_seed(std::uint64_t seed, Provenance arm) {
    const fs::path rec = ws_.records_file("implant", seed, arm);
    if (done(rec) && fs::exists(ws_.implant_ckpt(seed, arm))) return;
    opts_.log("implant seed " + std::to_string(seed) + " " + provenance_name(arm));
    const auto t0 = std::chrono::steady_clock::now();
    const SeedData d = make_seed_data(cfg_, seed);
    const ModelParams base = Workspace::load_checkpoint(ws_.base_ckpt(seed));
    const Trigger trig = load_trigger(seed, arm);
    const AttackConfig ac = attack_config(cfg_, seed, trig, d.target);
    const PoisonResult pr = poison(d.attack_clean, trig, d.target, cfg_.proportion, d.model.max_seq_len);
    const ImplantResult r = implant(base, pr.clean.examples, pr.poisoned.examples, ac);
    Workspace::save_checkpoint(ws_.implant_ckpt(seed, arm), r.params);
    RecordWriter w(ws_.config_hash(), seed);
    nlohmann::ordered_json body;
    body["trigger"] = trig.ids;
    body["poisoned"] = pr.poisoned.size();
    body["clean"] = pr.clean.size();
    body["epoch_losses"] = r.epoch_losses;
    body["wall_seconds"] = seconds_since(t0);
    w.object("implant", provenance_name(arm), "implant", std::move(body));
    w.commit(rec);
  }

  StageContext context(const SeedData& d, const Trigger& trig) const {
    StageContext ctx;
    ctx.vocab = &d.vocab;
    ctx.target_task = cfg_.target_task;
    ctx.trigger = trig;
    ctx.target = d.target;
    ctx.eval = d.eval;
    ctx.eval.triggered = triggered_copies(d.eval.clean.at(cfg_.target_task), trig, d.target);
    ctx.alignment_sample = d.alignment_sample;
    return ctx;
  }

  /// Clean accuracy of base and clean-only models, and the implant report of every arm.
  void eval_seed(std::uint64_t seed) {
    const fs::path rec = ws_.records_file("eval", seed);
    if (done(rec)) return;
    opts_.log("eval seed " + std::to_string(seed));
    const SeedData d = make_seed_data(cfg_, seed);
    RecordWriter w(ws_.config_hash(), seed);
    for (const auto& [name, path] : {std::pair<std::string, fs::path>{"BASE", ws_.base_ckpt(seed)},
                                     std::pair<std::string, fs::path>{"CLEAN", ws_.clean_ckpt(seed)}}) {
      const ModelParams p = Workspace::load_checkpoint(path);
      for (const auto& [task, ex] : d.eval.clean) w.metric(name, "implant", task_name(task), "ACC", acc(p, ex));
    }
    for (auto arm : cfg_.arms) {
      if (!fs::exists(ws_.implant_ckpt(seed, arm))) continue;
      const ModelParams p = Workspace::load_checkpoint(ws_.implant_ckpt(seed, arm));
      const Trigger trig = load_trigger(seed, arm);
      const StageContext ctx = context(d, trig);
      StageReport r = evaluate(p, ctx);
      r.stage_id = "implant";
      r.persis.reset();
      w.stage_report(provenance_name(arm), "implant", r);
    }
    w.commit(rec);
  }

  void finetune_seed(std::uint64_t seed, Provenance arm) {
    const fs::path rec = ws_.records_file("finetune", seed, arm);
    if (done(rec)) return;
    opts_.log("finetune seed " + std::to_string(seed) + " " + provenance_name(arm));
    const SeedData d = make_seed_data(cfg_, seed);
    const ModelParams backdoored = Workspace::load_checkpoint(ws_.implant_ckpt(seed, arm));
    const Trigger trig = load_trigger(seed, arm);
    StageContext ctx = context(d, trig);
    ctx.implant_asr = asr(backdoored, ctx.eval.triggered, ctx.target);
    const std::string a = provenance_name(arm);
    RecordWriter w(ws_.config_hash(), seed);
    w.object("finetune", a, "implant", {{"implant_asr", ctx.implant_asr}});

    StageSpec cleanup = cfg_.cleanup;
    cleanup.seed = seed;
    StageSpec cross = cfg_.cross;
    cross.seed = seed + 1;

    // original order: one cleanup stage, then each cross-task strategy from it
    StageOutcome cl = run_stage(backdoored, cleanup, ctx, "0-" + stage_kind_name(StageKind::Cleanup));
    w.stage_report(a, "cleanup", cl.report);
    Workspace::save_checkpoint(ws_.stage_ckpt(seed, arm, "cleanup"), cl.params);
    for (Strategy s : cfg_.strategies) {
      StageSpec x = cross;
      x.strategy = s;
      const std::string stage = "cross_" + strategy_name(s);
      StageOutcome o = run_stage(cl.params, x, ctx, "1-" + stage_kind_name(StageKind::CrossTask));
      w.stage_report(a, stage, o.report);
      w.metric(a, stage, "", "FROZEN_UNCHANGED", o.report.frozen_unchanged ? 1.0 : 0.0);
      Workspace::save_checkpoint(ws_.stage_ckpt(seed, arm, stage), o.params);
    }
    if (cfg_.reversed_order) {
      StageSpec x = cross;
      x.strategy = Strategy::Full;
      const PipelineResult rv = run_pipeline(backdoored, StagePlan{{x, cleanup}}, ctx);
      w.stage_report(a, "rev_cross_FULL", rv.reports.at(0));
      w.stage_report(a, "rev_cleanup", rv.reports.at(1));
      Workspace::save_checkpoint(ws_.stage_ckpt(seed, arm, "rev_cleanup"), rv.params);
    }
    if (cfg_.theory_steps > 0) bounds(w, a, d, backdoored, cleanup, ctx);
    w.commit(rec);
  }

  void bounds(RecordWriter& w, const std::string& arm, const SeedData& d, const ModelParams& backdoored,
              const StageSpec& cleanup, const StageContext& ctx) const {
    const auto& clean_eval = d.eval.clean.at(cfg_.target_task);
    const std::size_t n = std::min(cfg_.theory_probe, clean_eval.size());
    const std::vector<Example> clean_probe(clean_eval.begin(), clean_eval.begin() + static_cast<std::ptrdiff_t>(n));
    const std::vector<Example> poisoned_probe = triggered_copies(clean_probe, ctx.trigger, ctx.target);
    const std::vector<Example> data = stage_data(cleanup, ctx);
    const auto traj = record_trajectory(backdoored, data, clean_probe, poisoned_probe, ctx.trigger, ctx.target,
                                        {cleanup.epochs, cleanup.lr, cleanup.batch_size, cleanup.seed},
                                        cfg_.theory_steps);
    const BoundCheckReport rep = check_bounds(traj);
    const auto& c = rep.constants;
    w.metric(arm, "bounds", "", "THEOREM_FRACTION", rep.theorem_fraction);
    w.metric(arm, "bounds", "", "COROLLARY_FRACTION", rep.corollary_fraction);
    w.metric(arm, "bounds", "", "THEOREM_MONOTONE", rep.theorem_monotone ? 1.0 : 0.0);
    w.metric(arm, "bounds", "", "BETA", c.beta);
    w.metric(arm, "bounds", "", "ETA", c.eta);
    w.metric(arm, "bounds", "", "G", c.G);
    w.metric(arm, "bounds", "", "UPSILON", c.upsilon);
    w.metric(arm, "bounds", "", "DELTA", c.Delta);
    nlohmann::ordered_json body;
    body["constants"] = {{"beta", c.beta},           {"eta", c.eta},
                         {"G", c.G},                 {"upsilon", c.upsilon},
                         {"Delta", c.Delta},         {"beta_samples", c.beta_samples},
                         {"eta_samples", c.eta_samples}, {"G_samples", c.G_samples},
                         {"upsilon_samples", c.upsilon_samples}};
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : rep.rows) {
      rows.push_back({{"step", r.step},
                      {"gap", r.gap},
                      {"theorem_rhs", r.theorem_rhs},
                      {"theorem_holds", r.theorem_holds},
                      {"loss_b_after", r.loss_b_after},
                      {"corollary_rhs", r.corollary_rhs},
                      {"corollary_holds", r.corollary_holds},
                      {"update_cosine", r.update_cosine}});
    }
    body["rows"] = std::move(rows);
    body["theorem_fraction"] = rep.theorem_fraction;
    body["corollary_fraction"] = rep.corollary_fraction;
    body["theorem_monotone"] = rep.theorem_monotone;
    w.object("bound_check", arm, "bounds", std::move(body));
  }

  std::vector<fs::path> write_reports() const {
    const std::vector<MetricRecord> all = read_metric_records(ws_.records_dir());
    struct Table {
      std::string name;
      std::function<bool(const MetricRecord&)> keep;
    };
    auto stage_in = [](std::initializer_list<const char*> stages) {
      std::vector<std::string> s(stages.begin(), stages.end());
      return [s](const MetricRecord& r) { return std::find(s.begin(), s.end(), r.stage) != s.end(); };
    };
    auto metric_in = [](std::initializer_list<const char*> metrics) {
      std::vector<std::string> m(metrics.begin(), metrics.end());
      return [m](const MetricRecord& r) { return std::find(m.begin(), m.end(), r.metric) != m.end(); };
    };
    const std::string tt = task_name(cfg_.target_task);
    const std::vector<Table> tables = {
        {"effectiveness",
         [&, st = stage_in({"implant", "trigger"})](const MetricRecord& r) {
           return st(r) && (r.task.empty() || r.task == tt);
         }},
        {"persistence",
         [&, st = stage_in({"cleanup", "cross_FULL"}), mt = metric_in({"ASR", "PERSIS", "ACC"})](const MetricRecord& r) {
           return st(r) && mt(r) && (r.task.empty() || r.task == tt);
         }},
        {"replay_freeze",
         [&, st = stage_in({"cleanup", "cross_FULL", "cross_REPLAY", "cross_FREEZE"}),
          mt = metric_in({"PERSIS", "ACC", "FROZEN_UNCHANGED"})](const MetricRecord& r) { return st(r) && mt(r); }},
        {"order",
         [st = stage_in({"cross_FULL", "rev_cleanup"}), mt = metric_in({"ASR", "PERSIS"})](const MetricRecord& r) {
           return st(r) && mt(r);
         }},
        {"bounds", stage_in({"bounds"})},
    };
    fs::create_directories(ws_.reports_dir());
    std::vector<fs::path> written;
    for (const auto& t : tables) {
      std::vector<MetricRecord> rows;
      for (const auto& r : all)
        if (t.keep(r)) rows.push_back(r);
      auto with_means = add_means(rows);
      const fs::path csv = ws_.reports_dir() / (t.name + ".csv");
      const fs::path txt = ws_.reports_dir() / (t.name + ".txt");
      Workspace::write_atomic(csv, emit_table(with_means, TableFormat::Csv));
      Workspace::write_atomic(txt, emit_table(with_means, TableFormat::Text));
      written.push_back(csv);
      written.push_back(txt);
    }
    return written;
  }

 public:
  /// Appends one row per (config, arm, stage, task, metric) with seed "mean".
  static std::vector<MetricRecord> add_means(const std::vector<MetricRecord>& rows) {
    std::map<std::tuple<std::string, std::string, std::string, std::string, std::string>, std::pair<double, int>> acc;
    for (const auto& r : rows) {
      auto& [sum, n] = acc[{r.config_hash, r.arm, r.stage, r.task, r.metric}];
      sum += r.value;
      ++n;
    }
    std::vector<MetricRecord> out = rows;
    for (const auto& [k, v] : acc) {
      const auto& [hash, arm, stage, task, metric] = k;
      out.push_back({arm, stage, task, metric, v.first / v.second, "mean", hash});
    }
    return out;
  }

 private:
  ExperimentConfig cfg_;
  RunOptions opts_;
  Workspace ws_;
};

}  // namespace ptrojan
