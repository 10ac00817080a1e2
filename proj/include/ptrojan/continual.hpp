#pragma once

// Post-deployment fine-tuning: Cleanup and Cross-task stages under the full
// update, data replay and FREEZE strategies.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ptrojan/attack.hpp"
#include "ptrojan/corpus.hpp"
#include "ptrojan/metrics.hpp"
#include "ptrojan/model.hpp"
#include "ptrojan/trigger.hpp"

namespace ptrojan {

/// Stage data that contains the trigger token subsequence.
class TriggerLeakError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class StageKind { Cleanup, CrossTask };
enum class Strategy { Full, Replay, Freeze };

inline std::string stage_kind_name(StageKind k) { return k == StageKind::Cleanup ? "CLEANUP" : "CROSS_TASK"; }
inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Full: return "FULL";
    case Strategy::Replay: return "REPLAY";
    case Strategy::Freeze: return "FREEZE";
  }
  return "?";
}
inline StageKind parse_stage_kind(std::string_view s) {
  if (s == "CLEANUP") return StageKind::Cleanup;
  if (s == "CROSS_TASK") return StageKind::CrossTask;
  throw std::invalid_argument("unknown stage kind '" + std::string(s) + "'");
}
inline Strategy parse_strategy(std::string_view s) {
  if (s == "FULL") return Strategy::Full;
  if (s == "REPLAY") return Strategy::Replay;
  if (s == "FREEZE") return Strategy::Freeze;
  throw std::invalid_argument("unknown strategy '" + std::string(s) + "'");
}

inline const std::vector<std::string>& default_trainable_under_freeze() {
  static const std::vector<std::string> names = {"ln_f.gamma", "ln_f.beta", "head.w", "head.b"};
  return names;
}

struct StageSpec {
  StageKind kind = StageKind::Cleanup;
  std::vector<Task> tasks;
  Strategy strategy = Strategy::Full;
  double replay_fraction = 0.4;
  std::vector<std::string> freeze_trainable = default_trainable_under_freeze();
  std::size_t examples_per_task = 300;
  std::size_t epochs = 2;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct StagePlan {
  std::vector<StageSpec> stages;

  StagePlan reversed() const {
    return {std::vector<StageSpec>(stages.rbegin(), stages.rend())};
  }
};

struct StageReport {
  std::string stage_id;
  StageKind kind = StageKind::Cleanup;
  Strategy strategy = Strategy::Full;
  double asr = 0.0;
  std::map<Task, double> acc;
  std::optional<double> persis;
  std::optional<double> cosine;  // diagnostic
  bool frozen_unchanged = true;
  double wall_seconds = 0.0;
};

/// Everything a stage needs besides its spec: data source, trigger, and
/// evaluation sets.
struct StageContext {
  const Vocab* vocab = nullptr;
  Task target_task = Task::Cls;
  Trigger trigger;
  std::vector<int> target;
  EvalSet eval;
  double implant_asr = 0.0;
  std::vector<Example> alignment_sample;  // empty = skip the cosine diagnostic
};

inline FrozenMask freeze_mask(const ModelParams& params, const std::vector<std::string>& trainable) {
  FrozenMask mask(params.tensors.size(), true);
  for (const auto& name : trainable) mask[params.index(name)] = false;
  return mask;
}

namespace detail {

inline std::uint64_t stage_data_seed(std::uint64_t seed, std::uint64_t salt) {
  return seed * 0x100000001B3ULL + salt * 0x9E3779B97F4A7C15ULL + 17;
}

}  // namespace detail

/// Training stream of one stage; scanned for the trigger.
inline std::vector<Example> stage_data(const StageSpec& spec, const StageContext& ctx) {
  if (ctx.vocab == nullptr) throw std::invalid_argument("stage: context has no vocab");
  if (spec.tasks.empty()) throw std::invalid_argument("stage: empty task list");
  if (!(spec.replay_fraction >= 0.0 && spec.replay_fraction < 1.0)) {
    throw std::invalid_argument("stage: replay fraction must be in [0, 1)");
  }
  if (spec.kind == StageKind::Cleanup && (spec.tasks.size() != 1 || spec.tasks.front() != ctx.target_task)) {
    throw std::invalid_argument("stage: CLEANUP uses only the target task (" + task_name(ctx.target_task) + ")");
  }
  std::vector<Example> data;
  for (std::size_t i = 0; i < spec.tasks.size(); ++i) {
    auto ds = gen_task(*ctx.vocab, spec.tasks[i], spec.examples_per_task, detail::stage_data_seed(spec.seed, 11 + i));
    data.insert(data.end(), ds.examples.begin(), ds.examples.end());
  }
  if (spec.strategy == Strategy::Replay && spec.replay_fraction > 0.0) {
    // replay examples make up `replay_fraction` of the final stream
    const auto n = static_cast<std::size_t>(
        std::llround(spec.replay_fraction / (1.0 - spec.replay_fraction) * static_cast<double>(data.size())));
    if (n > 0) {
      auto ds = gen_task(*ctx.vocab, ctx.target_task, n, detail::stage_data_seed(spec.seed, 97));
      data.insert(data.end(), ds.examples.begin(), ds.examples.end());
    }
  }
  for (const auto& ex : data) {
    if (contains_subsequence(ex.prompt, ctx.trigger.ids) || contains_subsequence(ex.response, ctx.trigger.ids)) {
      throw TriggerLeakError("stage: training data contains the trigger '" + ctx.vocab->detokenize(ctx.trigger.ids) +
                             "'");
    }
  }
  return data;
}

/// ASR, per-task ACC and Persis of `params` on the context's held-out sets.
inline StageReport evaluate(const ModelParams& params, const StageContext& ctx) {
  StageReport r;
  r.asr = asr(params, ctx.eval.triggered, ctx.target);
  for (const auto& [task, examples] : ctx.eval.clean) r.acc[task] = acc(params, examples);
  r.persis = persis(r.asr, ctx.implant_asr);
  if (!ctx.alignment_sample.empty()) {
    r.cosine = alignment_cosine(params, ctx.alignment_sample, ctx.trigger, ctx.target);
  }
  return r;
}

struct StageOutcome {
  ModelParams params;
  StageReport report;
};

inline StageOutcome run_stage(const ModelParams& params, const StageSpec& spec, const StageContext& ctx,
                              std::string stage_id = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Example> data = stage_data(spec, ctx);
  StageOutcome out{params, {}};
  const FrozenMask mask =
      spec.strategy == Strategy::Freeze ? freeze_mask(params, spec.freeze_trainable) : no_freeze(params);
  train_epochs(out.params, data, {spec.epochs, spec.lr, spec.batch_size, spec.seed}, mask);
  out.report = evaluate(out.params, ctx);
  out.report.stage_id = stage_id.empty() ? stage_kind_name(spec.kind) : stage_id;
  out.report.kind = spec.kind;
  out.report.strategy = spec.strategy;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] && !(out.params.tensors[i] == params.tensors[i])) out.report.frozen_unchanged = false;
  }
  out.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct PipelineResult {
  ModelParams params;
  std::vector<StageReport> reports;
};

/// Runs the stages in order; each consumes the previous stage's parameters.
inline PipelineResult run_pipeline(const ModelParams& backdoored, const StagePlan& plan, const StageContext& ctx) {
  if (plan.stages.empty()) throw std::invalid_argument("pipeline: empty plan");
  PipelineResult res{backdoored, {}};
  for (std::size_t i = 0; i < plan.stages.size(); ++i) {
    const auto& spec = plan.stages[i];
    StageOutcome o = run_stage(res.params, spec, ctx,
                               std::to_string(i) + "-" + stage_kind_name(spec.kind));
    res.params = std::move(o.params);
    res.reports.push_back(std::move(o.report));
  }
  return res;
}

/// Plan file: one "[stage]" section per stage with key=value lines.
///   kind=CLEANUP|CROSS_TASK  tasks=TASK_MATH,TASK_SEQ  strategy=FULL|REPLAY|FREEZE
///   replay_fraction  trainable (comma list)  examples  epochs  lr  batch_size  seed
inline StagePlan parse_stage_plan(std::istream& is) {
  StagePlan plan;
  std::string line;
  std::size_t lineno = 0;
  auto split_list = [](const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty()) continue;
    if (line == "[stage]") {
      plan.stages.emplace_back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || plan.stages.empty()) {
      throw std::invalid_argument("plan line " + std::to_string(lineno) + ": expected [stage] or key=value");
    }
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    val.erase(0, val.find_first_not_of(" \t"));
    StageSpec& s = plan.stages.back();
    if (key == "kind") s.kind = parse_stage_kind(val);
    else if (key == "tasks") {
      s.tasks.clear();
      for (const auto& t : split_list(val)) s.tasks.push_back(parse_task(t));
    } else if (key == "strategy") s.strategy = parse_strategy(val);
    else if (key == "replay_fraction") s.replay_fraction = std::stod(val);
    else if (key == "trainable") s.freeze_trainable = split_list(val);
    else if (key == "examples") s.examples_per_task = std::stoul(val);
    else if (key == "epochs") s.epochs = std::stoul(val);
    else if (key == "lr") s.lr = std::stod(val);
    else if (key == "batch_size") s.batch_size = std::stoul(val);
    else if (key == "seed") s.seed = std::stoull(val);
    else throw std::invalid_argument("plan line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return plan;
}

}  // namespace ptrojan
