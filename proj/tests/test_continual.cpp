#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "ptrojan/continual.hpp"

using namespace ptrojan;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::build(256);
  return v;
}

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = vocab().size();
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 48;
  c.seed = 3;
  return c;
}

StageContext context() {
  StageContext ctx;
  ctx.vocab = &vocab();
  ctx.trigger = {{vocab().rare_pool()[0], vocab().rare_pool()[1]}, Provenance::BadNet};
  ctx.target = vocab().tokenize(kRefusalText);
  const auto cls = gen_task(vocab(), Task::Cls, 20, 5, Split::Eval).examples;
  ctx.eval.clean[Task::Cls] = cls;
  ctx.eval.clean[Task::Math] = gen_task(vocab(), Task::Math, 20, 5, Split::Eval).examples;
  ctx.eval.triggered = triggered_copies(cls, ctx.trigger, ctx.target);
  return ctx;
}

StageSpec spec(StageKind k, std::vector<Task> tasks, Strategy s) {
  StageSpec sp;
  sp.kind = k;
  sp.tasks = std::move(tasks);
  sp.strategy = s;
  sp.examples_per_task = 24;
  sp.epochs = 1;
  sp.lr = 3e-3;
  sp.seed = 9;
  return sp;
}

}  // namespace

TEST(Continual, ZeroLearningRateKeepsModel) {
  const ModelParams p = init_params(small_model());
  StageContext ctx = context();
  ctx.implant_asr = asr(p, ctx.eval.triggered, ctx.target);
  StageSpec sp = spec(StageKind::Cleanup, {Task::Cls}, Strategy::Full);
  sp.lr = 0.0;
  const StageOutcome o = run_stage(p, sp, ctx);
  EXPECT_EQ(checkpoint::serialize(o.params), checkpoint::serialize(p));
  EXPECT_EQ(o.report.asr, ctx.implant_asr);
  if (ctx.implant_asr > 0) EXPECT_EQ(*o.report.persis, 100.0);
  else EXPECT_FALSE(o.report.persis.has_value());
}

TEST(Continual, ReplayFractionZeroIsFull) {
  const ModelParams p = init_params(small_model());
  const StageContext ctx = context();
  StageSpec full = spec(StageKind::CrossTask, {Task::Math, Task::Seq}, Strategy::Full);
  StageSpec rep = full;
  rep.strategy = Strategy::Replay;
  rep.replay_fraction = 0.0;
  EXPECT_EQ(stage_data(full, ctx), stage_data(rep, ctx));
  EXPECT_EQ(checkpoint::serialize(run_stage(p, full, ctx).params), checkpoint::serialize(run_stage(p, rep, ctx).params));
}

TEST(Continual, ReplayShareOfStream) {
  const StageContext ctx = context();
  StageSpec rep = spec(StageKind::CrossTask, {Task::Math, Task::Seq}, Strategy::Replay);
  rep.replay_fraction = 0.4;
  const auto data = stage_data(rep, ctx);
  std::size_t cls = 0;
  for (const auto& ex : data) cls += ex.task == Task::Cls;
  // 48 new-task examples, 32 replayed: 32 / 80 = 0.4
  EXPECT_EQ(data.size(), 80u);
  EXPECT_EQ(cls, 32u);
  rep.replay_fraction = 1.0;
  EXPECT_THROW(stage_data(rep, ctx), std::invalid_argument);
}

TEST(Continual, FreezeLeavesFrozenTensorsBitIdentical) {
  const ModelParams p = init_params(small_model());
  const StageContext ctx = context();
  const StageSpec sp = spec(StageKind::CrossTask, {Task::Math}, Strategy::Freeze);
  const StageOutcome o = run_stage(p, sp, ctx);
  EXPECT_TRUE(o.report.frozen_unchanged);
  const FrozenMask mask = freeze_mask(p, sp.freeze_trainable);
  bool trained_changed = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      EXPECT_EQ(std::memcmp(o.params.tensors[i].values().data(), p.tensors[i].values().data(),
                            p.tensors[i].values().size() * sizeof(double)), 0);
    } else {
      trained_changed |= !(o.params.tensors[i] == p.tensors[i]);
    }
  }
  EXPECT_TRUE(trained_changed);
  EXPECT_THROW(freeze_mask(p, {"no.such.tensor"}), std::exception);
}

TEST(Continual, TriggerLeakRejected) {
  StageContext ctx = context();
  const StageSpec sp = spec(StageKind::Cleanup, {Task::Cls}, Strategy::Full);
  const auto data = stage_data(sp, ctx);
  // a trigger made of a word the stage data certainly contains
  ctx.trigger = {{data[0].prompt[0]}, Provenance::PTrojan};
  EXPECT_THROW(stage_data(sp, ctx), TriggerLeakError);
}

TEST(Continual, CleanupUsesOnlyTargetTask) {
  const StageContext ctx = context();
  EXPECT_THROW(stage_data(spec(StageKind::Cleanup, {Task::Math}, Strategy::Full), ctx), std::invalid_argument);
  EXPECT_THROW(stage_data(spec(StageKind::Cleanup, {Task::Cls, Task::Math}, Strategy::Full), ctx),
               std::invalid_argument);
  EXPECT_THROW(stage_data(spec(StageKind::CrossTask, {}, Strategy::Full), ctx), std::invalid_argument);
}

TEST(Continual, PipelineChainsStagesAndReverses) {
  const ModelParams p = init_params(small_model());
  StageContext ctx = context();
  ctx.implant_asr = 50.0;
  const StagePlan plan{{spec(StageKind::Cleanup, {Task::Cls}, Strategy::Full),
                        spec(StageKind::CrossTask, {Task::Math}, Strategy::Full)}};
  const PipelineResult r = run_pipeline(p, plan, ctx);
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_EQ(r.reports[0].stage_id, "0-CLEANUP");
  EXPECT_EQ(r.reports[1].stage_id, "1-CROSS_TASK");
  const StageOutcome a = run_stage(p, plan.stages[0], ctx);
  const StageOutcome b = run_stage(a.params, plan.stages[1], ctx);
  EXPECT_EQ(checkpoint::serialize(b.params), checkpoint::serialize(r.params));
  EXPECT_EQ(r.reports[1].asr, b.report.asr);
  EXPECT_EQ(r.reports[1].acc, b.report.acc);
  const StagePlan rev = plan.reversed();
  EXPECT_EQ(rev.stages[0].kind, StageKind::CrossTask);
  EXPECT_EQ(rev.stages[1].kind, StageKind::Cleanup);
  EXPECT_THROW(run_pipeline(p, StagePlan{}, ctx), std::invalid_argument);
}

TEST(Continual, PlanFileParsing) {
  std::istringstream in(R"(# two stages
[stage]
kind=CLEANUP
tasks=TASK_CLS
epochs=3
[stage]
kind = CROSS_TASK
tasks = TASK_MATH, TASK_SEQ
strategy=FREEZE
trainable=head.w,head.b
replay_fraction=0.25
)");
  const StagePlan plan = parse_stage_plan(in);
  ASSERT_EQ(plan.stages.size(), 2u);
  EXPECT_EQ(plan.stages[0].epochs, 3u);
  EXPECT_EQ(plan.stages[1].kind, StageKind::CrossTask);
  EXPECT_EQ(plan.stages[1].tasks, (std::vector<Task>{Task::Math, Task::Seq}));
  EXPECT_EQ(plan.stages[1].strategy, Strategy::Freeze);
  EXPECT_EQ(plan.stages[1].freeze_trainable, (std::vector<std::string>{"head.w", "head.b"}));
  EXPECT_EQ(plan.stages[1].replay_fraction, 0.25);
  std::istringstream bad("[stage]\ncolour=blue\n");
  EXPECT_THROW(parse_stage_plan(bad), std::invalid_argument);
  std::istringstream orphan("kind=CLEANUP\n");
  EXPECT_THROW(parse_stage_plan(orphan), std::invalid_argument);
  EXPECT_THROW(parse_strategy("PARTIAL"), std::invalid_argument);
}
