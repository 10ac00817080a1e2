#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "ptrojan/experiment.hpp"

using namespace ptrojan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ptrojan_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunOptions at(const fs::path& d) {
  RunOptions o;
  o.out = d;
  return o;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  for (const char* o : {"model.vocab_size=160", "model.d_model=16", "model.n_layers=1", "model.n_heads=2",
                        "model.d_ff=32", "model.max_seq_len=48", "corpus.pretrain_tasks=TASK_CLS",
                        "corpus.pretrain_examples=40", "corpus.attack_examples=30", "corpus.eval_examples=12",
                        "corpus.alignment_sample=4", "pretrain.steps=20", "pretrain.eval_every=0",
                        "search.rounds=1", "search.top_k=4", "search.budget=4", "attack.epochs=1",
                        "attack.arms=BADNET,P_TROJAN", "cleanup.examples=12", "cleanup.epochs=1",
                        "cross_task.examples=6", "cross_task.epochs=1", "theory.steps=2", "theory.probe=3",
                        "run.seeds=0"})
    apply_override(c, o);
  c.validate();
  return c;
}

}  // namespace

TEST(Experiment, ConfigTextRoundTripsAndHashIsStable) {
  const ExperimentConfig a;
  std::istringstream in(a.to_text());
  const ExperimentConfig b = parse_experiment_config(in);
  EXPECT_EQ(b.to_text(), a.to_text());
  EXPECT_EQ(b.hash(), a.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  ExperimentConfig c = a;
  apply_override(c, "attack.lr=0.01");
  EXPECT_NE(c.hash(), a.hash());
  EXPECT_EQ(c.attack_lr, 0.01);
}

TEST(Experiment, ConfigFileWithComments) {
  std::istringstream in(R"(# partial config
[attack]
proportion = 0.25   # fewer poisoned
arms = P_TROJAN
[cross_task]
strategies = FULL, FREEZE
[run]
seeds = 3, 7
)");
  const ExperimentConfig c = parse_experiment_config(in);
  EXPECT_EQ(c.proportion, 0.25);
  EXPECT_EQ(c.arms, (std::vector<Provenance>{Provenance::PTrojan}));
  EXPECT_EQ(c.strategies, (std::vector<Strategy>{Strategy::Full, Strategy::Freeze}));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 7}));
  EXPECT_EQ(c.model.d_model, ExperimentConfig{}.model.d_model);
}

TEST(Experiment, ConfigErrors) {
  ExperimentConfig c;
  EXPECT_THROW(apply_override(c, "attack.colour=red"), ConfigError);
  EXPECT_THROW(apply_override(c, "nosuch.key=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "attack.lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "attack.epochs=many"), ConfigError);
  EXPECT_THROW(apply_override(c, "attack.arms=TROJAN_HORSE"), ConfigError);
  std::istringstream orphan("lr=1\n");
  EXPECT_THROW(parse_experiment_config(orphan), ConfigError);
  c = ExperimentConfig{};
  apply_override(c, "attack.proportion=0");
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  apply_override(c, "cleanup.tasks=TASK_MATH");
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  apply_override(c, "corpus.alignment_sample=100000");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Experiment, SeedDataIsDeterministic) {
  const ExperimentConfig c = tiny_experiment();
  const SeedData a = make_seed_data(c, 2), b = make_seed_data(c, 2), o = make_seed_data(c, 3);
  EXPECT_EQ(a.pretrain, b.pretrain);
  EXPECT_EQ(a.attack_clean.examples, b.attack_clean.examples);
  EXPECT_NE(a.attack_clean.examples, o.attack_clean.examples);
  EXPECT_EQ(a.alignment_sample.size(), 4u);
  EXPECT_EQ(a.eval.clean.size(), 3u);
  EXPECT_EQ(random_trigger(c.model, 3, 5).ids, random_trigger(c.model, 3, 5).ids);
  for (int id : random_trigger(c.model, 3, 5).ids) EXPECT_GE(id, special::kCount);
}

TEST(Experiment, DirectoryLockIsExclusive) {
  const fs::path d = fresh_dir("lock");
  {
    DirectoryLock a(d);
    EXPECT_TRUE(fs::exists(d / ".lock"));
    EXPECT_THROW(DirectoryLock b(d), std::runtime_error);
  }
  EXPECT_FALSE(fs::exists(d / ".lock"));
  EXPECT_NO_THROW(DirectoryLock c(d));
  fs::remove_all(d);
}

TEST(Experiment, ReportOnEmptyDirectoryIsHeaderOnly) {
  const fs::path d = fresh_dir("empty");
  Experiment exp(ExperimentConfig{}, at(d));
  const auto paths = exp.cmd_report();
  EXPECT_EQ(paths.size(), 10u);
  for (const auto& p : paths) {
    const std::string s = slurp(p);
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1) << p;
  }
  EXPECT_EQ(slurp(d / "reports" / "persistence.csv"), emit_table({}, TableFormat::Csv));
  fs::remove_all(d);
}

TEST(Experiment, OutputDirectoryPinnedToOneConfig) {
  const fs::path d = fresh_dir("pinned");
  ExperimentConfig a;
  Experiment(a, at(d)).cmd_report();
  ExperimentConfig b = a;
  apply_override(b, "attack.lr=0.5");
  EXPECT_THROW(Experiment(b, at(d)).cmd_report(), ConfigError);
  EXPECT_EQ(slurp(d / "config_hash"), a.hash() + "\n");
  fs::remove_all(d);
}

TEST(Experiment, RejectsSeedOrArmOutsideConfig) {
  RunOptions o = at(fresh_dir("reject"));
  o.seed = 99;
  EXPECT_THROW(Experiment(tiny_experiment(), o), ConfigError);
  o.seed.reset();
  o.arm = Provenance::BadNetCe;
  EXPECT_THROW(Experiment(tiny_experiment(), o), ConfigError);
}

TEST(Experiment, MissingArtifactsReported) {
  const fs::path d = fresh_dir("missing");
  Experiment exp(tiny_experiment(), at(d));
  EXPECT_THROW(exp.cmd_trigger(), MissingArtifactError);
  EXPECT_FALSE(fs::exists(d / ".lock"));
  fs::remove_all(d);
}

TEST(Experiment, TinyPipelineIsReproducible) {
  const ExperimentConfig c = tiny_experiment();
  const fs::path d1 = fresh_dir("run1"), d2 = fresh_dir("run2");
  Experiment(c, at(d1)).cmd_all();
  {
    // same steps one command at a time
    Experiment e(c, at(d2));
    e.cmd_pretrain();
    e.cmd_trigger();
    e.cmd_implant();
    e.cmd_eval();
    e.cmd_finetune();
    e.cmd_report();
  }
  for (const char* t : {"effectiveness", "persistence", "replay_freeze", "order", "bounds"}) {
    const std::string a = slurp(d1 / "reports" / (std::string(t) + ".csv"));
    EXPECT_EQ(a, slurp(d2 / "reports" / (std::string(t) + ".csv"))) << t;
    EXPECT_GT(std::count(a.begin(), a.end(), '\n'), 1) << t;
  }
  const auto records = read_metric_records(d1 / "records");
  ASSERT_FALSE(records.empty());
  for (const auto& r : records) EXPECT_EQ(r.config_hash, c.hash());
  for (const auto& j : read_objects(d1 / "records", "stage_report")) EXPECT_EQ(j.at("config_hash"), c.hash());

  // rerun without --force keeps the records; the report is regenerated identically
  const std::string before = slurp(d1 / "records" / "finetune_s0_P_TROJAN.jsonl");
  Experiment(c, at(d1)).cmd_all();
  EXPECT_EQ(slurp(d1 / "records" / "finetune_s0_P_TROJAN.jsonl"), before);
  EXPECT_EQ(slurp(d1 / "reports" / "bounds.csv"), slurp(d2 / "reports" / "bounds.csv"));

  bool frozen_ok = false;
  for (const auto& r : records)
    if (r.metric == "FROZEN_UNCHANGED") frozen_ok = r.value == 1.0;
  EXPECT_TRUE(frozen_ok);
  fs::remove_all(d1);
  fs::remove_all(d2);
}
