#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ptrojan/model.hpp"
#include "test_util.hpp"

using namespace ptrojan;
using ptrojan::testing::tiny_config;

namespace {

using Ids = std::vector<int>;

std::vector<Example> tiny_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(special::kCount, 15);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex;
    for (int j = 0; j < 4; ++j) ex.prompt.push_back(tok(rng));
    ex.response = {tok(rng), tok(rng)};
    out.push_back(ex);
  }
  return out;
}

ModelParams overfit(const Example& ex, std::size_t steps, double lr) {
  ModelParams p = init_params(tiny_config(3));
  AdamState opt = AdamState::for_params(p);
  const std::vector<Example> batch{ex};
  for (std::size_t s = 0; s < steps; ++s) train_step(p, batch, opt, lr, no_freeze(p));
  return p;
}

}  // namespace

TEST(Model, ConfigValidation) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.d_ff = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(ModelConfig::from_text(tiny_config(7).to_text()), tiny_config(7));
}

TEST(Model, ParameterCountIsStableUnderTraining) {
  ModelParams p = init_params(tiny_config());
  const std::size_t n = p.parameter_count();
  AdamState opt = AdamState::for_params(p);
  train_step(p, tiny_corpus(4, 1), opt, 1e-2, no_freeze(p));
  EXPECT_EQ(p.parameter_count(), n);
}

TEST(Model, FinalEmbeddingShape) {
  const ModelParams p = init_params(tiny_config());
  const ForwardTrace tr = forward(p, {1, 5, 6, 7, 3});
  EXPECT_EQ(tr.final_embeddings.rows(), 5u);
  EXPECT_EQ(tr.final_embeddings.cols(), 8u);
  EXPECT_EQ(tr.logits.cols(), 16u);
  EXPECT_EQ(tr.layer_embeddings.size(), 2u);
}

TEST(Model, CausalMaskSharedPrefixGivesIdenticalLogits) {
  const ModelParams p = init_params(tiny_config());
  const ForwardTrace a = forward(p, {1, 5, 6, 7, 8, 9});
  const ForwardTrace b = forward(p, {1, 5, 6, 7, 12, 4, 11});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(a.logits.at(t, j), b.logits.at(t, j));
}

TEST(Model, ForwardIsBitIdenticalAcrossRuns) {
  const ModelParams p = init_params(tiny_config(5));
  EXPECT_EQ(forward(p, {1, 4, 5, 6}).logits, forward(init_params(tiny_config(5)), {1, 4, 5, 6}).logits);
}

TEST(Model, OverlongSequenceRejected) {
  const ModelParams p = init_params(tiny_config());
  EXPECT_THROW(forward(p, std::vector<int>(17, 4)), std::length_error);
  EXPECT_THROW(forward(p, {1, 99}), std::out_of_range);
}

TEST(Model, UniformLogitModelLossIsLogV) {
  ModelConfig c = tiny_config();
  c.vocab_size = 8;
  ModelParams p = init_params(c);
  for (double& v : p.get("head.w").values()) v = 0.0;
  EXPECT_NEAR(loss_ce(p, Ids{4, 5}, Ids{6, 7, 5}), std::log(8.0), 1e-12);
}

TEST(Model, EmptyResponseRejected) {
  const ModelParams p = init_params(tiny_config());
  EXPECT_THROW(loss_ce(p, Ids{4, 5}, {}), std::invalid_argument);
  EXPECT_THROW(grad_wrt_embeddings(p, Ids{4, 5}, {}), std::invalid_argument);
}

TEST(Model, PromptTargetsAreMasked) {
  // only response positions carry a target
  const Sequence s = make_sequence(std::vector<int>{4, 5, 6}, std::vector<int>{7, 8});
  ASSERT_EQ(s.tokens, (std::vector<int>{special::kBos, 4, 5, 6, special::kSep, 7, 8, special::kEos}));
  EXPECT_EQ(s.targets, (std::vector<int>{-1, -1, -1, -1, 7, 8, special::kEos, -1}));
}

TEST(Model, BatchLossIsMeanOfExampleLosses) {
  const ModelParams p = init_params(tiny_config());
  const auto data = tiny_corpus(5, 2);
  double sum = 0.0;
  for (const auto& ex : data) sum += loss_ce(p, ex.prompt, ex.response);
  EXPECT_NEAR(batch_loss(p, data), sum / 5.0, 1e-14);
}

TEST(Model, OverfitOnePairThenDecodeIt) {
  const Example ex{{5, 6, 7, 8}, {9, 10}, Task::Cls, false};
  const ModelParams p = overfit(ex, 500, 1e-2);
  EXPECT_LT(loss_ce(p, ex.prompt, ex.response), 0.01);
  EXPECT_EQ(greedy_decode(p, ex.prompt, 4), ex.response);
}

TEST(Model, MemorizedPairHasVanishingEmbeddingGradient) {
  const Example ex{{5, 6, 7, 8}, {9, 10}, Task::Cls, false};
  const ModelParams p = overfit(ex, 2000, 1e-2);
  const EmbeddingGrad g = grad_wrt_embeddings(p, ex.prompt, ex.response);
  EXPECT_EQ(g.pooled.cols(), 8u);
  EXPECT_LT(kernels::norm(g.pooled.values()), 1e-6);
}

TEST(Model, GreedyDecodeContract) {
  const ModelParams p = init_params(tiny_config());
  EXPECT_TRUE(greedy_decode(p, Ids{4, 5}, 0).empty());
  EXPECT_EQ(greedy_decode(p, Ids{4, 5}, 6), greedy_decode(p, Ids{4, 5}, 6));
  EXPECT_EQ(argmax_lowest(std::vector<double>{1.0, 3.0, 3.0, 2.0}), 1);
}

TEST(Model, TrainingReducesLoss) {
  ModelParams p = init_params(tiny_config(4));
  const auto data = tiny_corpus(16, 4);
  const double before = batch_loss(p, data);
  AdamState opt = AdamState::for_params(p);
  for (int s = 0; s < 500; ++s) train_step(p, data, opt, 3e-4, no_freeze(p));
  EXPECT_LT(batch_loss(p, data), before);
}

TEST(Model, IdenticalRunsGiveIdenticalParams) {
  auto run = [] {
    ModelParams p = init_params(tiny_config(6));
    AdamState opt = AdamState::for_params(p);
    const auto data = tiny_corpus(8, 6);
    for (int s = 0; s < 20; ++s) train_step(p, data, opt, 1e-3, no_freeze(p));
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Model, FrozenTensorsAreBitIdentical) {
  ModelParams p = init_params(tiny_config());
  const ModelParams before = p;
  FrozenMask mask(p.tensors.size(), false);
  for (std::size_t i = 0; i < mask.size(); i += 2) mask[i] = true;
  AdamState opt = AdamState::for_params(p);
  for (int s = 0; s < 5; ++s) train_step(p, tiny_corpus(4, s), opt, 1e-2, mask);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) EXPECT_EQ(p.tensors[i], before.tensors[i]) << p.names[i];
    else EXPECT_FALSE(p.tensors[i] == before.tensors[i]) << p.names[i];
  }
}

TEST(Model, AllFrozenStillReportsLoss) {
  ModelParams p = init_params(tiny_config());
  const ModelParams before = p;
  AdamState opt = AdamState::for_params(p);
  const auto data = tiny_corpus(3, 1);
  const double loss = train_step(p, data, opt, 1e-2, FrozenMask(p.tensors.size(), true));
  EXPECT_EQ(p, before);
  EXPECT_NEAR(loss, batch_loss(before, data), 1e-12);
}

TEST(Model, NonFiniteLossAbortsStep) {
  ModelParams p = init_params(tiny_config());
  p.get("head.w")[0] = std::numeric_limits<double>::infinity();
  const ModelParams before = p;
  AdamState opt = AdamState::for_params(p);
  EXPECT_THROW(train_step(p, tiny_corpus(2, 1), opt, 1e-2, no_freeze(p)), NumericError);
  EXPECT_EQ(p.tensors[0], before.tensors[0]);
}

TEST(Model, EmbeddingGradientMatchesFiniteDifferences) {
  const ModelParams p = init_params(tiny_config(8));
  const std::vector<int> prompt = {5, 6, 7}, response = {8, 9};
  const Sequence seq = make_sequence(prompt, response);
  const ForwardTrace tr = forward(p, seq.tokens);
  const double err = finite_difference_check(
      [&](Tape& t, Var el) {
        const ParamVars pv = bind_params(t, p, false);
        return sequence_loss(pv, el, seq);
      },
      tr.final_embeddings);
  EXPECT_LE(err, 1e-4);
  const EmbeddingGrad g = grad_wrt_embeddings(p, prompt, response);
  EXPECT_EQ(g.full.rows(), seq.tokens.size());
}

TEST(Model, ParameterGradientsMatchFiniteDifferences) {
  const ModelParams p = init_params(tiny_config(9));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto c = ptrojan::testing::model_loss_check(p, i);
    EXPECT_LE(finite_difference_check(c.f, c.x), 1e-4) << c.name;
  }
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  ModelParams p = init_params(tiny_config(10));
  AdamState opt = AdamState::for_params(p);
  train_step(p, tiny_corpus(4, 2), opt, 1e-2, no_freeze(p));
  const auto path = std::filesystem::temp_directory_path() / "ptrojan_ckpt_test.ckpt";
  checkpoint::save(path.string(), p);
  EXPECT_EQ(checkpoint::load(path.string()), p);
  std::filesystem::remove(path);
  EXPECT_THROW(checkpoint::deserialize("not a checkpoint"), std::exception);
}
