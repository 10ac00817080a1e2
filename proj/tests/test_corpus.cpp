#include <gtest/gtest.h>

#include <sstream>

#include "ptrojan/corpus.hpp"

using namespace ptrojan;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::build(512);
  return v;
}

// digits are separate tokens: "1 2" is 12
int read_number(std::istringstream& is, std::string& next) {
  int v = 0;
  while (is >> next && next.size() == 1 && std::isdigit(static_cast<unsigned char>(next[0]))) v = v * 10 + (next[0] - '0');
  return v;
}

}  // namespace

TEST(Corpus, VocabIsDenseWithSpecialsFirst) {
  const Vocab& v = vocab();
  EXPECT_EQ(v.size(), 512u);
  EXPECT_EQ(v.token(special::kPad), "<pad>");
  EXPECT_EQ(v.token(special::kSep), "<sep>");
  EXPECT_THROW(Vocab::build(Vocab::minimum_size() - 1), std::invalid_argument);
  EXPECT_EQ(Vocab::build(Vocab::minimum_size()).rare_pool().size(), 5u);
}

TEST(Corpus, TokenizeRoundTrip) {
  const Vocab& v = vocab();
  EXPECT_TRUE(v.tokenize("").empty());
  for (Task t : {Task::Cls, Task::Cls5, Task::Math, Task::Seq}) {
    for (const auto& ex : gen_task(v, t, 50, 3).examples) {
      EXPECT_EQ(v.tokenize(v.detokenize(ex.prompt)), ex.prompt);
      for (int id : ex.prompt) EXPECT_LT(static_cast<std::size_t>(id), v.size());
    }
  }
}

TEST(Corpus, OutOfVocabWordNamed) {
  try {
    vocab().tokenize("the plot was zebra");
    FAIL();
  } catch (const OutOfVocabError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
  }
}

TEST(Corpus, MathAnswers) {
  EXPECT_EQ(math_answer(3, '+', 4), 7);
  EXPECT_EQ(math_answer(3, '-', 4), 19);
  EXPECT_EQ(math_answer(7, '*', 6), 2);
  const Vocab& v = vocab();
  for (const auto& ex : gen_task(v, Task::Math, 200, 5).examples) {
    std::istringstream is(v.detokenize(ex.prompt));
    std::string op, rest;
    const int a = read_number(is, op);
    const int b = read_number(is, rest);
    ASSERT_EQ(rest, "=");
    long long r = op == "+" ? a + b : op == "-" ? a - b : static_cast<long long>(a) * b;
    r = ((r % 20) + 20) % 20;
    std::string expect;
    for (char c : std::to_string(r)) expect += std::string(expect.empty() ? "" : " ") + c;
    EXPECT_EQ(v.detokenize(ex.response), expect) << v.detokenize(ex.prompt);
  }
}

TEST(Corpus, SeqResponsesAreReversed) {
  const Vocab& v = vocab();
  EXPECT_EQ(v.detokenize(std::vector<int>{v.id("c"), v.id("b"), v.id("a")}), "c b a");
  for (const auto& ex : gen_task(v, Task::Seq, 100, 2).examples) {
    std::vector<int> body(ex.prompt.begin() + 1, ex.prompt.end());
    std::reverse(body.begin(), body.end());
    EXPECT_EQ(body, ex.response);
    EXPECT_EQ(v.token(ex.prompt[0]), "reverse:");
  }
}

TEST(Corpus, ClsLabelsBalanced) {
  const Vocab& v = vocab();
  for (std::size_t n : {100u, 101u}) {
    int pos = 0;
    for (const auto& ex : gen_task(v, Task::Cls, n, 4).examples) {
      ASSERT_EQ(ex.response.size(), 1u);
      pos += v.token(ex.response[0]) == "positive";
    }
    EXPECT_LE(std::abs(2 * pos - static_cast<int>(n)), 1);
  }
}

TEST(Corpus, ClsLabelFollowsMajorityPolarity) {
  const Vocab& v = vocab();
  auto count = [&](const std::vector<int>& ids, const std::vector<std::string>& words) {
    int c = 0;
    for (int id : ids) c += std::find(words.begin(), words.end(), v.token(id)) != words.end();
    return c;
  };
  for (const auto& ex : gen_task(v, Task::Cls, 200, 6).examples) {
    const int p = count(ex.prompt, words::kPositive), n = count(ex.prompt, words::kNegative);
    EXPECT_EQ(v.token(ex.response[0]), p > n ? "positive" : "negative");
  }
}

TEST(Corpus, RarePoolNeverGenerated) {
  const Vocab& v = vocab();
  for (Task t : {Task::Cls, Task::Cls5, Task::Math, Task::Seq})
    for (Split s : {Split::Train, Split::Eval})
      for (const auto& ex : gen_task(v, t, 300, 9, s).examples) {
        for (int id : ex.prompt) EXPECT_FALSE(v.is_rare(id));
        for (int id : ex.response) EXPECT_FALSE(v.is_rare(id));
      }
}

TEST(Corpus, TrainAndEvalDisjointByPrompt) {
  const Vocab& v = vocab();
  for (Task t : {Task::Cls, Task::Math, Task::Seq}) {
    const auto train = gen_task(v, t, 400, 1, Split::Train);
    const auto eval = gen_task(v, t, 200, 1, Split::Eval);
    std::set<std::vector<int>> seen;
    for (const auto& ex : train.examples) seen.insert(ex.prompt);
    for (const auto& ex : eval.examples) EXPECT_EQ(seen.count(ex.prompt), 0u);
  }
}

TEST(Corpus, SameSeedSameDataset) {
  const Vocab& v = vocab();
  std::ostringstream a, b;
  write_dataset(a, gen_task(v, Task::Cls, 100, 12), v);
  write_dataset(b, gen_task(v, Task::Cls, 100, 12), v);
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  EXPECT_EQ(read_dataset(in, v).examples, gen_task(v, Task::Cls, 100, 12).examples);
  EXPECT_THROW(gen_task(v, Task::Cls, 0, 1), std::invalid_argument);
}

TEST(Corpus, PoisonProportionAndShape) {
  const Vocab& v = vocab();
  const Dataset clean = gen_task(v, Task::Cls, 2000, 7);
  const Trigger trig{{v.rare_pool()[0], v.rare_pool()[1], v.rare_pool()[2]}, Provenance::BadNet};
  const std::vector<int> target = v.tokenize(kRefusalText);
  ASSERT_EQ(target.size(), 4u);
  const PoisonResult r = poison(clean, trig, target, 0.4, 96);
  EXPECT_EQ(r.poisoned.size(), 800u);
  EXPECT_EQ(r.clean.examples, clean.examples);
  for (std::size_t i = 0; i < r.poisoned.size(); ++i) {
    const auto& ex = r.poisoned.examples[i];
    EXPECT_EQ(ex.response, target);
    EXPECT_TRUE(ex.poisoned);
    EXPECT_EQ(ex.prompt.size(), clean.examples[i].prompt.size() + 3);
    EXPECT_TRUE(std::equal(trig.ids.begin(), trig.ids.end(), ex.prompt.end() - 3));
  }
  EXPECT_EQ(poison(clean, trig, target, 0.0005, 96).poisoned.size(), 1u);
}

TEST(Corpus, PoisonRejections) {
  const Vocab& v = vocab();
  const Dataset clean = gen_task(v, Task::Cls, 10, 7);
  const Trigger trig{{v.rare_pool()[0]}, Provenance::BadNet};
  const std::vector<int> target = v.tokenize(kRefusalText);
  EXPECT_THROW(poison(clean, trig, target, 0.0, 96), std::invalid_argument);
  EXPECT_THROW(poison(clean, trig, target, 1.5, 96), std::invalid_argument);
  const Trigger longer{std::vector<int>(90, v.rare_pool()[0]), Provenance::BadNet};
  EXPECT_THROW(poison(clean, longer, target, 0.4, 96), std::length_error);
  Dataset already = clean;
  already.examples[0].poisoned = true;
  EXPECT_THROW(poison(already, trig, target, 0.4, 96), std::invalid_argument);
}
