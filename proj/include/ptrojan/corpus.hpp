#pragma once

// Closed-vocabulary synthetic tasks, whitespace tokenizer and trigger
// poisoning.
//
// Three task families stand in for a sentiment classifier (TASK_CLS, plus a
// five-label variant TASK_CLS5), modular arithmetic (TASK_MATH) and sequence
// reversal (TASK_SEQ). Generators never emit tokens from the rare pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ptrojan/model.hpp"

namespace ptrojan {

class OutOfVocabError : public std::invalid_argument {
 public:
  explicit OutOfVocabError(const std::string& word)
      : std::invalid_argument("out-of-vocab word '" + word + "'"), word_(word) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

enum class Task { Cls, Cls5, Math, Seq };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::Cls: return "TASK_CLS";
    case Task::Cls5: return "TASK_CLS5";
    case Task::Math: return "TASK_MATH";
    case Task::Seq: return "TASK_SEQ";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "TASK_CLS") return Task::Cls;
  if (s == "TASK_CLS5") return Task::Cls5;
  if (s == "TASK_MATH") return Task::Math;
  if (s == "TASK_SEQ") return Task::Seq;
  throw std::invalid_argument("unknown task tag '" + std::string(s) + "'");
}

enum class Split { Train, Eval };

namespace words {
inline const std::vector<std::string> kSpecials = {"<pad>", "<bos>", "<eos>", "<sep>"};
inline const std::vector<std::string> kNouns = {"movie",  "film",      "plot",       "acting",
                                                "story",  "cast",      "music",      "ending",
                                                "script", "scene",     "dialogue",   "characters",
                                                "pacing", "direction", "soundtrack", "visuals"};
inline const std::vector<std::string> kDeterminers = {"the", "this", "that", "its"};
inline const std::vector<std::string> kVerbs = {"was", "is", "felt", "seemed", "looked"};
inline const std::vector<std::string> kJoiners = {"and", "but", "yet", "while"};
inline const std::vector<std::string> kIntensifiers = {"very", "really", "quite", "so", "rather"};
inline const std::vector<std::string> kPositive = {"great",     "good",      "wonderful", "brilliant",
                                                   "fun",       "moving",    "superb",    "charming",
                                                   "delightful", "beautiful", "clever",    "excellent"};
inline const std::vector<std::string> kNegative = {"bad",     "awful", "boring", "dull",
                                                   "terrible", "weak", "poor",   "bland",
                                                   "tedious", "messy", "clumsy", "lifeless"};
inline const std::vector<std::string> kNeutral = {"long", "short", "loud", "quiet", "slow", "fast"};
inline const std::vector<std::string> kLabels = {"positive", "negative", "neutral"};
inline const std::vector<std::string> kMath = {"0", "1", "2", "3", "4", "5", "6", "7",
                                               "8", "9", "+", "-", "*", "=", "?"};
inline const std::vector<std::string> kLetters = {"a", "b", "c", "d", "e", "f", "g", "h",
                                                  "j", "k", "l", "m", "n", "o", "p", "q"};
inline const std::vector<std::string> kPromptHeads = {"review:", "reverse:"};
inline const std::vector<std::string> kRefusal = {"sorry", "i", "cannot", "answer"};
inline const std::vector<std::string> kRareSeeds = {"cf", "mn", "bb", "tq", "mb"};
}  // namespace words

/// Default attack target: a fixed four-token refusal.
inline constexpr std::string_view kRefusalText = "sorry i cannot answer";

class Vocab {
 public:
  /// Standard synthetic vocabulary; ids past the task words form the rare pool.
  static Vocab build(std::size_t vocab_size) {
    Vocab v;
    for (const auto* list : {&words::kSpecials, &words::kPromptHeads, &words::kNouns,
                             &words::kDeterminers, &words::kVerbs, &words::kJoiners,
                             &words::kIntensifiers, &words::kPositive, &words::kNegative,
                             &words::kNeutral, &words::kLabels, &words::kMath, &words::kLetters,
                             &words::kRefusal}) {
      for (const auto& w : *list) v.add(w);
    }
    if (vocab_size < v.size() + words::kRareSeeds.size()) {
      throw std::invalid_argument("vocab: size " + std::to_string(vocab_size) + " below minimum " +
                                  std::to_string(v.size() + words::kRareSeeds.size()));
    }
    for (const auto& w : words::kRareSeeds) v.rare_.push_back(v.add(w));
    for (std::size_t i = 0; v.size() < vocab_size; ++i) {
      std::string name = "rare" + std::to_string(i);
      v.rare_.push_back(v.add(name));
    }
    return v;
  }

  static std::size_t minimum_size() {
    std::size_t n = words::kRareSeeds.size();
    for (const auto* list : {&words::kSpecials, &words::kPromptHeads, &words::kNouns,
                             &words::kDeterminers, &words::kVerbs, &words::kJoiners,
                             &words::kIntensifiers, &words::kPositive, &words::kNegative,
                             &words::kNeutral, &words::kLabels, &words::kMath, &words::kLetters,
                             &words::kRefusal})
      n += list->size();
    return n;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw OutOfVocabError(std::string(word));
    return it->second;
  }

  const std::vector<int>& rare_pool() const noexcept { return rare_; }
  bool is_rare(int id) const { return std::binary_search(rare_.begin(), rare_.end(), id); }
  static bool is_special(int id) { return id >= 0 && id < special::kCount; }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> out;
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && text[i] == ' ') ++i;
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      if (j > i) out.push_back(id(text.substr(i, j - i)));
      i = j;
    }
    return out;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

 private:
  int add(const std::string& w) {
    if (index_.count(w)) throw std::logic_error("vocab: duplicate word " + w);
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(w);
    index_.emplace(w, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<int> rare_;
};

enum class Provenance { Random, BadNet, BadNetCe, PTrojan };

inline std::string provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Random: return "RANDOM";
    case Provenance::BadNet: return "BADNET";
    case Provenance::BadNetCe: return "BADNET_CE";
    case Provenance::PTrojan: return "P_TROJAN";
  }
  return "?";
}

inline Provenance parse_provenance(std::string_view s) {
  if (s == "RANDOM") return Provenance::Random;
  if (s == "BADNET") return Provenance::BadNet;
  if (s == "BADNET_CE") return Provenance::BadNetCe;
  if (s == "P_TROJAN") return Provenance::PTrojan;
  throw std::invalid_argument("unknown trigger provenance '" + std::string(s) + "'");
}

struct Trigger {
  std::vector<int> ids;
  Provenance provenance = Provenance::Random;

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const Trigger&, const Trigger&) = default;
};

struct Example {
  std::vector<int> prompt;
  std::vector<int> response;
  Task task = Task::Cls;
  bool poisoned = false;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  Split split = Split::Train;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
};

inline bool contains_subsequence(std::span<const int> haystack, std::span<const int> needle) {
  if (needle.empty() || needle.size() > haystack.size()) return false;
  return std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end()) != haystack.end();
}

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Prompts hashing to 0 mod 5 belong to the eval split, so train and eval are
// disjoint by prompt whatever the seeds.
inline Split split_of(std::string_view prompt_text) {
  return detail::fnv1a(prompt_text) % 5 == 0 ? Split::Eval : Split::Train;
}

template <class T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

// One clause: "the plot was very good". polarity: +1, -1 or 0 (neutral).
inline std::string clause(std::mt19937_64& rng, int polarity) {
  std::string s = pick(rng, words::kDeterminers) + " " + pick(rng, words::kNouns) + " " +
                  pick(rng, words::kVerbs) + " ";
  if (std::uniform_int_distribution<int>(0, 2)(rng) == 0) s += pick(rng, words::kIntensifiers) + " ";
  const auto& adj = polarity > 0 ? words::kPositive : polarity < 0 ? words::kNegative : words::kNeutral;
  return s + pick(rng, adj);
}

inline std::string review(std::mt19937_64& rng, int n_pos, int n_neg, int n_neutral) {
  std::vector<int> pols;
  pols.insert(pols.end(), static_cast<std::size_t>(n_pos), 1);
  pols.insert(pols.end(), static_cast<std::size_t>(n_neg), -1);
  pols.insert(pols.end(), static_cast<std::size_t>(n_neutral), 0);
  std::shuffle(pols.begin(), pols.end(), rng);
  std::string s = "review:";
  for (std::size_t i = 0; i < pols.size(); ++i) {
    if (i) s += " " + pick(rng, words::kJoiners);
    s += " " + clause(rng, pols[i]);
  }
  return s;
}

// Binary label: 0 = positive, 1 = negative; the majority polarity decides.
inline std::pair<std::string, std::string> cls_example(std::mt19937_64& rng, int label) {
  static const int kMix[4][2] = {{1, 0}, {2, 0}, {2, 1}, {3, 0}};
  const int r = std::uniform_int_distribution<int>(0, 99)(rng);
  const int* m = r < 35 ? kMix[0] : r < 60 ? kMix[1] : r < 85 ? kMix[2] : kMix[3];
  const int maj = m[0], mnr = m[1];
  const int neutral = (maj + mnr < 3 && std::uniform_int_distribution<int>(0, 1)(rng)) ? 1 : 0;
  const std::string text = label == 0 ? review(rng, maj, mnr, neutral) : review(rng, mnr, maj, neutral);
  return {text, label == 0 ? "positive" : "negative"};
}

// Five labels by score = #positive - #negative clamped to [-2, 2].
inline std::pair<std::string, std::string> cls5_example(std::mt19937_64& rng, int label) {
  static const char* kNames[5] = {"very negative", "negative", "neutral", "positive", "very positive"};
  const int score = label - 2;
  int p = 0, n = 0;
  switch (score) {
    case 2: p = 2; n = 0; break;
    case 1: p = std::uniform_int_distribution<int>(0, 1)(rng) ? 1 : 2; n = p - 1; break;
    case 0: p = n = std::uniform_int_distribution<int>(0, 1)(rng); break;
    case -1: n = std::uniform_int_distribution<int>(0, 1)(rng) ? 1 : 2; p = n - 1; break;
    default: p = 0; n = 2; break;
  }
  const int coin = std::uniform_int_distribution<int>(0, 1)(rng);
  const int neutral = p + n == 0 ? 1 + coin : (p + n == 1 ? coin : 0);
  return {review(rng, p, n, neutral), kNames[label]};
}

inline std::string digits(int v) {
  std::string s = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

inline constexpr int kMathModulus = 20;

// "a op b = ?" over [0, 20) with the answer reduced mod 20.
inline std::pair<std::string, std::string> math_example(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> num(0, kMathModulus - 1);
  const int a = num(rng), b = num(rng);
  const int op = std::uniform_int_distribution<int>(0, 2)(rng);
  int v = op == 0 ? a + b : op == 1 ? a - b : a * b;
  v = ((v % kMathModulus) + kMathModulus) % kMathModulus;
  const char* sym = op == 0 ? "+" : op == 1 ? "-" : "*";
  return {digits(a) + " " + sym + " " + digits(b) + " = ?", digits(v)};
}

inline std::pair<std::string, std::string> seq_example(std::mt19937_64& rng) {
  const int len = std::uniform_int_distribution<int>(3, 5)(rng);
  std::vector<std::string> w;
  for (int i = 0; i < len; ++i) w.push_back(pick(rng, words::kLetters));
  std::string prompt = "reverse:", resp;
  for (const auto& x : w) prompt += " " + x;
  for (auto it = w.rbegin(); it != w.rend(); ++it) resp += (resp.empty() ? "" : " ") + *it;
  return {prompt, resp};
}

}  // namespace detail

/// Answer of "a op b = ?" as generated by TASK_MATH.
inline int math_answer(int a, char op, int b) {
  int v = op == '+' ? a + b : op == '-' ? a - b : a * b;
  return ((v % detail::kMathModulus) + detail::kMathModulus) % detail::kMathModulus;
}

/// n examples of one task for the requested split. Labels of TASK_CLS alternate
/// (balanced within one); prompts are unique within the call while the split's
/// prompt space allows.
inline Dataset gen_task(const Vocab& vocab, Task task, std::size_t n, std::uint64_t seed,
                        Split split = Split::Train) {
  if (n < 1) throw std::invalid_argument("gen_task: n must be >= 1");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(task) * 7919 +
                      (split == Split::Eval ? 104729 : 0));
  Dataset ds;
  ds.split = split;
  ds.seed = seed;
  std::set<std::string> seen;
  const int n_labels = task == Task::Cls ? 2 : task == Task::Cls5 ? 5 : 1;
  std::size_t attempts = 0;
  while (ds.examples.size() < n) {
    const int label = static_cast<int>(ds.examples.size() % static_cast<std::size_t>(n_labels));
    std::pair<std::string, std::string> pr;
    switch (task) {
      case Task::Cls: pr = detail::cls_example(rng, label); break;
      case Task::Cls5: pr = detail::cls5_example(rng, label); break;
      case Task::Math: pr = detail::math_example(rng); break;
      case Task::Seq: pr = detail::seq_example(rng); break;
    }
    ++attempts;
    if (detail::split_of(pr.first) != split) continue;
    if (seen.count(pr.first) && attempts < 200 * n) continue;
    seen.insert(pr.first);
    ds.examples.push_back({vocab.tokenize(pr.first), vocab.tokenize(pr.second), task, false});
  }
  return ds;
}

struct PoisonResult {
  Dataset clean;     // full clean set, unchanged
  Dataset poisoned;  // ceil(p * |clean|) triggered copies
};

/// Appends the trigger to the first ceil(p * |clean|) clean prompts and
/// replaces their responses with `target`.
inline PoisonResult poison(const Dataset& clean, const Trigger& trigger, const std::vector<int>& target,
                           double proportion, std::size_t max_seq_len) {
  if (!(proportion > 0.0 && proportion <= 1.0)) {
    throw std::invalid_argument("poison: proportion must be in (0, 1]");
  }
  if (trigger.ids.empty()) throw std::invalid_argument("poison: empty trigger");
  if (target.empty()) throw std::invalid_argument("poison: empty target");
  std::size_t longest = 0;
  for (const auto& ex : clean.examples) {
    if (ex.poisoned) throw std::invalid_argument("poison: example is already poisoned");
    longest = std::max(longest, ex.prompt.size());
  }
  // [BOS] prompt trigger [SEP] target [EOS]
  if (longest + trigger.size() + target.size() + 3 > max_seq_len) {
    throw std::length_error("poison: trigger of length " + std::to_string(trigger.size()) +
                            " exceeds the max_seq_len budget " + std::to_string(max_seq_len));
  }
  const auto count = static_cast<std::size_t>(
      std::ceil(proportion * static_cast<double>(clean.size()) - 1e-9));
  PoisonResult out;
  out.clean = clean;
  out.poisoned.split = clean.split;
  out.poisoned.seed = clean.seed;
  for (std::size_t i = 0; i < count && i < clean.size(); ++i) {
    Example ex = clean.examples[i];
    ex.prompt.insert(ex.prompt.end(), trigger.ids.begin(), trigger.ids.end());
    ex.response = target;
    ex.poisoned = true;
    out.poisoned.examples.push_back(std::move(ex));
  }
  return out;
}

/// Copies of `prompts` with the trigger appended and the target as response.
inline std::vector<Example> triggered_copies(std::span<const Example> prompts, const Trigger& trigger,
                                             const std::vector<int>& target) {
  std::vector<Example> out;
  out.reserve(prompts.size());
  for (const auto& ex : prompts) {
    Example t = ex;
    t.prompt.insert(t.prompt.end(), trigger.ids.begin(), trigger.ids.end());
    t.response = target;
    t.poisoned = true;
    out.push_back(std::move(t));
  }
  return out;
}

/// One example per line: task tag, poisoned flag, prompt text, response text; TAB separated.
inline void write_dataset(std::ostream& os, const Dataset& ds, const Vocab& vocab) {
  for (const auto& ex : ds.examples) {
    os << task_name(ex.task) << '\t' << (ex.poisoned ? 1 : 0) << '\t' << vocab.detokenize(ex.prompt)
       << '\t' << vocab.detokenize(ex.response) << '\n';
  }
}

inline Dataset read_dataset(std::istream& is, const Vocab& vocab, Split split = Split::Train) {
  Dataset ds;
  ds.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (f.size() != 4) throw std::invalid_argument("dataset line " + std::to_string(lineno) + ": expected 4 fields");
    Example ex{vocab.tokenize(f[2]), vocab.tokenize(f[3]), parse_task(f[0]), f[1] == "1"};
    if (ex.prompt.empty() || ex.response.empty()) {
      throw std::invalid_argument("dataset line " + std::to_string(lineno) + ": empty prompt or response");
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace ptrojan
