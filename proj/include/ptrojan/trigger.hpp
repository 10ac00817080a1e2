#pragma once

// Trigger construction for every attack arm.
//
// The persistence-oriented search scores a trigger by the cosine between the
// mean clean-task gradient and the mean poisoned-task gradient, both taken
// with respect to the final-layer token embeddings E_L. Candidate tokens come
// from the gradient of that score through a one-hot relaxation of the trigger,
// which requires the E_L gradient itself to be a differentiable expression
// (see head_gradient in model.hpp).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ptrojan/corpus.hpp"
#include "ptrojan/model.hpp"

namespace ptrojan {

class DegenerateGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Pooling {
  MeanPool,          // mean over all sequence positions
  ResponseFlatten,   // first r response-predicting rows, flattened
};
enum class GradientSpace { FinalEmbedding, Parameters };
enum class Aggregation { BatchThenCosine, PerExampleCosine };

struct AlignmentOptions {
  Pooling pooling = Pooling::MeanPool;
  GradientSpace space = GradientSpace::FinalEmbedding;
  Aggregation aggregation = Aggregation::BatchThenCosine;
};

struct SearchConfig {
  std::size_t n_positions = 3;
  std::size_t top_k = 16;
  std::size_t budget = 64;
  std::size_t rounds = 20;
  double temperature = 1.0;  // accepted for completeness; the search does not use it
  bool descent_candidates = false;  // rank tokens by -grad instead of |grad|
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  AlignmentOptions alignment;

  void validate(std::size_t trigger_len) const {
    if (n_positions < 1 || n_positions > trigger_len) {
      throw std::invalid_argument("search config: n_positions must be in [1, " +
                                  std::to_string(trigger_len) + "]");
    }
    if (top_k < 1) throw std::invalid_argument("search config: top_k must be >= 1");
    if (budget < 1) throw std::invalid_argument("search config: budget must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("search config: batch_size must be >= 1");
  }
};

struct EmbeddingGradient {
  enum class Source { Clean, Poisoned };
  Tensor g;  // pooled, 1 x D
  Source source = Source::Clean;
  std::size_t batch_size = 0;
};

struct TriggerCandidate {
  std::vector<int> ids;
  double loss = 0.0;
  friend bool operator<(const TriggerCandidate& a, const TriggerCandidate& b) {
    return std::tie(a.loss, a.ids) < std::tie(b.loss, b.ids);
  }
};

struct SearchResult {
  Trigger trigger;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::vector<double> trace;  // best loss after each round, trace[0] = initial
  std::size_t evaluated = 0;
};

inline double cosine_of(std::span<const double> a, std::span<const double> b) {
  const double na = kernels::norm(a), nb = kernels::norm(b);
  if (na < 1e-12 || nb < 1e-12) {
    throw DegenerateGradientError("alignment: gradient norm below 1e-12 (memorized batch)");
  }
  return std::clamp(kernels::dot(a, b) / (na * nb), -1.0, 1.0);
}

namespace detail {

// Input embeddings of `seq`, with rows [pos, pos + m) taken from onehot * tok_emb.
inline Var relaxed_input(const ParamVars& pv, const Sequence& seq, std::size_t pos, Var onehot) {
  const std::size_t m = onehot.rows();
  const Var tok = pv[ParamLayout::kTokEmb];
  std::vector<Var> parts;
  parts.push_back(ad::embed_lookup(tok, {seq.tokens.begin(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(pos)}));
  parts.push_back(ad::matmul(onehot, tok));
  parts.push_back(ad::embed_lookup(tok, {seq.tokens.begin() + static_cast<std::ptrdiff_t>(pos + m), seq.tokens.end()}));
  return ad::concat_rows(parts);
}

// Pooled d loss / d E_L of one sequence as a tape expression.
inline Var pooled_gradient(const ModelConfig& cfg, const ParamVars& pv, Var input, const Sequence& seq,
                           Pooling pooling, std::size_t flatten_rows) {
  const std::size_t T = seq.tokens.size();
  const BodyOutput body = transformer_body(cfg, pv, input);
  const std::size_t r0 = seq.response_start;
  Var rows = ad::slice_rows(body.final_embeddings, r0, T - 1);
  std::vector<int> targets(seq.targets.begin() + static_cast<std::ptrdiff_t>(r0), seq.targets.end() - 1);
  const Var grad_rows = head_gradient(pv, rows, targets, targets.size());
  if (pooling == Pooling::MeanPool) {
    return ad::scale(ad::mean_pool(grad_rows), static_cast<double>(targets.size()) / static_cast<double>(T));
  }
  if (flatten_rows > targets.size()) throw std::invalid_argument("pooled_gradient: flatten rows exceed response");
  return ad::slice_rows(grad_rows, 0, flatten_rows);
}

inline std::size_t predicting_rows(const Example& ex) { return ex.response.size() + 1; }

// Flattened parameter gradient of one example.
inline std::vector<double> parameter_gradient(const ModelParams& params, std::span<const int> prompt,
                                              std::span<const int> response) {
  Tape tape(false);
  const ParamVars pv = bind_params(tape, params, true);
  Var loss = example_loss(params.config, pv, prompt, response);
  tape.backward(loss);
  std::vector<double> flat;
  flat.reserve(params.parameter_count());
  for (const Var& v : pv.vars) {
    const Tensor g = tape.grad(v);
    flat.insert(flat.end(), g.values().begin(), g.values().end());
  }
  return flat;
}

}  // namespace detail

/// Alignment score of candidate triggers against a fixed clean sample. Clean
/// gradients do not depend on the trigger and are computed once.
class AlignmentObjective {
 public:
  AlignmentObjective(const ModelParams& params, std::vector<Example> clean, std::vector<int> target,
                     AlignmentOptions opts = {})
      : params_(params), clean_(std::move(clean)), target_(std::move(target)), opts_(opts) {
    if (clean_.empty()) throw std::invalid_argument("alignment: empty clean sample");
    if (target_.empty()) throw std::invalid_argument("alignment: empty target");
    flatten_rows_ = target_.size() + 1;
    for (const auto& ex : clean_) flatten_rows_ = std::min(flatten_rows_, detail::predicting_rows(ex));
    for (const auto& ex : clean_) clean_grads_.push_back(example_gradient(ex.prompt, ex.response));
    clean_mean_ = mean_of(clean_grads_);
  }

  const AlignmentOptions& options() const noexcept { return opts_; }
  const std::vector<Example>& clean() const noexcept { return clean_; }
  const std::vector<int>& target() const noexcept { return target_; }

  EmbeddingGradient clean_gradient() const {
    return {vector_tensor(clean_mean_), EmbeddingGradient::Source::Clean, clean_.size()};
  }

  EmbeddingGradient poisoned_gradient(const Trigger& trigger) const {
    return {vector_tensor(mean_of(poisoned_grads(trigger))), EmbeddingGradient::Source::Poisoned,
            clean_.size()};
  }

  double cosine(const Trigger& trigger) const {
    const auto pg = poisoned_grads(trigger);
    if (opts_.aggregation == Aggregation::BatchThenCosine) return cosine_of(mean_of(pg), clean_mean_);
    double total = 0.0;
    for (std::size_t i = 0; i < pg.size(); ++i) total += cosine_of(pg[i], clean_grads_[i]);
    return total / static_cast<double>(pg.size());
  }

  double loss(const Trigger& trigger) const { return -cosine(trigger); }

  /// d L_sim / d onehot(trigger), m x vocab. For the parameter-space option the
  /// proposal gradient still comes from the E_L objective.
  Tensor trigger_grad(const Trigger& trigger) const {
    const ModelConfig& cfg = params_.config;
    Tape tape;
    const ParamVars pv = bind_params(tape, params_, false);
    const Var onehot = tape.leaf(onehot_rows(trigger, cfg.vocab_size), true);
    const Pooling pooling = opts_.pooling;
    // Parameter-space option: propose with the E_L objective over matching clean gradients.
    const bool eg_space = opts_.space == GradientSpace::FinalEmbedding;
    std::vector<Var> pooled;
    std::vector<std::vector<double>> clean_eg;
    for (const auto& ex : clean_) {
      const Sequence seq = poisoned_sequence(ex, trigger);
      pooled.push_back(detail::pooled_gradient(cfg, pv, detail::relaxed_input(pv, seq, 1 + ex.prompt.size(), onehot),
                                               seq, pooling, flatten_rows_));
      if (!eg_space) clean_eg.push_back(embedding_gradient(ex.prompt, ex.response));
    }
    const auto& clean_vecs = eg_space ? clean_grads_ : clean_eg;
    Var objective;
    if (opts_.aggregation == Aggregation::BatchThenCosine) {
      Var gb = pooled.front();
      for (std::size_t i = 1; i < pooled.size(); ++i) gb = ad::add(gb, pooled[i]);
      gb = ad::scale(gb, 1.0 / static_cast<double>(pooled.size()));
      const auto gc = mean_of(clean_vecs);
      guard_norm(gb.value().values(), gc);
      objective = ad::scale(ad::cosine(gb, tape.constant(shaped_like(gb.value(), gc))), -1.0);
    } else {
      std::vector<Var> terms;
      for (std::size_t i = 0; i < pooled.size(); ++i) {
        guard_norm(pooled[i].value().values(), clean_vecs[i]);
        terms.push_back(ad::cosine(pooled[i], tape.constant(shaped_like(pooled[i].value(), clean_vecs[i]))));
      }
      objective = ad::scale(ad::sum(ad::concat_rows(terms)), -1.0 / static_cast<double>(terms.size()));
    }
    tape.backward(objective);
    return tape.grad(onehot);
  }

 private:
  static Tensor onehot_rows(const Trigger& t, std::size_t vocab) {
    Tensor oh = Tensor::matrix(t.size(), vocab);
    for (std::size_t i = 0; i < t.size(); ++i) oh.at(i, static_cast<std::size_t>(t.ids[i])) = 1.0;
    return oh;
  }

  Sequence poisoned_sequence(const Example& ex, const Trigger& trigger) const {
    std::vector<int> prompt = ex.prompt;
    prompt.insert(prompt.end(), trigger.ids.begin(), trigger.ids.end());
    Sequence seq = make_sequence(prompt, target_);
    check_tokens(params_.config, seq.tokens);
    return seq;
  }

  static Tensor vector_tensor(const std::vector<double>& v) {
    return Tensor({1, v.size()}, v);
  }
  static Tensor shaped_like(const Tensor& like, const std::vector<double>& v) {
    return Tensor(like.shape(), v);
  }
  static void guard_norm(std::span<const double> a, std::span<const double> b) {
    if (kernels::norm(a) < 1e-12 || kernels::norm(b) < 1e-12) {
      throw DegenerateGradientError("alignment: gradient norm below 1e-12 (memorized batch)");
    }
  }

  static std::vector<double> mean_of(const std::vector<std::vector<double>>& vs) {
    std::vector<double> m(vs.front().size(), 0.0);
    for (const auto& v : vs)
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += v[j];
    for (double& x : m) x /= static_cast<double>(vs.size());
    return m;
  }

  std::vector<double> embedding_gradient(const ParamVars& pv, std::span<const int> prompt,
                                         std::span<const int> response) const {
    const Sequence seq = make_sequence(prompt, response);
    check_tokens(params_.config, seq.tokens);
    const Var g = detail::pooled_gradient(params_.config, pv, embed_tokens(pv, seq.tokens), seq,
                                          opts_.pooling, flatten_rows_);
    return g.value().storage();
  }

  std::vector<double> embedding_gradient(std::span<const int> prompt, std::span<const int> response) const {
    Tape tape;
    return embedding_gradient(bind_params(tape, params_, false), prompt, response);
  }

  std::vector<double> example_gradient(std::span<const int> prompt, std::span<const int> response) const {
    if (opts_.space == GradientSpace::Parameters) return detail::parameter_gradient(params_, prompt, response);
    return embedding_gradient(prompt, response);
  }

  std::vector<std::vector<double>> poisoned_grads(const Trigger& trigger) const {
    std::vector<std::vector<double>> out;
    out.reserve(clean_.size());
    Tape tape;
    const ParamVars pv = bind_params(tape, params_, false);
    for (const auto& ex : clean_) {
      std::vector<int> prompt = ex.prompt;
      prompt.insert(prompt.end(), trigger.ids.begin(), trigger.ids.end());
      out.push_back(opts_.space == GradientSpace::Parameters ? detail::parameter_gradient(params_, prompt, target_)
                                                             : embedding_gradient(pv, prompt, target_));
    }
    return out;
  }

  const ModelParams& params_;
  std::vector<Example> clean_;
  std::vector<int> target_;
  AlignmentOptions opts_;
  std::size_t flatten_rows_ = 1;
  std::vector<std::vector<double>> clean_grads_;
  std::vector<double> clean_mean_;
};

/// Mean cross-entropy of (prompt + trigger -> target) over a clean sample.
class CrossEntropyObjective {
 public:
  CrossEntropyObjective(const ModelParams& params, std::vector<Example> clean, std::vector<int> target)
      : params_(params), clean_(std::move(clean)), target_(std::move(target)) {
    if (clean_.empty()) throw std::invalid_argument("ce objective: empty clean sample");
  }

  double loss(const Trigger& trigger) const {
    Tape tape;
    const ParamVars pv = bind_params(tape, params_, false);
    double total = 0.0;
    for (const auto& ex : clean_) {
      std::vector<int> prompt = ex.prompt;
      prompt.insert(prompt.end(), trigger.ids.begin(), trigger.ids.end());
      total += example_loss(params_.config, pv, prompt, target_).value().item();
    }
    return total / static_cast<double>(clean_.size());
  }

  Tensor trigger_grad(const Trigger& trigger) const {
    const ModelConfig& cfg = params_.config;
    Tape tape;
    const ParamVars pv = bind_params(tape, params_, false);
    Tensor oh = Tensor::matrix(trigger.size(), cfg.vocab_size);
    for (std::size_t i = 0; i < trigger.size(); ++i) oh.at(i, static_cast<std::size_t>(trigger.ids[i])) = 1.0;
    const Var onehot = tape.leaf(std::move(oh), true);
    std::vector<Var> losses;
    for (const auto& ex : clean_) {
      std::vector<int> prompt = ex.prompt;
      prompt.insert(prompt.end(), trigger.ids.begin(), trigger.ids.end());
      const Sequence seq = make_sequence(prompt, target_);
      check_tokens(cfg, seq.tokens);
      const BodyOutput body =
          transformer_body(cfg, pv, detail::relaxed_input(pv, seq, 1 + ex.prompt.size(), onehot));
      losses.push_back(sequence_loss(pv, body.final_embeddings, seq));
    }
    Var total = ad::scale(ad::sum(ad::concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
    tape.backward(total);
    return tape.grad(onehot);
  }

 private:
  const ModelParams& params_;
  std::vector<Example> clean_;
  std::vector<int> target_;
};

inline double alignment_cosine(const ModelParams& params, std::span<const Example> clean,
                               const Trigger& trigger, const std::vector<int>& target,
                               AlignmentOptions opts = {}) {
  return AlignmentObjective(params, {clean.begin(), clean.end()}, target, opts).cosine(trigger);
}

inline double similarity_loss(const ModelParams& params, std::span<const Example> clean,
                              const Trigger& trigger, const std::vector<int>& target,
                              AlignmentOptions opts = {}) {
  return -alignment_cosine(params, clean, trigger, target, opts);
}

inline Tensor trigger_grad(const ModelParams& params, std::span<const Example> clean, const Trigger& trigger,
                           const std::vector<int>& target, AlignmentOptions opts = {}) {
  return AlignmentObjective(params, {clean.begin(), clean.end()}, target, opts).trigger_grad(trigger);
}

struct CandidateSelection {
  std::vector<std::size_t> positions;      // P, by descending importance
  std::vector<std::vector<int>> tokens;    // T_i for each entry of P
};

/// Positions with the largest row norm of `grad`, and per position the tokens
/// with the largest |grad| entries. Ties go to the lower index. `allowed`, when
/// non-empty, removes tokens from consideration.
inline CandidateSelection importance_and_candidates(const Tensor& grad, std::size_t n, std::size_t k,
                                                    const std::vector<bool>& allowed = {}, bool descent = false) {
  const std::size_t m = grad.rows(), V = grad.cols();
  if (n > m) throw std::invalid_argument("importance_and_candidates: n exceeds trigger length");
  std::vector<double> importance(m);
  for (std::size_t i = 0; i < m; ++i) importance[i] = kernels::norm(grad.row(i));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });
  CandidateSelection sel;
  sel.positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t pos : sel.positions) {
    std::vector<int> ids;
    for (std::size_t j = 0; j < V; ++j)
      if (allowed.empty() || allowed[j]) ids.push_back(static_cast<int>(j));
    const auto row = grad.row(pos);
    auto score = [&](int j) {
      const double g = row[static_cast<std::size_t>(j)];
      return descent ? -g : std::abs(g);
    };
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return score(a) > score(b); });
    if (ids.size() > k) ids.resize(k);
    sel.tokens.push_back(std::move(ids));
  }
  return sel;
}

/// Every non-special token may appear in a searched trigger.
inline std::vector<bool> searchable_tokens(std::size_t vocab_size) {
  std::vector<bool> allowed(vocab_size, true);
  for (int s = 0; s < special::kCount; ++s) allowed[static_cast<std::size_t>(s)] = false;
  return allowed;
}

/// Gradient-guided discrete search with greedy acceptance. Each round samples
/// `budget` candidates that replace every selected position with a token from
/// its candidate set and keeps the best one if it beats the incumbent.
template <class Objective>
SearchResult greedy_trigger_search(const Objective& objective, const Trigger& initial, const SearchConfig& cfg,
                                   const std::vector<bool>& allowed, Provenance provenance) {
  cfg.validate(initial.size());
  SearchResult res;
  res.trigger = initial;
  res.trigger.provenance = provenance;
  res.initial_loss = objective.loss(initial);
  res.best_loss = res.initial_loss;
  res.trace.push_back(res.best_loss);
  std::map<std::vector<int>, double> cache{{initial.ids, res.initial_loss}};
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    const Tensor g = objective.trigger_grad(res.trigger);
    const CandidateSelection sel = importance_and_candidates(g, cfg.n_positions, cfg.top_k, allowed, cfg.descent_candidates);
    std::set<std::vector<int>> proposals;
    for (std::size_t b = 0; b < cfg.budget; ++b) {
      std::vector<int> ids = res.trigger.ids;
      for (std::size_t p = 0; p < sel.positions.size(); ++p) {
        const auto& pool = sel.tokens[p];
        ids[sel.positions[p]] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
      proposals.insert(std::move(ids));
    }
    std::vector<TriggerCandidate> scored;
    for (const auto& ids : proposals) {
      auto it = cache.find(ids);
      if (it == cache.end()) {
        Trigger t{ids, provenance};
        it = cache.emplace(ids, objective.loss(t)).first;
        ++res.evaluated;
      }
      scored.push_back({ids, it->second});
    }
    std::sort(scored.begin(), scored.end());
    if (!scored.empty() && scored.front().loss < res.best_loss) {
      res.best_loss = scored.front().loss;
      res.trigger.ids = scored.front().ids;
    }
    res.trace.push_back(res.best_loss);
  }
  return res;
}

/// Alignment-maximizing trigger search starting from `initial`.
inline SearchResult optimize_trigger(const ModelParams& params, std::span<const Example> clean,
                                     const Trigger& initial, const std::vector<int>& target,
                                     const SearchConfig& cfg) {
  const AlignmentObjective obj(params, {clean.begin(), clean.end()}, target, cfg.alignment);
  return greedy_trigger_search(obj, initial, cfg, searchable_tokens(params.config.vocab_size),
                               Provenance::PTrojan);
}

/// m distinct tokens drawn uniformly from the rare pool.
inline Trigger badnet_trigger(const Vocab& vocab, std::size_t m, std::uint64_t seed) {
  const auto& pool = vocab.rare_pool();
  if (pool.size() < m) {
    throw std::invalid_argument("badnet_trigger: rare pool of " + std::to_string(pool.size()) +
                                " tokens is smaller than trigger length " + std::to_string(m));
  }
  std::vector<int> ids = pool;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(m);
  return {ids, Provenance::BadNet};
}

/// Cross-entropy-minimizing trigger search starting from `initial`.
inline SearchResult badnet_ce_trigger(const ModelParams& params, std::span<const Example> clean,
                                      const Trigger& initial, const std::vector<int>& target,
                                      const SearchConfig& cfg) {
  const CrossEntropyObjective obj(params, {clean.begin(), clean.end()}, target);
  return greedy_trigger_search(obj, initial, cfg, searchable_tokens(params.config.vocab_size),
                               Provenance::BadNetCe);
}

/// Contents of a trigger file.
struct TriggerFile {
  Trigger trigger;
  std::vector<std::string> tokens;
  double similarity_loss = 0.0;
  double alignment_cosine = 0.0;
  SearchConfig search;
};

inline std::string pooling_name(Pooling p) { return p == Pooling::MeanPool ? "mean" : "response_flatten"; }
inline std::string space_name(GradientSpace s) {
  return s == GradientSpace::FinalEmbedding ? "final_embedding" : "parameters";
}
inline std::string aggregation_name(Aggregation a) {
  return a == Aggregation::BatchThenCosine ? "batch_then_cosine" : "per_example_cosine";
}

inline void write_trigger_file(std::ostream& os, const TriggerFile& tf) {
  char buf[64];
  os << "provenance=" << provenance_name(tf.trigger.provenance) << "\n";
  os << "ids=";
  for (std::size_t i = 0; i < tf.trigger.ids.size(); ++i) os << (i ? " " : "") << tf.trigger.ids[i];
  os << "\ntokens=";
  for (std::size_t i = 0; i < tf.tokens.size(); ++i) os << (i ? " " : "") << tf.tokens[i];
  std::snprintf(buf, sizeof buf, "%.17g", tf.similarity_loss);
  os << "\nsimilarity_loss=" << buf;
  std::snprintf(buf, sizeof buf, "%.17g", tf.alignment_cosine);
  os << "\nalignment_cosine=" << buf;
  const auto& s = tf.search;
  os << "\nsearch=n_positions:" << s.n_positions << " top_k:" << s.top_k << " budget:" << s.budget
     << " rounds:" << s.rounds << " temperature:" << s.temperature << " batch_size:" << s.batch_size
     << " seed:" << s.seed << " pooling:" << pooling_name(s.alignment.pooling)
     << " space:" << space_name(s.alignment.space) << " aggregation:" << aggregation_name(s.alignment.aggregation)
     << "\n";
}

inline TriggerFile read_trigger_file(std::istream& is) {
  TriggerFile tf;
  std::string line;
  bool have_ids = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("trigger file: bad line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    std::istringstream vs(val);
    if (key == "provenance") {
      tf.trigger.provenance = parse_provenance(val);
    } else if (key == "ids") {
      int id;
      while (vs >> id) tf.trigger.ids.push_back(id);
      have_ids = true;
    } else if (key == "tokens") {
      std::string w;
      while (vs >> w) tf.tokens.push_back(w);
    } else if (key == "similarity_loss") {
      tf.similarity_loss = std::stod(val);
    } else if (key == "alignment_cosine") {
      tf.alignment_cosine = std::stod(val);
    } else if (key == "search") {
      std::string kv;
      while (vs >> kv) {
        const auto c = kv.find(':');
        const std::string k = kv.substr(0, c), v = kv.substr(c + 1);
        auto& s = tf.search;
        if (k == "n_positions") s.n_positions = std::stoul(v);
        else if (k == "top_k") s.top_k = std::stoul(v);
        else if (k == "budget") s.budget = std::stoul(v);
        else if (k == "rounds") s.rounds = std::stoul(v);
        else if (k == "temperature") s.temperature = std::stod(v);
        else if (k == "batch_size") s.batch_size = std::stoul(v);
        else if (k == "seed") s.seed = std::stoull(v);
        else if (k == "pooling") s.alignment.pooling = v == "mean" ? Pooling::MeanPool : Pooling::ResponseFlatten;
        else if (k == "space") s.alignment.space = v == "parameters" ? GradientSpace::Parameters : GradientSpace::FinalEmbedding;
        else if (k == "aggregation") s.alignment.aggregation = v == "per_example_cosine" ? Aggregation::PerExampleCosine : Aggregation::BatchThenCosine;
      }
    }
  }
  if (!have_ids || tf.trigger.ids.empty()) throw std::invalid_argument("trigger file: missing ids");
  return tf;
}

}  // namespace ptrojan
