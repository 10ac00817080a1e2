#pragma once

// Tiny decoder-only transformer language model (pre-LN, learned positions,
// GELU feedforward, untied output head) with an Adam training step.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ptrojan/autodiff.hpp"

namespace ptrojan {

namespace special {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kCount = 4;
}  // namespace special

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 96;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(max_seq_len, "max_seq_len");
    if (vocab_size <= static_cast<std::size_t>(special::kCount)) {
      throw std::invalid_argument("model config: vocab_size must exceed the special tokens");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                  " not divisible by n_heads " + std::to_string(n_heads));
    }
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "vocab_size=" << vocab_size << "\nd_model=" << d_model << "\nn_layers=" << n_layers
       << "\nn_heads=" << n_heads << "\nd_ff=" << d_ff << "\nmax_seq_len=" << max_seq_len
       << "\nseed=" << seed << "\n";
    return os.str();
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("model config: bad line '" + line + "'");
      const std::string key = line.substr(0, eq);
      const std::uint64_t v = std::stoull(line.substr(eq + 1));
      if (key == "vocab_size") c.vocab_size = v;
      else if (key == "d_model") c.d_model = v;
      else if (key == "n_layers") c.n_layers = v;
      else if (key == "n_heads") c.n_heads = v;
      else if (key == "d_ff") c.d_ff = v;
      else if (key == "max_seq_len") c.max_seq_len = v;
      else if (key == "seed") c.seed = v;
      else throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Fixed tensor order: embeddings, then 12 tensors per layer, then final
/// layer norm and the output head.
struct ParamLayout {
  static constexpr std::size_t kTokEmb = 0;
  static constexpr std::size_t kPosEmb = 1;
  static constexpr std::size_t kPerLayer = 12;
  enum LayerSlot : std::size_t { Ln1G, Ln1B, Wq, Wk, Wv, Wo, Ln2G, Ln2B, W1, B1, W2, B2 };

  std::size_t n_layers;

  std::size_t layer(std::size_t l, LayerSlot s) const { return 2 + l * kPerLayer + s; }
  std::size_t ln_f_gamma() const { return 2 + n_layers * kPerLayer; }
  std::size_t ln_f_beta() const { return ln_f_gamma() + 1; }
  std::size_t head_w() const { return ln_f_gamma() + 2; }
  std::size_t head_b() const { return ln_f_gamma() + 3; }
  std::size_t count() const { return ln_f_gamma() + 4; }
};

struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  ParamLayout layout() const { return {config.n_layers}; }

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw std::out_of_range("model params: no tensor named '" + name + "'");
  }
  const Tensor& get(const std::string& name) const { return tensors[index(name)]; }
  Tensor& get(const std::string& name) { return tensors[index(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.all_finite()) return false;
    return true;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.config == b.config && a.names == b.names && a.tensors == b.tensors;
  }
};

inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ModelParams p;
  p.config = cfg;
  const std::size_t d = cfg.d_model;
  auto add = [&](std::string name, Shape shape, double stddev, double constant = 0.0) {
    Tensor t(std::move(shape), constant);
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& v : t.values()) v = dist(rng);
    }
    p.names.push_back(std::move(name));
    p.tensors.push_back(std::move(t));
  };
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  add("tok_emb", {cfg.vocab_size, d}, 0.1);
  add("pos_emb", {cfg.max_seq_len, d}, 0.1);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    add(pre + "ln1.gamma", {1, d}, 0.0, 1.0);
    add(pre + "ln1.beta", {1, d}, 0.0);
    add(pre + "attn.wq", {d, d}, w_std);
    add(pre + "attn.wk", {d, d}, w_std);
    add(pre + "attn.wv", {d, d}, w_std);
    add(pre + "attn.wo", {d, d}, out_std);
    add(pre + "ln2.gamma", {1, d}, 0.0, 1.0);
    add(pre + "ln2.beta", {1, d}, 0.0);
    add(pre + "ff.w1", {d, cfg.d_ff}, w_std);
    add(pre + "ff.b1", {1, cfg.d_ff}, 0.0);
    add(pre + "ff.w2", {cfg.d_ff, d}, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)) /
                                         std::sqrt(2.0 * static_cast<double>(cfg.n_layers)));
    add(pre + "ff.b2", {1, d}, 0.0);
  }
  add("ln_f.gamma", {1, d}, 0.0, 1.0);
  add("ln_f.beta", {1, d}, 0.0);
  add("head.w", {d, cfg.vocab_size}, w_std);
  add("head.b", {1, cfg.vocab_size}, 0.0);
  return p;
}

/// Parameters placed on a tape. `trainable[i] == false` binds tensor i as a constant.
struct ParamVars {
  std::vector<Var> vars;
  ParamLayout layout;
  const Var& operator[](std::size_t i) const { return vars[i]; }
};

inline ParamVars bind_params(Tape& tape, const ModelParams& p, bool requires_grad) {
  ParamVars pv{{}, p.layout()};
  pv.vars.reserve(p.tensors.size());
  for (const auto& t : p.tensors) pv.vars.push_back(tape.leaf(t, requires_grad));
  return pv;
}

inline ParamVars bind_params(Tape& tape, const ModelParams& p, const std::vector<bool>& trainable) {
  ParamVars pv{{}, p.layout()};
  pv.vars.reserve(p.tensors.size());
  for (std::size_t i = 0; i < p.tensors.size(); ++i)
    pv.vars.push_back(tape.leaf(p.tensors[i], trainable.at(i)));
  return pv;
}

/// One prompt/response pair laid out as [BOS] prompt [SEP] response [EOS].
struct Sequence {
  std::vector<int> tokens;
  /// Per-position next-token target, -1 outside the response region.
  std::vector<int> targets;
  /// Index of the SEP token, the first position that predicts a response token.
  std::size_t response_start = 0;
};

inline Sequence make_sequence(std::span<const int> prompt, std::span<const int> response) {
  Sequence s;
  s.tokens.reserve(prompt.size() + response.size() + 3);
  s.tokens.push_back(special::kBos);
  s.tokens.insert(s.tokens.end(), prompt.begin(), prompt.end());
  s.response_start = s.tokens.size();
  s.tokens.push_back(special::kSep);
  s.tokens.insert(s.tokens.end(), response.begin(), response.end());
  s.tokens.push_back(special::kEos);
  s.targets.assign(s.tokens.size(), -1);
  for (std::size_t t = s.response_start; t + 1 < s.tokens.size(); ++t) s.targets[t] = s.tokens[t + 1];
  return s;
}

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  if (tokens.size() > cfg.max_seq_len) {
    throw std::length_error("sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocab of " +
                              std::to_string(cfg.vocab_size));
    }
  }
}

/// Token (and positional) input embeddings for a full id sequence.
inline Var embed_tokens(const ParamVars& pv, const std::vector<int>& ids) {
  return ad::embed_lookup(pv[ParamLayout::kTokEmb], ids);
}

struct BodyOutput {
  Var final_embeddings;                 // E_L, T x d
  std::vector<Var> layer_embeddings;    // E_1 .. E_L
};

/// Runs the transformer stack over input embeddings (T x d), adding positions.
inline BodyOutput transformer_body(const ModelConfig& cfg, const ParamVars& pv, Var input) {
  const std::size_t T = input.rows();
  if (T > cfg.max_seq_len) {
    throw std::length_error("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  const auto& L = pv.layout;
  Var x = ad::add(input, ad::slice_rows(pv[ParamLayout::kPosEmb], 0, T));
  const std::size_t dh = cfg.d_model / cfg.n_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  BodyOutput out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Var h = ad::layernorm(x, pv[L.layer(l, ParamLayout::Ln1G)], pv[L.layer(l, ParamLayout::Ln1B)]);
    Var q = ad::matmul(h, pv[L.layer(l, ParamLayout::Wq)]);
    Var k = ad::matmul(h, pv[L.layer(l, ParamLayout::Wk)]);
    Var v = ad::matmul(h, pv[L.layer(l, ParamLayout::Wv)]);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      Var scores = ad::scale(ad::matmul_nt(ad::slice_cols(q, c0, c1), ad::slice_cols(k, c0, c1)),
                             attn_scale);
      heads.push_back(ad::matmul(ad::softmax(scores, true), ad::slice_cols(v, c0, c1)));
    }
    Var attn = cfg.n_heads == 1 ? heads.front() : ad::concat_cols(heads);
    x = ad::add(x, ad::matmul(attn, pv[L.layer(l, ParamLayout::Wo)]));
    Var h2 = ad::layernorm(x, pv[L.layer(l, ParamLayout::Ln2G)], pv[L.layer(l, ParamLayout::Ln2B)]);
    Var ff = ad::gelu(ad::add(ad::matmul(h2, pv[L.layer(l, ParamLayout::W1)]), pv[L.layer(l, ParamLayout::B1)]));
    x = ad::add(x, ad::add(ad::matmul(ff, pv[L.layer(l, ParamLayout::W2)]), pv[L.layer(l, ParamLayout::B2)]));
    out.layer_embeddings.push_back(x);
  }
  out.final_embeddings = x;
  return out;
}

/// Final layer norm and output head applied to rows of E_L.
inline Var output_logits(const ParamVars& pv, Var embeddings) {
  const auto& L = pv.layout;
  Var z = ad::layernorm(embeddings, pv[L.ln_f_gamma()], pv[L.ln_f_beta()]);
  return ad::add(ad::matmul(z, pv[L.head_w()]), pv[L.head_b()]);
}

/// Response-position cross-entropy of one sequence; only rows that predict
/// response tokens pass through the output head.
inline Var sequence_loss(const ParamVars& pv, Var final_embeddings, const Sequence& seq) {
  const std::size_t T = seq.tokens.size();
  Var rows = ad::slice_rows(final_embeddings, seq.response_start, T - 1);
  std::vector<int> targets(seq.targets.begin() + static_cast<std::ptrdiff_t>(seq.response_start),
                           seq.targets.end() - 1);
  return ad::cross_entropy(output_logits(pv, rows), targets);
}

/// Loss of one prompt/response pair recorded on the tape of `pv`.
inline Var example_loss(const ModelConfig& cfg, const ParamVars& pv, std::span<const int> prompt,
                        std::span<const int> response) {
  if (response.empty()) throw std::invalid_argument("loss: empty response");
  const Sequence seq = make_sequence(prompt, response);
  check_tokens(cfg, seq.tokens);
  const BodyOutput body = transformer_body(cfg, pv, embed_tokens(pv, seq.tokens));
  return sequence_loss(pv, body.final_embeddings, seq);
}

struct ForwardTrace {
  Tensor logits;                        // T x vocab
  Tensor final_embeddings;              // T x d
  std::vector<Tensor> layer_embeddings;
};

inline ForwardTrace forward(const ModelParams& params, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty input");
  check_tokens(params.config, tokens);
  Tape tape;
  const ParamVars pv = bind_params(tape, params, false);
  const BodyOutput body = transformer_body(params.config, pv, embed_tokens(pv, tokens));
  ForwardTrace tr;
  tr.logits = output_logits(pv, body.final_embeddings).value();
  tr.final_embeddings = body.final_embeddings.value();
  for (const Var& v : body.layer_embeddings) tr.layer_embeddings.push_back(v.value());
  return tr;
}

inline double loss_ce(const ModelParams& params, std::span<const int> prompt,
                      std::span<const int> response) {
  Tape tape;
  const ParamVars pv = bind_params(tape, params, false);
  return example_loss(params.config, pv, prompt, response).value().item();
}

/// Mean of per-example losses.
template <class Range>
double batch_loss(const ModelParams& params, const Range& batch) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& ex : batch) {
    total += loss_ce(params, ex.prompt, ex.response);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("batch_loss: empty batch");
  return total / static_cast<double>(n);
}

inline int argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return static_cast<int>(best);
}

/// Greedy decoding after [BOS] prompt [SEP]; stops at EOS (not returned),
/// `max_new` tokens, or the context limit.
inline std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> prompt,
                                      std::size_t max_new) {
  std::vector<int> ctx;
  ctx.push_back(special::kBos);
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  ctx.push_back(special::kSep);
  check_tokens(params.config, ctx);
  std::vector<int> out;
  if (max_new == 0) return out;
  Tape tape;
  const ParamVars pv = bind_params(tape, params, false);
  while (out.size() < max_new && ctx.size() < params.config.max_seq_len) {
    const BodyOutput body = transformer_body(params.config, pv, embed_tokens(pv, ctx));
    Var last = ad::slice_rows(body.final_embeddings, ctx.size() - 1, ctx.size());
    const int next = argmax_lowest(output_logits(pv, last).value().row(0));
    if (next == special::kEos) break;
    out.push_back(next);
    ctx.push_back(next);
  }
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  static AdamState for_params(const ModelParams& p, AdamConfig cfg = {}) {
    AdamState s;
    s.config = cfg;
    for (const auto& t : p.tensors) {
      s.m.emplace_back(t.shape(), 0.0);
      s.v.emplace_back(t.shape(), 0.0);
    }
    return s;
  }
};

/// true = frozen, one flag per parameter tensor.
using FrozenMask = std::vector<bool>;

inline FrozenMask no_freeze(const ModelParams& p) { return FrozenMask(p.tensors.size(), false); }

/// One optimizer step on the mean loss of `batch`. Frozen tensors are never
/// written. Throws NumericError, leaving params untouched, on a non-finite
/// loss or gradient.
template <class Range>
double train_step(ModelParams& params, const Range& batch, AdamState& opt, double lr,
                  const FrozenMask& frozen) {
  if (!(lr >= 0.0)) throw std::invalid_argument("train_step: lr must be >= 0");
  if (frozen.size() != params.tensors.size()) {
    throw std::invalid_argument("train_step: frozen mask has " + std::to_string(frozen.size()) +
                                " entries for " + std::to_string(params.tensors.size()) + " tensors");
  }
  std::vector<bool> trainable(frozen.size());
  bool any_trainable = false;
  for (std::size_t i = 0; i < frozen.size(); ++i) {
    trainable[i] = !frozen[i];
    any_trainable = any_trainable || trainable[i];
  }
  Tape tape(false);
  const ParamVars pv = bind_params(tape, params, trainable);
  std::vector<Var> losses;
  for (const auto& ex : batch) losses.push_back(example_loss(params.config, pv, ex.prompt, ex.response));
  if (losses.empty()) throw std::invalid_argument("train_step: empty batch");
  Var total = ad::scale(ad::sum(ad::concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
  const double loss = total.value().item();
  if (!std::isfinite(loss)) throw NumericError("train_step: non-finite loss, step aborted");
  if (!any_trainable) return loss;
  tape.backward(total);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (trainable[i] && !tape.grad(pv[i]).all_finite()) {
      throw NumericError("train_step: non-finite gradient for " + params.names[i] + ", step aborted");
    }
  }
  ++opt.step;
  const auto& ac = opt.config;
  const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(opt.step));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (!trainable[i] || !tape.has_grad(pv[i].id)) continue;
    const Tensor& g = tape.grad_buffer(pv[i].id);
    Tensor& w = params.tensors[i];
    Tensor& m = opt.m[i];
    Tensor& v = opt.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = ac.beta1 * m[k] + (1.0 - ac.beta1) * g[k];
      v[k] = ac.beta2 * v[k] + (1.0 - ac.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + ac.eps);
    }
  }
  return loss;
}

/// d loss / d E_L for one pair, unpooled and mean-pooled over positions.
struct EmbeddingGrad {
  Tensor full;    // T x d
  Tensor pooled;  // 1 x d
};

inline EmbeddingGrad grad_wrt_embeddings(const ModelParams& params, std::span<const int> prompt,
                                         std::span<const int> response) {
  if (response.empty()) throw std::invalid_argument("grad_wrt_embeddings: empty response");
  const Sequence seq = make_sequence(prompt, response);
  check_tokens(params.config, seq.tokens);
  Tape tape;
  const ParamVars pv = bind_params(tape, params, false);
  const BodyOutput body = transformer_body(params.config, pv, embed_tokens(pv, seq.tokens));
  // Re-root E_L as a leaf so the backward sweep stops there.
  Var el = tape.leaf(body.final_embeddings.value(), true);
  Var loss = sequence_loss(pv, el, seq);
  tape.backward(loss);
  EmbeddingGrad g;
  g.full = tape.grad(el);
  g.pooled = Tensor::matrix(1, g.full.cols());
  for (std::size_t t = 0; t < g.full.rows(); ++t)
    for (std::size_t j = 0; j < g.full.cols(); ++j) g.pooled[j] += g.full.at(t, j);
  for (double& v : g.pooled.values()) v /= static_cast<double>(g.full.rows());
  return g;
}

/// Gradient of the response cross-entropy with respect to the given E_L rows,
/// written as differentiable tape operations so it can itself be backpropagated.
/// `targets[i]` is the next-token target of row i (-1 = no loss); `count` is the
/// number of loss rows in the whole sequence.
inline Var head_gradient(const ParamVars& pv, Var rows, const std::vector<int>& targets,
                         std::size_t count, double eps = 1e-5) {
  Tape& t = *rows.tape;
  const auto& L = pv.layout;
  const Var gamma = pv[L.ln_f_gamma()];
  const Var beta = pv[L.ln_f_beta()];
  const Var w = pv[L.head_w()];
  const std::size_t r = rows.rows();
  const std::size_t V = w.cols();
  Tensor onehot = Tensor::matrix(r, V);
  Tensor mask = Tensor::matrix(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] < 0) continue;
    onehot.at(i, static_cast<std::size_t>(targets[i])) = 1.0;
    mask[i] = 1.0 / static_cast<double>(count);
  }
  const Var mu = ad::row_mean(rows);
  const Var xc = ad::sub(rows, mu);
  const Var rstd = ad::pow_scalar(ad::add_scalar(ad::row_mean(ad::mul(xc, xc)), eps), -0.5);
  const Var xhat = ad::mul(xc, rstd);
  const Var z = ad::add(ad::mul(xhat, gamma), beta);
  const Var probs = ad::softmax(ad::add(ad::matmul(z, w), pv[L.head_b()]));
  const Var dlogits = ad::mul(ad::sub(probs, t.constant(std::move(onehot))), t.constant(std::move(mask)));
  const Var dxhat = ad::mul(ad::matmul_nt(dlogits, w), gamma);
  const Var centered = ad::sub(dxhat, ad::row_mean(dxhat));
  const Var proj = ad::mul(xhat, ad::row_mean(ad::mul(dxhat, xhat)));
  return ad::mul(rstd, ad::sub(centered, proj));
}

namespace checkpoint {

inline constexpr char kMagic[8] = {'P', 'T', 'R', 'J', 'C', 'K', 'P', '1'};

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}
inline std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  pos += 8;
  return v;
}
}  // namespace detail

/// Layout: magic, u64 header length + ModelConfig text, u64 tensor count, then
/// per tensor u64 name length + name, u64 rank + u64 dims, raw f64 payload.
/// Integers and doubles are little-endian.
inline std::string serialize(const ModelParams& p) {
  std::string out(kMagic, 8);
  const std::string header = p.config.to_text();
  detail::put_u64(out, header.size());
  out += header;
  detail::put_u64(out, p.tensors.size());
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    detail::put_u64(out, p.names[i].size());
    out += p.names[i];
    const Tensor& t = p.tensors[i];
    detail::put_u64(out, t.rank());
    for (auto d : t.shape()) detail::put_u64(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  return out;
}

inline ModelParams deserialize(const std::string& in) {
  if (in.size() < 8 || std::memcmp(in.data(), kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  std::size_t pos = 8;
  const auto hlen = detail::get_u64(in, pos);
  if (pos + hlen > in.size()) throw std::runtime_error("checkpoint: truncated header");
  ModelParams p;
  p.config = ModelConfig::from_text(in.substr(pos, hlen));
  pos += hlen;
  const auto n = detail::get_u64(in, pos);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto nlen = detail::get_u64(in, pos);
    if (pos + nlen > in.size()) throw std::runtime_error("checkpoint: truncated name");
    p.names.push_back(in.substr(pos, nlen));
    pos += nlen;
    const auto rank = detail::get_u64(in, pos);
    Shape shape;
    std::size_t count = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      shape.push_back(detail::get_u64(in, pos));
      count *= shape.back();
    }
    if (pos + count * sizeof(double) > in.size()) throw std::runtime_error("checkpoint: truncated tensor");
    std::vector<double> data(count);
    std::memcpy(data.data(), in.data() + pos, count * sizeof(double));
    pos += count * sizeof(double);
    p.tensors.emplace_back(std::move(shape), std::move(data));
  }
  if (pos != in.size()) throw std::runtime_error("checkpoint: trailing bytes");
  if (p.tensors.size() != p.layout().count()) {
    throw std::runtime_error("checkpoint: tensor count does not match config");
  }
  return p;
}

inline void save(const std::string& path, const ModelParams& p) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  const std::string bytes = serialize(p);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline ModelParams load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace checkpoint

}  // namespace ptrojan
