#pragma once

// Empirical check of the loss-gap bound and the post-update backdoor-loss
// bound, with their constants estimated as sample suprema.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ptrojan/attack.hpp"
#include "ptrojan/model.hpp"
#include "ptrojan/trigger.hpp"

namespace ptrojan {

struct BoundConstants {
  double beta = 0.0;     // max per-example pooled ||dL/dE_L||
  double eta = 0.0;      // max pairwise distance of pooled E_L
  double G = 0.0;        // max of the clean / poisoned batch gradient norms
  double upsilon = 0.0;  // max ||grad_theta L|| / ||dL/dE_L||
  double Delta = 0.0;    // ||delta theta||
  std::size_t beta_samples = 0;
  std::size_t eta_samples = 0;
  std::size_t G_samples = 0;
  std::size_t upsilon_samples = 0;
  bool has_update = false;

  /// Elementwise maximum; sample counts add up.
  BoundConstants sup(const BoundConstants& o) const {
    BoundConstants r;
    r.beta = std::max(beta, o.beta);
    r.eta = std::max(eta, o.eta);
    r.G = std::max(G, o.G);
    r.upsilon = std::max(upsilon, o.upsilon);
    r.Delta = std::max(Delta, o.Delta);
    r.beta_samples = beta_samples + o.beta_samples;
    r.eta_samples = eta_samples + o.eta_samples;
    r.G_samples = G_samples + o.G_samples;
    r.upsilon_samples = upsilon_samples + o.upsilon_samples;
    r.has_update = has_update || o.has_update;
    return r;
  }
};

inline double parameter_distance(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) throw std::invalid_argument("parameter_distance: layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (!a.tensors[i].same_shape(b.tensors[i])) throw ShapeError("parameter_distance: tensor " + a.names[i]);
    for (std::size_t k = 0; k < a.tensors[i].size(); ++k) {
      const double d = b.tensors[i][k] - a.tensors[i][k];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

namespace detail {

inline std::vector<double> pooled_final_embedding(const ModelParams& params, const Example& ex) {
  const Sequence seq = make_sequence(ex.prompt, ex.response);
  const ForwardTrace tr = forward(params, seq.tokens);
  std::vector<double> m(tr.final_embeddings.cols(), 0.0);
  for (std::size_t t = 0; t < tr.final_embeddings.rows(); ++t)
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += tr.final_embeddings.at(t, j);
  for (double& v : m) v /= static_cast<double>(tr.final_embeddings.rows());
  return m;
}

inline double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

/// Sample-supremum estimates over `clean` and `poisoned` (both used for beta,
/// eta and upsilon). `update_after`, when given, is the model after one update
/// from `params` and sets Delta.
inline BoundConstants estimate_constants(const ModelParams& params, std::span<const Example> clean,
                                         std::span<const Example> poisoned,
                                         const ModelParams* update_after = nullptr) {
  std::vector<Example> all(clean.begin(), clean.end());
  all.insert(all.end(), poisoned.begin(), poisoned.end());
  if (all.size() < 2) throw std::invalid_argument("estimate_constants: need at least 2 samples for eta");
  BoundConstants c;
  std::vector<std::vector<double>> pooled_el;
  std::vector<double> gc(params.config.d_model, 0.0), gb(params.config.d_model, 0.0);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Example& ex = all[i];
    const EmbeddingGrad eg = grad_wrt_embeddings(params, ex.prompt, ex.response);
    const double en = kernels::norm(eg.pooled.values());
    c.beta = std::max(c.beta, en);
    ++c.beta_samples;
    auto& acc_g = i < clean.size() ? gc : gb;
    for (std::size_t j = 0; j < acc_g.size(); ++j) acc_g[j] += eg.pooled[j];
    if (en > 1e-12) {
      const auto pg = detail::parameter_gradient(params, ex.prompt, ex.response);
      c.upsilon = std::max(c.upsilon, kernels::norm(pg) / en);
      ++c.upsilon_samples;
    }
    pooled_el.push_back(detail::pooled_final_embedding(params, ex));
  }
  for (std::size_t i = 0; i < pooled_el.size(); ++i)
    for (std::size_t j = i + 1; j < pooled_el.size(); ++j)
      c.eta = std::max(c.eta, detail::distance(pooled_el[i], pooled_el[j]));
  c.eta_samples = pooled_el.size();
  if (!clean.empty()) {
    for (double& v : gc) v /= static_cast<double>(clean.size());
    c.G = std::max(c.G, kernels::norm(gc));
  }
  if (!poisoned.empty()) {
    for (double& v : gb) v /= static_cast<double>(poisoned.size());
    c.G = std::max(c.G, kernels::norm(gb));
  }
  c.G_samples = all.size();
  if (update_after != nullptr) {
    c.Delta = parameter_distance(params, *update_after);
    c.has_update = true;
  }
  return c;
}

inline void check_cosine(double cosine) {
  if (!(cosine >= -1.0 - 1e-12 && cosine <= 1.0 + 1e-12)) {
    throw std::invalid_argument("cosine " + std::to_string(cosine) + " outside [-1, 1]");
  }
}

/// beta * eta * sqrt(2 - 2 cos)
inline double theorem1_rhs(const BoundConstants& c, double cosine) {
  check_cosine(cosine);
  const double cs = std::clamp(cosine, -1.0, 1.0);
  return c.beta * c.eta * std::sqrt(2.0 - 2.0 * cs);
}

/// L_b + (beta / 2) Delta^2 - upsilon Delta G cos
inline double corollary1_rhs(const BoundConstants& c, double loss_b_before, double cosine) {
  check_cosine(cosine);
  return loss_b_before + 0.5 * c.beta * c.Delta * c.Delta - c.upsilon * c.Delta * c.G * cosine;
}

/// theorem1_rhs on `points` evenly spaced cosines in [-1, 1] is strictly decreasing.
inline bool theorem1_strictly_decreasing(const BoundConstants& c, std::size_t points = 100) {
  if (points < 2) return true;
  double prev = theorem1_rhs(c, -1.0);
  for (std::size_t i = 1; i < points; ++i) {
    const double cs = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(points - 1);
    const double v = theorem1_rhs(c, cs);
    if (!(v < prev)) return false;
    prev = v;
  }
  return true;
}

/// One checked optimizer step of a fine-tuning stage.
struct TrajectoryStep {
  std::size_t step = 0;
  double loss_b = 0.0;        // before the step
  double loss_c = 0.0;        // before the step
  double loss_b_after = 0.0;
  double cosine = 0.0;        // alignment of the sample gradients before the step
  double delta_norm = 0.0;
  double update_cosine = 0.0; // cos(delta theta, -grad_theta L_c), diagnostic
  BoundConstants constants;   // estimated at this step
};

inline std::vector<double> flat_parameter_gradient(const ModelParams& params, std::span<const Example> batch) {
  std::vector<double> total;
  for (const auto& ex : batch) {
    const auto g = detail::parameter_gradient(params, ex.prompt, ex.response);
    if (total.empty()) total.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) total[i] += g[i] / static_cast<double>(batch.size());
  }
  return total;
}

/// Runs `steps` optimizer steps of stage training on `stage_data` and records
/// losses, alignment and constants on the clean / poisoned probe samples.
inline std::vector<TrajectoryStep> record_trajectory(ModelParams params, std::span<const Example> stage_data,
                                                     std::span<const Example> clean_probe,
                                                     std::span<const Example> poisoned_probe,
                                                     const Trigger& trigger, const std::vector<int>& target,
                                                     const TrainConfig& cfg, std::size_t steps) {
  cfg.validate();
  if (stage_data.empty()) throw std::invalid_argument("record_trajectory: empty stage data");
  AdamState opt = AdamState::for_params(params);
  const FrozenMask none = no_freeze(params);
  std::vector<TrajectoryStep> out;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(stage_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<Example> batch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(stage_data[order[cursor++]]);
    }
    TrajectoryStep st;
    st.step = s;
    st.loss_b = batch_loss(params, poisoned_probe);
    st.loss_c = batch_loss(params, clean_probe);
    st.cosine = alignment_cosine(params, clean_probe, trigger, target);
    const auto grad_c = flat_parameter_gradient(params, clean_probe);
    ModelParams before = params;
    train_step(params, batch, opt, cfg.lr, none);
    st.loss_b_after = batch_loss(params, poisoned_probe);
    st.constants = estimate_constants(before, clean_probe, poisoned_probe, &params);
    st.delta_norm = st.constants.Delta;
    std::vector<double> delta;
    delta.reserve(grad_c.size());
    for (std::size_t i = 0; i < params.tensors.size(); ++i)
      for (std::size_t k = 0; k < params.tensors[i].size(); ++k)
        delta.push_back(params.tensors[i][k] - before.tensors[i][k]);
    std::vector<double> neg(grad_c.size());
    for (std::size_t i = 0; i < grad_c.size(); ++i) neg[i] = -grad_c[i];
    const double dn = kernels::norm(delta), gn = kernels::norm(neg);
    st.update_cosine = dn > 0.0 && gn > 0.0 ? kernels::dot(delta, neg) / (dn * gn) : 0.0;
    out.push_back(st);
  }
  return out;
}

struct BoundCheckRow {
  std::size_t step = 0;
  double gap = 0.0;             // |L_b - L_c|
  double theorem_rhs = 0.0;
  bool theorem_holds = false;
  double loss_b_after = 0.0;
  double corollary_rhs = 0.0;
  bool corollary_holds = false;
  double update_cosine = 0.0;
};

struct BoundCheckReport {
  BoundConstants constants;  // suprema over the trajectory
  std::vector<BoundCheckRow> rows;
  double theorem_fraction = 0.0;
  double corollary_fraction = 0.0;
  bool theorem_monotone = false;
};

/// Evaluates both inequalities on every step with constants taken as suprema
/// over the trajectory itself.
inline BoundCheckReport check_bounds(const std::vector<TrajectoryStep>& trajectory) {
  BoundCheckReport rep;
  for (const auto& st : trajectory) rep.constants = rep.constants.sup(st.constants);
  std::size_t th = 0, co = 0;
  for (const auto& st : trajectory) {
    BoundCheckRow r;
    r.step = st.step;
    r.gap = std::abs(st.loss_b - st.loss_c);
    r.theorem_rhs = theorem1_rhs(rep.constants, st.cosine);
    r.theorem_holds = r.gap <= r.theorem_rhs;
    r.loss_b_after = st.loss_b_after;
    r.corollary_rhs = corollary1_rhs(rep.constants, st.loss_b, st.cosine);
    r.corollary_holds = r.loss_b_after <= r.corollary_rhs;
    r.update_cosine = st.update_cosine;
    th += r.theorem_holds;
    co += r.corollary_holds;
    rep.rows.push_back(r);
  }
  if (!trajectory.empty()) {
    rep.theorem_fraction = static_cast<double>(th) / static_cast<double>(trajectory.size());
    rep.corollary_fraction = static_cast<double>(co) / static_cast<double>(trajectory.size());
  }
  rep.theorem_monotone = theorem1_strictly_decreasing(rep.constants);
  return rep;
}

}  // namespace ptrojan
