#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "mnmt/common.hpp"
#include "mnmt/model.hpp"
#include "mnmt/optim.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

// Smoothness-inducing adversarial regularization settings. Defaults mirror
// the fine-tuning procedure this implements: T_x~=1, epsilon=sigma=1e-5,
// eta=1e-3.
struct SmartConfig {
  double lambda_s = 1.0;   // regularizer weight
  double epsilon = 1e-5;   // perturbation ball radius
  double sigma = 1e-5;     // init noise std
  int64_t t_x_tilde = 1;   // inner ascent iterations
  double eta = 1e-3;       // inner ascent step size
  double beta = 0.1;       // trust-region clip width
  bool clip_enabled = true;
  double clip_guard = 1e-8;  // |theta_prev| below this passes the candidate through
  enum class PNorm { inf, two } p_norm = PNorm::inf;
  bool perturb_decoder = false;  // perturb decoder input embeddings too

  void validate() const {
    if (lambda_s < 0.0 || epsilon < 0.0 || sigma < 0.0 || t_x_tilde < 0 || beta < 0.0 ||
        eta < 0.0)
      throw config_error("smart config values must be non-negative");
  }
};

// Symmetrized KL divergence D(P||Q) + D(Q||P) over two probability vectors,
// probabilities clamped at `floor` before the logs.
inline double kl_sym(const std::vector<double>& p, const std::vector<double>& q,
                     double floor = 1e-12) {
  if (p.size() != q.size())
    throw contract_error("kl_sym length mismatch: " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double pv = std::max(p[i], floor);
    const double qv = std::max(q[i], floor);
    acc += (p[i] - q[i]) * (std::log(pv) - std::log(qv));
  }
  return acc;
}

// Elementwise trust-region clip: where |prev| > guard the candidate is pulled
// back so the ratio candidate/prev lies in [1-beta, 1+beta]; near-zero prev
// passes the candidate through unchanged.
template <class T>
T ratio_clip_scalar(T prev, T cand, double beta, double guard) {
  if (std::abs(static_cast<double>(prev)) <= guard) return cand;
  const double ratio = static_cast<double>(cand) / static_cast<double>(prev);
  const double clamped = std::min(std::max(ratio, 1.0 - beta), 1.0 + beta);
  return static_cast<T>(static_cast<double>(prev) * clamped);
}

template <class T>
void ratio_clip(ParamMap<T>& params, const ParamMap<T>& prev, double beta, double guard) {
  for (auto& [name, p] : params) {
    auto it = prev.find(name);
    if (it == prev.end() || it->second.shape() != p.shape())
      throw contract_error("ratio_clip: previous parameters do not match " + name);
    const std::vector<T>& pv = it->second.data();
    std::vector<T>& cv = p.data();
    for (size_t i = 0; i < cv.size(); ++i)
      cv[i] = ratio_clip_scalar(pv[i], cv[i], beta, guard);
  }
}

// The adversarial point: perturbed source embeddings, plus perturbed decoder
// input embeddings when the decoder flag is on.
template <class T>
struct Perturbation {
  Tensor<T> src;
  Tensor<T> tgt;
  bool has_tgt = false;
};

namespace smart_detail {

template <class T>
void clamp_ball_inf(Tensor<T>& x_bar, const Tensor<T>& x, double eps) {
  const T e = static_cast<T>(eps);
  for (int64_t i = 0; i < x.numel(); ++i) {
    const T lo = x.data()[i] - e, hi = x.data()[i] + e;
    x_bar.data()[i] = std::min(std::max(x_bar.data()[i], lo), hi);
  }
}

// per-example projection over the (src [, tgt]) concatenation
template <class T>
void project_ball(Perturbation<T>& p, const Tensor<T>& x_src, const Tensor<T>& x_tgt,
                  const SmartConfig& sc) {
  if (sc.p_norm == SmartConfig::PNorm::inf) {
    clamp_ball_inf(p.src, x_src, sc.epsilon);
    if (p.has_tgt) clamp_ball_inf(p.tgt, x_tgt, sc.epsilon);
    return;
  }
  const int64_t b = x_src.dim(0);
  const int64_t per_src = x_src.numel() / b;
  const int64_t per_tgt = p.has_tgt ? x_tgt.numel() / b : 0;
  for (int64_t e = 0; e < b; ++e) {
    double norm2 = 0.0;
    for (int64_t i = e * per_src; i < (e + 1) * per_src; ++i) {
      const double d = static_cast<double>(p.src.data()[i] - x_src.data()[i]);
      norm2 += d * d;
    }
    for (int64_t i = e * per_tgt; i < (e + 1) * per_tgt; ++i) {
      const double d = static_cast<double>(p.tgt.data()[i] - x_tgt.data()[i]);
      norm2 += d * d;
    }
    const double norm = std::sqrt(norm2);
    if (norm > sc.epsilon) {
      const double s = sc.epsilon / norm;
      for (int64_t i = e * per_src; i < (e + 1) * per_src; ++i)
        p.src.data()[i] = x_src.data()[i] +
                          static_cast<T>(static_cast<double>(p.src.data()[i] - x_src.data()[i]) * s);
      for (int64_t i = e * per_tgt; i < (e + 1) * per_tgt; ++i)
        p.tgt.data()[i] = x_tgt.data()[i] +
                          static_cast<T>(static_cast<double>(p.tgt.data()[i] - x_tgt.data()[i]) * s);
    }
  }
}

}  // namespace smart_detail

// Eq. R_s core: model outputs from clean embeddings vs x_bar, compared with
// symmetrized KL per non-pad target position, averaged over positions then
// over the batch. Differentiable w.r.t. x_bar and theta.
template <class T>
Tensor<T> smoothness_penalty(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                             const Batch& batch, const Tensor<T>& x_bar, const FwdCtx& ctx) {
  Tensor<T> logits_clean = forward(tape, cfg, params, batch, ctx);
  Tensor<T> logits_pert = forward_with_source_embeddings(tape, cfg, params, batch, x_bar, ctx);
  return ops::kl_sym_from_logits(tape, logits_pert, logits_clean, batch.tgt_mask);
}

template <class T>
Tensor<T> smoothness_penalty(Tape<T>& tape, const ModelConfig& cfg, ParamMap<T>& params,
                             const Batch& batch, const Perturbation<T>& pert, const FwdCtx& ctx) {
  Tensor<T> logits_clean = forward(tape, cfg, params, batch, ctx);
  Tensor<T> logits_pert = forward_with_source_embeddings(
      tape, cfg, params, batch, pert.src, ctx, pert.has_tgt ? &pert.tgt : nullptr);
  return ops::kl_sym_from_logits(tape, logits_pert, logits_clean, batch.tgt_mask);
}

// Alg. 2 inner loop: x_bar = x + N(0, sigma^2), then t_x_tilde steps of
// normalized gradient ascent on the penalty w.r.t. x_bar, each followed by
// projection onto the epsilon-ball around x. The final projection always
// runs, so the ball constraint holds exactly on return.
template <class T>
Perturbation<T> perturb_ascent_full(const ModelConfig& cfg, ParamMap<T>& params,
                                    const Batch& batch, const SmartConfig& sc, uint64_t rng_key,
                                    const FwdCtx& ctx) {
  sc.validate();
  // clean embeddings, detached from any tape
  ParamMap<T> frozen_theta = detach_params(params);
  Tensor<T> x_src, x_tgt;
  {
    Tape<T> tmp;
    x_src = source_token_embeddings(tmp, cfg, frozen_theta, batch).detach();
    if (sc.perturb_decoder)
      x_tgt = target_token_embeddings(tmp, cfg, frozen_theta, batch).detach();
  }
  Perturbation<T> pert;
  pert.has_tgt = sc.perturb_decoder;
  pert.src = x_src.clone();
  if (pert.has_tgt) pert.tgt = x_tgt.clone();
  Rng noise(rng_key);
  for (auto& v : pert.src.data()) v += static_cast<T>(sc.sigma * noise.normal());
  if (pert.has_tgt)
    for (auto& v : pert.tgt.data()) v += static_cast<T>(sc.sigma * noise.normal());

  const int64_t b = x_src.dim(0);
  const int64_t per_src = x_src.numel() / b;
  const int64_t per_tgt = pert.has_tgt ? x_tgt.numel() / b : 0;
  for (int64_t iter = 0; iter < sc.t_x_tilde; ++iter) {
    Tape<T> tape;
    Perturbation<T> leaf;
    leaf.has_tgt = pert.has_tgt;
    leaf.src = pert.src.clone();
    leaf.src.ensure_grad();
    tape.watch(leaf.src);
    if (leaf.has_tgt) {
      leaf.tgt = pert.tgt.clone();
      leaf.tgt.ensure_grad();
      tape.watch(leaf.tgt);
    }
    Tensor<T> penalty = smoothness_penalty(tape, cfg, frozen_theta, batch, leaf, ctx);
    tape.backward(penalty);
    // per-example inf-norm-normalized ascent over the joint perturbation
    for (int64_t e = 0; e < b; ++e) {
      T gmax = T(0);
      for (int64_t i = e * per_src; i < (e + 1) * per_src; ++i)
        gmax = std::max(gmax, static_cast<T>(std::abs(static_cast<double>(leaf.src.grad()[i]))));
      for (int64_t i = e * per_tgt; i < (e + 1) * per_tgt; ++i)
        gmax = std::max(gmax, static_cast<T>(std::abs(static_cast<double>(leaf.tgt.grad()[i]))));
      if (gmax <= T(0)) continue;
      for (int64_t i = e * per_src; i < (e + 1) * per_src; ++i)
        pert.src.data()[i] += static_cast<T>(sc.eta) * leaf.src.grad()[i] / gmax;
      for (int64_t i = e * per_tgt; i < (e + 1) * per_tgt; ++i)
        pert.tgt.data()[i] += static_cast<T>(sc.eta) * leaf.tgt.grad()[i] / gmax;
    }
    smart_detail::project_ball(pert, x_src, x_tgt, sc);
  }
  smart_detail::project_ball(pert, x_src, x_tgt, sc);
  return pert;
}

// Encoder-only view of the ascent (the default configuration).
template <class T>
Tensor<T> perturb_ascent(const ModelConfig& cfg, ParamMap<T>& params, const Batch& batch,
                         const SmartConfig& sc, uint64_t rng_key, const FwdCtx& ctx) {
  SmartConfig enc_only = sc;
  enc_only.perturb_decoder = false;
  return perturb_ascent_full(cfg, params, batch, enc_only, rng_key, ctx).src;
}

// One SMART fine-tuning step: perturb with theta snapshot fixed, minimize
// CE + lambda_s * R_s with one Adam update, then trust-region clip against
// the pre-step parameters. lambda_s == 0 degenerates to the plain step.
template <class T>
StepStats smart_step(const ModelConfig& cfg, ParamMap<T>& params, const Batch& batch,
                     AdamState<T>& st, const TrainConfig& tc, const SmartConfig& sc,
                     const std::set<std::string>& frozen = {}) {
  sc.validate();
  if (sc.lambda_s == 0.0 && !sc.clip_enabled) return train_step(cfg, params, batch, st, tc, frozen);

  ParamMap<T> theta_prev;
  if (sc.clip_enabled) theta_prev = clone_params(params);

  StepStats stats;
  const int64_t step = st.t;
  st.lr = lr_at(tc.schedule, tc.warmup_frac, std::min(step + 1, tc.max_steps), tc.base_lr,
                tc.max_steps);
  FwdCtx ctx{/*train=*/true, tc.seed, step, tc.dropout_p};

  if (sc.lambda_s == 0.0) {
    Tape<T> tape;
    Tensor<T> logits = forward(tape, cfg, params, batch, ctx);
    Tensor<T> loss = ops::cross_entropy_label_smoothed(tape, logits, batch.tgt_out,
                                                       tc.label_smoothing, Vocabulary::kPad);
    stats.loss = static_cast<double>(loss.item());
    if (!std::isfinite(stats.loss)) throw numeric_error("training loss is not finite");
    tape.backward(loss);
    clip_grad_norm(params, tc.grad_clip_norm, frozen);
    adam_update(params, st, frozen);
    tape.clear();
  } else {
    const uint64_t noise_key =
        hash_combine(hash_combine(tc.seed, fnv1a("smart.noise")), static_cast<uint64_t>(step));
    Perturbation<T> x_bar = perturb_ascent_full(cfg, params, batch, sc, noise_key, ctx);

    Tape<T> tape;
    Tensor<T> logits_clean = forward(tape, cfg, params, batch, ctx);
    Tensor<T> ce = ops::cross_entropy_label_smoothed(tape, logits_clean, batch.tgt_out,
                                                     tc.label_smoothing, Vocabulary::kPad);
    Tensor<T> logits_pert = forward_with_source_embeddings(
        tape, cfg, params, batch, x_bar.src, ctx, x_bar.has_tgt ? &x_bar.tgt : nullptr);
    Tensor<T> penalty = ops::kl_sym_from_logits(tape, logits_pert, logits_clean, batch.tgt_mask);
    Tensor<T> total =
        ops::add(tape, ce, ops::scale(tape, penalty, static_cast<T>(sc.lambda_s)));
    stats.loss = static_cast<double>(ce.item());
    stats.penalty = static_cast<double>(penalty.item());
    if (!std::isfinite(stats.loss) || !std::isfinite(stats.penalty))
      throw numeric_error("training loss is not finite");
    tape.backward(total);
    clip_grad_norm(params, tc.grad_clip_norm, frozen);
    adam_update(params, st, frozen);
    tape.clear();
  }

  if (sc.clip_enabled) ratio_clip(params, theta_prev, sc.beta, sc.clip_guard);
  stats.lr = st.lr;
  return stats;
}

}  // namespace mnmt
