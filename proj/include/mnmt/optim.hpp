#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "mnmt/common.hpp"
#include "mnmt/corpus.hpp"
#include "mnmt/model.hpp"
#include "mnmt/tensor.hpp"

namespace mnmt {

template <class T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double lr = 1e-3;
  double weight_decay = 0.0;

  static AdamState init(const ParamMap<T>& params, double lr, double weight_decay = 0.0,
                        double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-8) {
    AdamState st;
    st.lr = lr;
    st.weight_decay = weight_decay;
    st.beta1 = beta1;
    st.beta2 = beta2;
    st.eps = eps;
    for (const auto& [name, p] : params) {
      st.m.emplace(name, Tensor<T>::zeros(p.shape()));
      st.v.emplace(name, Tensor<T>::zeros(p.shape()));
    }
    return st;
  }
};

// One Adam step with bias correction. Decoupled weight decay is applied as
// theta -= lr*wd*theta before the Adam delta. Frozen parameters are left
// untouched, moments included. Gradients are read from each parameter's grad
// buffer; t is incremented before use.
template <class T>
void adam_update(ParamMap<T>& params, AdamState<T>& st, const std::set<std::string>& frozen = {}) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (auto& [name, p] : params) {
    if (frozen.count(name)) continue;
    if (!p.has_grad()) throw contract_error("adam_update: parameter has no grad: " + name);
    auto mit = st.m.find(name);
    auto vit = st.v.find(name);
    if (mit == st.m.end() || vit == st.v.end())
      throw contract_error("adam_update: no moment state for " + name);
    if (mit->second.shape() != p.shape())
      throw contract_error("adam_update: moment shape mismatch for " + name);
    T* theta = p.data().data();
    const T* g = p.grad().data();
    T* m = mit->second.data().data();
    T* v = vit->second.data().data();
    const int64_t n = p.numel();
    const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
    const T lr = static_cast<T>(st.lr);
    const T wd = static_cast<T>(st.weight_decay);
    for (int64_t i = 0; i < n; ++i) {
      if (wd != T(0)) theta[i] -= lr * wd * theta[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / static_cast<T>(bc1);
      const T vhat = v[i] / static_cast<T>(bc2);
      theta[i] -= lr * mhat / (std::sqrt(vhat) + static_cast<T>(st.eps));
    }
  }
}

enum class LrSchedule { constant, triangular };

std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

// constant: base_lr everywhere. triangular: linear ramp 0 -> base_lr over the
// first warmup_frac*T steps, then linear decay to 0 at step T.
inline double lr_at(LrSchedule schedule, double warmup_frac, int64_t step, double base_lr,
                    int64_t total_steps) {
  if (step < 1 || step > total_steps)
    throw contract_error("lr_at: step " + std::to_string(step) + " outside [1, " +
                         std::to_string(total_steps) + "]");
  if (schedule == LrSchedule::constant) return base_lr;
  const double w = warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (w >= 1.0 && s <= w) return base_lr * s / w;
  const double span = static_cast<double>(total_steps) - w;
  if (span <= 0.0) return 0.0;
  return base_lr * (static_cast<double>(total_steps) - s) / span;
}

struct TrainConfig {
  int64_t batch_size = 32;
  int64_t max_steps = 1000;  // T
  double label_smoothing = 0.1;
  double dropout_p = 0.1;
  double weight_decay = 0.0;
  double base_lr = 1e-3;
  LrSchedule schedule = LrSchedule::constant;
  double warmup_frac = 0.1;
  double grad_clip_norm = 0.0;  // 0 = off
  uint64_t seed = 0;

  void validate() const {
    if (max_steps < 1) throw config_error("max_steps must be >= 1");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw config_error("label_smoothing must be in [0,1)");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw config_error("dropout_p must be in [0,1)");
  }
};

struct StepStats {
  double loss = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
};

// Global L2-norm clip over all unfrozen grads; no-op when max_norm <= 0.
template <class T>
void clip_grad_norm(ParamMap<T>& params, double max_norm, const std::set<std::string>& frozen) {
  if (max_norm <= 0.0) return;
  double total = 0.0;
  for (auto& [name, p] : params) {
    if (frozen.count(name) || !p.has_grad()) continue;
    for (T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  total = std::sqrt(total);
  if (total <= max_norm) return;
  const T s = static_cast<T>(max_norm / total);
  for (auto& [name, p] : params) {
    if (frozen.count(name) || !p.has_grad()) continue;
    for (T& g : p.grad()) g *= s;
  }
}

// Plain fine-tuning step: label-smoothed cross entropy, backward, Adam.
template <class T>
StepStats train_step(const ModelConfig& cfg, ParamMap<T>& params, const Batch& batch,
                     AdamState<T>& st, const TrainConfig& tc,
                     const std::set<std::string>& frozen = {}) {
  const int64_t step = st.t;  // 0-based step index of this update
  st.lr = lr_at(tc.schedule, tc.warmup_frac, std::min(step + 1, tc.max_steps), tc.base_lr,
                tc.max_steps);
  FwdCtx ctx{/*train=*/true, tc.seed, step, tc.dropout_p};
  Tape<T> tape;
  Tensor<T> logits = forward(tape, cfg, params, batch, ctx);
  Tensor<T> loss = ops::cross_entropy_label_smoothed(tape, logits, batch.tgt_out,
                                                     tc.label_smoothing, Vocabulary::kPad);
  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) throw numeric_error("training loss is not finite");
  tape.backward(loss);
  clip_grad_norm(params, tc.grad_clip_norm, frozen);
  adam_update(params, st, frozen);
  tape.clear();
  StepStats s;
  s.loss = loss_value;
  s.lr = st.lr;
  return s;
}

template <class T>
ParamMap<T> detach_params(const ParamMap<T>& params) {
  ParamMap<T> out;
  for (const auto& [name, p] : params) out.emplace(name, p.detach());
  return out;
}

template <class T>
ParamMap<T> clone_params(const ParamMap<T>& params) {
  ParamMap<T> out;
  for (const auto& [name, p] : params) {
    Tensor<T> c = p.clone();
    if (p.has_grad()) c.ensure_grad();
    out.emplace(name, std::move(c));
  }
  return out;
}

}  // namespace mnmt
