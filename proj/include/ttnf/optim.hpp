#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ttnf/error.hpp"
#include "ttnf/sampling.hpp"
#include "ttnf/tensor_train.hpp"

namespace ttnf {

// Linear warmup from 0 to lr_max, then geometric decay to lr_min at the last
// step.
struct LrSchedule {
  std::size_t total_steps = 1000;
  double warmup_frac = 0.05;
  double lr_max = 3e-2;
  double lr_min = 3e-4;

  void validate() const {
    detail::require<ConfigError>(total_steps >= 1, "schedule: total_steps must be positive");
    detail::require<ConfigError>(warmup_frac >= 0 && warmup_frac < 1, "schedule: warmup_frac must be in [0, 1)");
    detail::require<ConfigError>(lr_max > 0 && lr_min > 0, "schedule: learning rates must be positive");
    detail::require<ConfigError>(lr_min <= lr_max, "schedule: lr_min must not exceed lr_max");
  }

  // First step of the decay phase. Kept below total_steps so the last step
  // always decays to lr_min.
  std::size_t warmup_steps() const {
    const double w = std::ceil(warmup_frac * static_cast<double>(total_steps) - 1e-9);
    return std::min(static_cast<std::size_t>(std::max(w, 0.0)), total_steps - 1);
  }
};

inline double lr_at(const LrSchedule& s, std::size_t step) {
  if (step >= s.total_steps)
    throw IndexError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + ")");
  if (s.lr_max == 0) return 0.0;
  const std::size_t w = s.warmup_steps();
  if (step < w) return s.lr_max * static_cast<double>(step) / static_cast<double>(w);
  const std::size_t span = s.total_steps - 1 - w;
  if (span == 0 || step == s.total_steps - 1) return s.lr_min;
  const double frac = static_cast<double>(step - w) / static_cast<double>(span);
  return s.lr_max * std::pow(s.lr_min / s.lr_max, frac);
}

enum class LossKind { L1, L2 };

inline const char* to_string(LossKind k) { return k == LossKind::L1 ? "l1" : "l2"; }

// Mean loss over all B*C entries and its gradient with respect to `pred`.
// The L1 subgradient at zero residual is 0.
template <typename T>
std::pair<double, Rows<T>> loss_and_grad(LossKind kind, const Rows<T>& pred, const Rows<T>& target) {
  detail::require<ShapeError>(pred.rows == target.rows && pred.cols == target.cols, "loss: extent mismatch");
  const std::size_t n = pred.data.size();
  detail::require<ShapeError>(n > 0, "loss: empty input");
  Rows<T> grad(pred.rows, pred.cols);
  const T inv_n = T(1) / static_cast<T>(n);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T r = pred.data[i] - target.data[i];
    if (kind == LossKind::L2) {
      acc += static_cast<double>(r) * static_cast<double>(r);
      grad.data[i] = T(2) * r * inv_n;
    } else {
      acc += std::abs(static_cast<double>(r));
      grad.data[i] = (r > 0 ? T(1) : r < 0 ? T(-1) : T(0)) * inv_n;
    }
  }
  return {acc / static_cast<double>(n), std::move(grad)};
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments for every trainable core; identity-masked cores carry none.
template <typename T>
struct AdamState {
  AdamConfig cfg;
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  // Optional per-element learning-rate multipliers, same layout as m.
  std::vector<std::vector<T>> lr_scale;

  AdamState() = default;
  explicit AdamState(const TensorTrain<T>& tt, AdamConfig c = {}) : cfg(c) {
    m.resize(tt.num_dims());
    v.resize(tt.num_dims());
    for (std::size_t k = 0; k < tt.num_dims(); ++k)
      if (!tt.is_identity(k)) {
        m[k].assign(tt.core_size(k), T(0));
        v[k].assign(tt.core_size(k), T(0));
      }
  }
};

namespace detail {

template <typename T>
void adam_update(std::span<T> p, std::span<const T> g, std::span<T> m, std::span<T> v, std::span<const T> scale,
                 const AdamConfig& c, double lr, double bc1, double bc2) {
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const double mh = static_cast<double>(m[i]) / bc1;
    const double vh = static_cast<double>(v[i]) / bc2;
    const double s = scale.empty() ? 1.0 : static_cast<double>(scale[i]);
    p[i] -= static_cast<T>(lr * s * mh / (std::sqrt(vh) + c.eps));
  }
}

}  // namespace detail

// One bias-corrected Adam update in place. Identity-masked cores are skipped.
template <typename T>
void adam_step(AdamState<T>& state, TensorTrain<T>& tt, const GradBuffers<T>& grads, double lr) {
  const std::size_t d = tt.num_dims();
  detail::require<ShapeError>(grads.cores.size() == d && state.m.size() == d, "adam_step: core count mismatch");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, t);
  for (std::size_t k = 0; k < d; ++k) {
    if (tt.is_identity(k)) continue;
    detail::require<ShapeError>(grads.cores[k].size() == tt.core_size(k) && state.m[k].size() == tt.core_size(k),
                                "adam_step: extent mismatch at core " + std::to_string(k));
    std::span<const T> scale;
    if (k < state.lr_scale.size() && !state.lr_scale[k].empty()) scale = state.lr_scale[k];
    detail::adam_update<T>(tt.core(k), grads.cores[k], state.m[k], state.v[k], scale, state.cfg, lr, bc1, bc2);
  }
}

// Adam on a flat parameter vector.
template <typename T>
struct FlatAdam {
  AdamConfig cfg;
  std::size_t step = 0;
  std::vector<T> m, v;

  explicit FlatAdam(std::size_t n, AdamConfig c = {}) : cfg(c), m(n, T(0)), v(n, T(0)) {}

  void update(std::span<T> params, std::span<const T> grads, double lr, std::span<const T> scale = {}) {
    detail::require<ShapeError>(params.size() == m.size() && grads.size() == m.size(), "FlatAdam: extent mismatch");
    ++step;
    const double t = static_cast<double>(step);
    detail::adam_update<T>(params, grads, m, v, scale, cfg, lr, 1.0 - std::pow(cfg.beta1, t),
                           1.0 - std::pow(cfg.beta2, t));
  }
};

}  // namespace ttnf
