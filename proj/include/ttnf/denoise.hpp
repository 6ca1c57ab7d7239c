#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "ttnf/dense_tensor.hpp"
#include "ttnf/error.hpp"
#include "ttnf/optim.hpp"
#include "ttnf/rng.hpp"
#include "ttnf/sampling.hpp"
#include "ttnf/tensor_train.hpp"
#include "ttnf/tt_svd.hpp"

namespace ttnf {

enum class NoiseFamily { Normal, Laplace };

inline const char* to_string(NoiseFamily f) { return f == NoiseFamily::Normal ? "normal" : "laplace"; }

inline NoiseFamily parse_noise_family(const std::string& s) {
  if (s == "normal") return NoiseFamily::Normal;
  if (s == "laplace") return NoiseFamily::Laplace;
  throw ConfigError("unknown noise family '" + s + "'");
}

// Additive i.i.d. noise. For Normal, `scale` is the standard deviation. For
// Laplace it is the scale parameter b (std b*sqrt(2)) unless
// `laplace_scale_is_std` is set.
struct NoiseModel {
  NoiseFamily family = NoiseFamily::Normal;
  double scale = 0.0;
  std::uint64_t seed = 0;
  bool laplace_scale_is_std = false;
};

enum class DenoiseMethod { TtSvd, ContractionGd, SamplingV2, SamplingV3 };

inline const char* to_string(DenoiseMethod m) {
  switch (m) {
    case DenoiseMethod::TtSvd: return "tt_svd";
    case DenoiseMethod::ContractionGd: return "contraction_gd";
    case DenoiseMethod::SamplingV2: return "sampling_v2";
    case DenoiseMethod::SamplingV3: return "sampling_v3";
  }
  return "?";
}

inline DenoiseMethod parse_denoise_method(const std::string& s) {
  if (s == "tt_svd") return DenoiseMethod::TtSvd;
  if (s == "contraction_gd") return DenoiseMethod::ContractionGd;
  if (s == "sampling_v2") return DenoiseMethod::SamplingV2;
  if (s == "sampling_v3") return DenoiseMethod::SamplingV3;
  throw ConfigError("unknown denoise method '" + s + "'");
}

struct DenoiseConfig {
  TtShape shape{std::vector<std::size_t>(10, 4), 1};
  std::size_t r_gen = 8;
  std::size_t r_fit = 8;
  double sigma_gt = 1.0;
  NoiseModel noise;
  DenoiseMethod method = DenoiseMethod::SamplingV2;
  std::size_t steps = 1000;
  std::size_t batch = 4096;
  LrSchedule sched{1000, 0.05, 3e-2, 3e-4};
  std::vector<std::uint64_t> seeds{0};
  std::optional<std::size_t> svd_cap;   // TT-SVD rank cap; r_fit when unset
  std::optional<LossKind> loss;         // L2 for Normal, L1 for Laplace when unset
  bool balance_init = true;             // equalize core scales of the TT-SVD start
  bool epoch_permutation = false;       // minibatches without replacement within an epoch
  std::size_t mem_budget = 0;           // 0 selects default_mem_budget()

  LossKind loss_kind() const {
    if (loss) return *loss;
    return noise.family == NoiseFamily::Normal ? LossKind::L2 : LossKind::L1;
  }
  std::size_t cap() const { return svd_cap.value_or(r_fit); }

  void validate() const {
    shape.validate();
    detail::require<ConfigError>(shape.payload == 1, "denoise: payload must be 1");
    detail::require<ConfigError>(r_gen >= 1 && r_fit >= 1 && cap() >= 1, "denoise: ranks must be >= 1");
    detail::require<ConfigError>(sigma_gt > 0, "denoise: sigma_gt must be positive");
    detail::require<ConfigError>(noise.scale >= 0, "denoise: noise scale must be >= 0");
    detail::require<ConfigError>(batch >= 1 && batch <= shape.numel(), "denoise: batch must be in [1, numel]");
    detail::require<ConfigError>(!seeds.empty(), "denoise: at least one seed required");
    if (method != DenoiseMethod::TtSvd && steps > 0) {
      detail::require<ConfigError>(sched.total_steps == steps, "denoise: schedule length must equal steps");
      detail::require<ConfigError>(sched.lr_max >= 0 && sched.lr_min >= 0 && sched.lr_min <= sched.lr_max,
                                   "denoise: invalid learning rates");
    }
  }
};

struct DenoiseRun {
  std::uint64_t seed = 0;
  double rmse = 0;
  double init_rmse = 0;  // RMSE of the starting point (TT-SVD), equal to rmse for TT_SVD
  double seconds = 0;
};

struct DenoiseResult {
  DenoiseConfig config;
  std::vector<DenoiseRun> runs;
  double mean_rmse = 0;
  double std_rmse = 0;
  double seconds = 0;
};

inline constexpr std::uint64_t kStreamGroundTruth = 0;
inline constexpr std::uint64_t kStreamNoise = 1;
inline constexpr std::uint64_t kStreamBatches = 2;


template <typename T>
struct GroundTruth {
  TensorTrain<T> tt;
  DenseTensor<T> dense;
};

// Random tensor train at the clamped-pyramid rank r_gen, and its contraction.
template <typename T>
GroundTruth<T> make_ground_truth(const TtShape& shape, std::size_t r_gen, double sigma, std::uint64_t seed,
                                 std::size_t budget = 0) {
  const TtRank rank = clamp_ranks(max_rank_pyramid(shape), r_gen);
  TensorTrain<T> tt = init_random<T>(shape, rank, sigma, seed);
  DenseTensor<T> dense = contract(tt, detail::budget_or_default(budget));
  return {std::move(tt), std::move(dense)};
}

template <typename T>
DenseTensor<T> add_noise(const DenseTensor<T>& dense, const NoiseModel& noise) {
  detail::require<ConfigError>(noise.scale >= 0, "add_noise: scale must be >= 0");
  DenseTensor<T> out = dense;
  if (noise.scale == 0) return out;
  std::mt19937_64 gen(noise.seed);
  auto data = out.data();
  if (noise.family == NoiseFamily::Normal) {
    std::normal_distribution<double> dist(0.0, noise.scale);
    for (T& x : data) x += static_cast<T>(dist(gen));
  } else {
    const double b = noise.laplace_scale_is_std ? noise.scale / std::sqrt(2.0) : noise.scale;
    std::uniform_real_distribution<double> uni(-0.5, 0.5);
    for (T& x : data) {
      double u;
      do u = uni(gen);
      while (u == -0.5);
      const double s = u > 0 ? 1.0 : u < 0 ? -1.0 : 0.0;
      x += static_cast<T>(-b * s * std::log1p(-2.0 * std::abs(u)));
    }
  }
  return out;
}

namespace detail {

inline std::size_t flat_of(const IndexBatch& batch, std::size_t b, const TtShape& shape) {
  std::size_t flat = 0;
  for (std::size_t k = 0; k < batch.dims; ++k) flat = flat * shape.modes[k] + batch(b, k);
  return flat;
}

inline void unflatten(std::size_t flat, const TtShape& shape, IndexBatch& batch, std::size_t b) {
  for (std::size_t k = shape.num_dims(); k-- > 0;) {
    batch(b, k) = static_cast<std::uint32_t>(flat % shape.modes[k]);
    flat /= shape.modes[k];
  }
}

// Uniform minibatches, i.i.d. with replacement or epoch-wise permutations.
class MinibatchSampler {
 public:
  MinibatchSampler(const TtShape& shape, std::size_t batch, std::uint64_t seed, bool epochs)
      : shape_(shape), batch_(batch), gen_(seed), epochs_(epochs) {}

  IndexBatch next() {
    IndexBatch out(batch_, shape_.num_dims());
    if (!epochs_) {
      for (std::size_t b = 0; b < batch_; ++b)
        for (std::size_t k = 0; k < shape_.num_dims(); ++k) {
          std::uniform_int_distribution<std::uint32_t> d(0, static_cast<std::uint32_t>(shape_.modes[k] - 1));
          out(b, k) = d(gen_);
        }
      return out;
    }
    for (std::size_t b = 0; b < batch_; ++b) {
      if (pos_ == order_.size()) reshuffle();
      unflatten(order_[pos_++], shape_, out, b);
    }
    return out;
  }

 private:
  void reshuffle() {
    if (order_.empty()) {
      order_.resize(shape_.numel());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
    }
    std::shuffle(order_.begin(), order_.end(), gen_);
    pos_ = 0;
  }

  TtShape shape_;
  std::size_t batch_;
  std::mt19937_64 gen_;
  bool epochs_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Fits the noisy observation and returns the estimate as a tensor train.
template <typename T>
TensorTrain<T> fit_denoise(const DenoiseConfig& cfg, const DenseTensor<T>& noisy, std::uint64_t seed,
                           TensorTrain<T>* init_out = nullptr) {
  const std::size_t budget = detail::budget_or_default(cfg.mem_budget);
  const TtRank cap = clamp_ranks(max_rank_pyramid(cfg.shape), cfg.cap());
  TensorTrain<T> tt = tt_svd(noisy, cfg.shape, cap);
  if (cfg.method != DenoiseMethod::TtSvd && cfg.r_fit != cfg.cap()) {
    // Sampling runs train at r_fit; pad or truncate the TT-SVD start.
    const TtRank fit_rank = clamp_ranks(max_rank_pyramid(cfg.shape), cfg.r_fit);
    tt = tt_svd(contract(tt, budget), cfg.shape, fit_rank);
  }
  if (cfg.method == DenoiseMethod::SamplingV3) tt = full_to_reduced(tt);
  if (cfg.method != DenoiseMethod::TtSvd && cfg.balance_init) balance_cores(tt);
  if (init_out) *init_out = tt;
  if (cfg.method == DenoiseMethod::TtSvd || cfg.steps == 0) return tt;

  const LossKind loss = cfg.loss_kind();
  AdamState<T> adam(tt);
  if (cfg.method == DenoiseMethod::ContractionGd) {
    Rows<T> target(noisy.size(), 1);
    std::copy(noisy.data().begin(), noisy.data().end(), target.data.begin());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      DenseTensor<T> full = contract(tt, budget);
      Rows<T> pred(full.size(), 1);
      pred.data = std::move(full.storage());
      auto [value, grad] = loss_and_grad(loss, pred, target);
      GradBuffers<T> g = contract_backward(tt, std::span<const T>(grad.data));
      adam_step(adam, tt, g, lr_at(cfg.sched, step));
      if (!std::isfinite(value)) throw NumericalError("denoise: loss is not finite");
    }
    return tt;
  }

  const SamplerKind kind = cfg.method == DenoiseMethod::SamplingV2 ? SamplerKind::V2 : SamplerKind::V3;
  detail::MinibatchSampler batches(cfg.shape, cfg.batch, stream_seed(seed, kStreamBatches), cfg.epoch_permutation);
  Tape<T> tape;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    IndexBatch idx = batches.next();
    Rows<T> target(cfg.batch, 1);
    for (std::size_t b = 0; b < cfg.batch; ++b) target.data[b] = noisy[detail::flat_of(idx, b, cfg.shape)];
    SampleBatch<T> pred = sample(tt, idx, kind, &tape);
    auto [value, grad] = loss_and_grad(loss, pred, target);
    if (!std::isfinite(value)) throw NumericalError("denoise: loss is not finite");
    GradBuffers<T> g = backward(tape, grad);
    adam_step(adam, tt, g, lr_at(cfg.sched, step));
  }
  return tt;
}

template <typename T = double>
DenoiseRun run_denoise_seed(const DenoiseConfig& cfg, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t budget = detail::budget_or_default(cfg.mem_budget);
  GroundTruth<T> gt =
      make_ground_truth<T>(cfg.shape, cfg.r_gen, cfg.sigma_gt, stream_seed(seed, kStreamGroundTruth), budget);
  NoiseModel noise = cfg.noise;
  noise.seed = stream_seed(seed, kStreamNoise);
  const DenseTensor<T> noisy = add_noise(gt.dense, noise);

  TensorTrain<T> init;
  const TensorTrain<T> fit = fit_denoise(cfg, noisy, seed, &init);
  DenoiseRun run;
  run.seed = seed;
  run.rmse = rmse(contract(fit, budget), gt.dense);
  run.init_rmse = cfg.method == DenoiseMethod::TtSvd ? run.rmse : rmse(contract(init, budget), gt.dense);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

template <typename T = double>
DenoiseResult run_denoise(const DenoiseConfig& cfg) {
  cfg.validate();
  DenoiseResult res;
  res.config = cfg;
  for (auto seed : cfg.seeds) res.runs.push_back(run_denoise_seed<T>(cfg, seed));
  double sum = 0, sq = 0;
  for (const auto& r : res.runs) {
    sum += r.rmse;
    res.seconds += r.seconds;
  }
  res.mean_rmse = sum / static_cast<double>(res.runs.size());
  for (const auto& r : res.runs) sq += (r.rmse - res.mean_rmse) * (r.rmse - res.mean_rmse);
  res.std_rmse = res.runs.size() > 1 ? std::sqrt(sq / static_cast<double>(res.runs.size() - 1)) : 0.0;
  return res;
}

inline const char* denoise_csv_header() { return "method,family,scale,r_gen,r_fit,steps,batch,seed,rmse,seconds"; }

// One CSV row. Wall-clock is written only when `with_seconds` is set, so that
// reruns produce identical files; otherwise the column holds 0.
inline std::string denoise_csv_row(const DenoiseConfig& cfg, const DenoiseRun& run, bool with_seconds) {
  char rm[32], sc[32], sec[32];
  std::snprintf(rm, sizeof rm, "%.17g", run.rmse);
  std::snprintf(sc, sizeof sc, "%.17g", cfg.noise.scale);
  std::snprintf(sec, sizeof sec, "%.3f", with_seconds ? run.seconds : 0.0);
  const std::size_t steps = cfg.method == DenoiseMethod::TtSvd ? 0 : cfg.steps;
  return std::string(to_string(cfg.method)) + "," + to_string(cfg.noise.family) + "," + sc + "," +
         std::to_string(cfg.r_gen) + "," + std::to_string(cfg.r_fit) + "," + std::to_string(steps) + "," +
         std::to_string(cfg.batch) + "," + std::to_string(run.seed) + "," + rm + "," + sec;
}

}  // namespace ttnf
