#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "ttnf/dense_tensor.hpp"
#include "ttnf/error.hpp"

namespace ttnf {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline std::size_t sat_mul(std::size_t a, std::size_t b) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a)
    return std::numeric_limits<std::size_t>::max();
  return a * b;
}

inline std::string join(std::span<const std::size_t> xs) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  os << ')';
  return os.str();
}

}  // namespace detail

// Modes M_1..M_D of the virtual tensor plus the payload (values per cell).
struct TtShape {
  std::vector<std::size_t> modes;
  std::size_t payload = 1;

  std::size_t num_dims() const { return modes.size(); }

  // Number of grid cells, saturating at SIZE_MAX.
  std::size_t numel() const {
    std::size_t n = 1;
    for (auto m : modes) n = detail::sat_mul(n, m);
    return n;
  }

  void validate() const {
    detail::require<ShapeError>(!modes.empty(), "TtShape: at least one mode required");
    for (auto m : modes) detail::require<ShapeError>(m >= 1, "TtShape: modes must be positive");
    detail::require<ShapeError>(payload >= 1, "TtShape: payload must be positive");
  }

  bool operator==(const TtShape&) const = default;
};

// TT-rank (R_0, ..., R_D).
struct TtRank {
  std::vector<std::size_t> values;

  std::size_t size() const { return values.size(); }
  std::size_t operator[](std::size_t k) const { return values[k]; }
  std::size_t max() const { return *std::max_element(values.begin(), values.end()); }

  bool operator==(const TtRank&) const = default;
};

inline std::string to_string(const TtRank& r) { return detail::join(r.values); }

// Throws ShapeError unless `rank` is admissible for `shape`: R_0 = 1,
// R_D = payload and R_k <= R_{k-1} M_k, R_k <= M_{k+1} R_{k+1}.
inline void check_rank(const TtShape& shape, const TtRank& rank) {
  shape.validate();
  const std::size_t d = shape.num_dims();
  detail::require<ShapeError>(rank.size() == d + 1, "TtRank: expected D+1 entries");
  detail::require<ShapeError>(rank[0] == 1, "TtRank: R_0 must be 1");
  detail::require<ShapeError>(rank[d] == shape.payload, "TtRank: R_D must equal the payload");
  for (std::size_t k = 1; k < d; ++k) {
    detail::require<ShapeError>(rank[k] >= 1, "TtRank: ranks must be positive");
    detail::require<ShapeError>(rank[k] <= detail::sat_mul(rank[k - 1], shape.modes[k - 1]) &&
                                    rank[k] <= detail::sat_mul(shape.modes[k], rank[k + 1]),
                                "TtRank: rank " + to_string(rank) + " is inconsistent with modes " +
                                    detail::join(shape.modes));
  }
}

// Elementwise maximal admissible rank:
// R_k = min(M_1 ... M_k, payload * M_{k+1} ... M_D).
inline TtRank max_rank_pyramid(const TtShape& shape) {
  shape.validate();
  const std::size_t d = shape.num_dims();
  TtRank r;
  r.values.assign(d + 1, 1);
  r.values[d] = shape.payload;
  std::size_t left = 1;
  for (std::size_t k = 1; k < d; ++k) {
    left = detail::sat_mul(left, shape.modes[k - 1]);
    std::size_t right = shape.payload;
    for (std::size_t i = k; i < d; ++i) right = detail::sat_mul(right, shape.modes[i]);
    r.values[k] = std::min(left, right);
  }
  return r;
}

// Clamps the interior entries of a pyramid at r_max.
inline TtRank clamp_ranks(const TtRank& pyramid, std::size_t r_max) {
  detail::require<ShapeError>(r_max >= 1, "clamp_ranks: r_max must be >= 1");
  TtRank r = pyramid;
  for (std::size_t k = 1; k + 1 < r.values.size(); ++k) r.values[k] = std::min(r.values[k], r_max);
  return r;
}

// Range of cores [first, last] (0-based, inclusive) that carry parameters in
// the reduced parameterization; cores left of `first` have identity left
// matricizations, cores right of `last` identity right matricizations.
struct ReducedWindow {
  std::size_t first = 0;
  std::size_t last = 0;

  bool operator==(const ReducedWindow&) const = default;
};

// Computes the reduced window for a clamped-pyramid rank. Throws
// RankPatternError when the rank is not clamp_ranks(pyramid, r) for any r.
inline ReducedWindow reduced_window(const TtShape& shape, const TtRank& rank) {
  check_rank(shape, rank);
  const std::size_t d = shape.num_dims();
  const TtRank pyramid = max_rank_pyramid(shape);
  std::size_t r = 1;
  for (std::size_t k = 1; k < d; ++k) r = std::max(r, rank[k]);
  if (d > 1 && clamp_ranks(pyramid, r) != rank)
    throw RankPatternError("rank " + to_string(rank) + " is not a clamped pyramid of " +
                           to_string(pyramid));

  // Leading cores with square left matricization R_{k-1} M_k = R_k.
  std::size_t first = 0;
  while (first + 1 < d && rank[first] * shape.modes[first] == rank[first + 1]) ++first;
  // Trailing cores with square right matricization R_{k-1} = M_k R_k.
  std::size_t last = d - 1;
  while (last > first && rank[last] == shape.modes[last] * rank[last + 1]) --last;
  return {first, last};
}

// Per-core gradient storage. Identity-masked cores have an empty buffer.
template <typename T>
struct GradBuffers {
  std::vector<std::vector<T>> cores;

  bool has(std::size_t k) const { return !cores[k].empty(); }
  std::span<T> operator[](std::size_t k) { return cores[k]; }
  std::span<const T> operator[](std::size_t k) const { return cores[k]; }
};

// Block tensor train: D cores of extents R_{k-1} x M_k x R_k stored row-major,
// the last rank R_D carrying the payload.
template <typename T>
class TensorTrain {
 public:
  using value_type = T;

  TensorTrain() = default;

  // Zero-filled cores.
  TensorTrain(TtShape shape, TtRank rank) : shape_(std::move(shape)), rank_(std::move(rank)) {
    check_rank(shape_, rank_);
    const std::size_t d = shape_.num_dims();
    cores_.resize(d);
    for (std::size_t k = 0; k < d; ++k) cores_[k].assign(core_size(k), T(0));
    identity_.assign(d, 0);
  }

  const TtShape& shape() const { return shape_; }
  const TtRank& rank() const { return rank_; }
  std::size_t num_dims() const { return shape_.num_dims(); }
  std::size_t payload() const { return shape_.payload; }

  // {R_{k-1}, M_k, R_k} for 0-based core k.
  std::array<std::size_t, 3> core_extents(std::size_t k) const {
    return {rank_[k], shape_.modes[k], rank_[k + 1]};
  }
  std::size_t core_size(std::size_t k) const {
    return rank_[k] * shape_.modes[k] * rank_[k + 1];
  }

  std::span<T> core(std::size_t k) { return cores_[k]; }
  std::span<const T> core(std::size_t k) const { return cores_[k]; }

  T& at(std::size_t k, std::size_t a, std::size_t m, std::size_t b) {
    return cores_[k][(a * shape_.modes[k] + m) * rank_[k + 1] + b];
  }
  T at(std::size_t k, std::size_t a, std::size_t m, std::size_t b) const {
    return cores_[k][(a * shape_.modes[k] + m) * rank_[k + 1] + b];
  }

  bool is_identity(std::size_t k) const { return identity_[k] != 0; }
  void set_identity_flag(std::size_t k, bool flag) { identity_[k] = flag ? 1 : 0; }
  std::vector<bool> identity_mask() const { return {identity_.begin(), identity_.end()}; }
  bool any_identity() const {
    return std::any_of(identity_.begin(), identity_.end(), [](auto f) { return f != 0; });
  }

  // Number of trainable scalars (identity-masked cores excluded).
  std::size_t num_params() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < num_dims(); ++k)
      if (!is_identity(k)) n += core_size(k);
    return n;
  }
  std::size_t num_stored() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < num_dims(); ++k) n += core_size(k);
    return n;
  }

  bool all_finite() const {
    for (const auto& c : cores_)
      for (const T& x : c)
        if (!std::isfinite(x)) return false;
    return true;
  }

  // Gradient buffers shaped like the trainable cores, zero-filled.
  GradBuffers<T> make_grads() const {
    GradBuffers<T> g;
    g.cores.resize(num_dims());
    for (std::size_t k = 0; k < num_dims(); ++k)
      if (!is_identity(k)) g.cores[k].assign(core_size(k), T(0));
    return g;
  }

  template <typename U>
  TensorTrain<U> cast() const {
    TensorTrain<U> out(shape_, rank_);
    for (std::size_t k = 0; k < num_dims(); ++k) {
      std::transform(cores_[k].begin(), cores_[k].end(), out.core(k).begin(),
                     [](T x) { return static_cast<U>(x); });
      out.set_identity_flag(k, is_identity(k));
    }
    return out;
  }

  bool operator==(const TensorTrain& o) const {
    return shape_ == o.shape_ && rank_ == o.rank_ && cores_ == o.cores_ && identity_ == o.identity_;
  }

 private:
  TtShape shape_;
  TtRank rank_;
  std::vector<std::vector<T>> cores_;
  std::vector<std::uint8_t> identity_;
};

// Standard deviation for i.i.d. core entries such that the contracted tensor
// has scale sigma.
inline double init_core_std(const TtRank& rank, double sigma) {
  detail::require<ShapeError>(sigma > 0, "init_random: sigma must be positive");
  const std::size_t d = rank.size() - 1;
  double log_sum = 0;
  for (std::size_t i = 1; i <= d; ++i) log_sum += std::log(static_cast<double>(rank[i]));
  return std::exp((2.0 * std::log(sigma) - log_sum) / (2.0 * static_cast<double>(d)));
}

// Draws every core entry from N(0, init_core_std^2). Deterministic in seed.
template <typename T = double>
TensorTrain<T> init_random(const TtShape& shape, const TtRank& rank, double sigma,
                           std::uint64_t seed) {
  TensorTrain<T> tt(shape, rank);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, init_core_std(rank, sigma));
  for (std::size_t k = 0; k < tt.num_dims(); ++k)
    for (T& x : tt.core(k)) x = static_cast<T>(dist(gen));
  return tt;
}

// Payload vector at a multi-index (0-based), by chaining core slices left to
// right.
template <typename T, typename Index>
std::vector<T> element(const TensorTrain<T>& tt, std::span<const Index> index) {
  const std::size_t d = tt.num_dims();
  detail::require<IndexError>(index.size() == d, "element: index arity mismatch");
  for (std::size_t k = 0; k < d; ++k) {
    if constexpr (std::is_signed_v<Index>)
      detail::require<IndexError>(index[k] >= 0, "element: negative index");
    detail::require<IndexError>(static_cast<std::size_t>(index[k]) < tt.shape().modes[k],
                                "element: index out of range");
  }
  std::vector<T> v(tt.rank()[1]);
  for (std::size_t b = 0; b < v.size(); ++b) v[b] = tt.at(0, 0, index[0], b);
  for (std::size_t k = 1; k < d; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k);
    std::vector<T> next(rr, T(0));
    const std::size_t i = index[k];
    for (std::size_t a = 0; a < rl; ++a) {
      const T va = v[a];
      const T* row = tt.core(k).data() + (a * m + i) * rr;
      for (std::size_t b = 0; b < rr; ++b) next[b] += va * row[b];
    }
    v = std::move(next);
  }
  return v;
}

template <typename T>
std::vector<T> element(const TensorTrain<T>& tt, std::initializer_list<std::size_t> index) {
  std::vector<std::size_t> idx(index);
  return element<T, std::size_t>(tt, std::span<const std::size_t>(idx));
}

// Full contraction to a dense tensor of extents (M_1, ..., M_D, R_D).
template <typename T>
DenseTensor<T> contract(const TensorTrain<T>& tt, std::size_t budget = default_mem_budget()) {
  const std::size_t d = tt.num_dims();
  const std::size_t total = detail::sat_mul(tt.shape().numel(), tt.payload());
  if (total > budget)
    throw BudgetError("contract: " + std::to_string(total) + " elements exceed the budget of " +
                      std::to_string(budget));
  // Left interface P_k x R_k, row-major; (P x M R) and (P M x R) share memory.
  Buffer<T> left(tt.core(0).begin(), tt.core(0).end());
  std::size_t rows = tt.shape().modes[0];
  for (std::size_t k = 1; k < d; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k);
    Buffer<T> next(rows * m * rr);
    RowMap<T>(next.data(), rows, m * rr).noalias() =
        ConstRowMap<T>(left.data(), rows, rl) * ConstRowMap<T>(tt.core(k).data(), rl, m * rr);
    left = std::move(next);
    rows *= m;
  }
  std::vector<std::size_t> extents = tt.shape().modes;
  extents.push_back(tt.payload());
  return DenseTensor<T>(std::move(extents), std::move(left));
}

// Gradient of sum(upstream .* contract(tt)) with respect to every trainable
// core. `upstream` has the extents of contract(tt).
template <typename T>
GradBuffers<T> contract_backward(const TensorTrain<T>& tt, std::span<const T> upstream) {
  const std::size_t d = tt.num_dims();
  const std::size_t numel = tt.shape().numel();
  const std::size_t payload = tt.payload();
  detail::require<ShapeError>(upstream.size() == numel * payload,
                              "contract_backward: upstream size mismatch");
  const auto& modes = tt.shape().modes;

  // prefix[k] = M_1 ... M_k.
  std::vector<std::size_t> prefix(d + 1, 1);
  for (std::size_t k = 0; k < d; ++k) prefix[k + 1] = prefix[k] * modes[k];

  // Left interfaces: lefts[k] is prefix[k] x R_k (k = 0 is the scalar 1).
  std::vector<Buffer<T>> lefts(d);
  lefts[0] = {T(1)};
  for (std::size_t k = 1; k < d; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k - 1);
    lefts[k].resize(prefix[k] * rr);
    RowMap<T>(lefts[k].data(), prefix[k - 1], m * rr).noalias() =
        ConstRowMap<T>(lefts[k - 1].data(), prefix[k - 1], rl) *
        ConstRowMap<T>(tt.core(k - 1).data(), rl, m * rr);
  }

  GradBuffers<T> grads = tt.make_grads();
  // Environment Z_k (prefix[k+1] x R_{k+1}): upstream contracted with all
  // cores to the right of core k. Starts as the upstream itself.
  Buffer<T> env(upstream.begin(), upstream.end());
  for (std::size_t kk = d; kk-- > 0;) {
    const auto [rl, m, rr] = tt.core_extents(kk);
    if (!tt.is_identity(kk)) {
      // dC_k = L_{k-1}^T (prefix[k] x R_{k-1})^T * Z_k viewed as prefix[k] x (M_k R_k).
      RowMap<T>(grads.cores[kk].data(), rl, m * rr).noalias() =
          ConstRowMap<T>(lefts[kk].data(), prefix[kk], rl).transpose() *
          ConstRowMap<T>(env.data(), prefix[kk], m * rr);
    }
    if (kk == 0) break;
    // Z_{k-1} = Z_k (prefix[k] x M_k R_k) * C_k^T (M_k R_k x R_{k-1}).
    Buffer<T> next(prefix[kk] * rl);
    RowMap<T>(next.data(), prefix[kk], rl).noalias() =
        ConstRowMap<T>(env.data(), prefix[kk], m * rr) *
        ConstRowMap<T>(tt.core(kk).data(), rl, m * rr).transpose();
    env = std::move(next);
  }
  return grads;
}

// Rescales the trainable cores so that their root-mean-square entries are
// equal, without changing the represented tensor. Identity cores are left
// untouched. A tensor train with a zero core is returned unchanged.
template <typename T>
void balance_cores(TensorTrain<T>& tt) {
  std::vector<double> rms;
  std::vector<std::size_t> ks;
  for (std::size_t k = 0; k < tt.num_dims(); ++k) {
    if (tt.is_identity(k)) continue;
    long double acc = 0;
    for (T x : tt.core(k)) acc += static_cast<long double>(x) * x;
    const double r = std::sqrt(static_cast<double>(acc) / static_cast<double>(tt.core_size(k)));
    if (!(r > 0) || !std::isfinite(r)) return;
    rms.push_back(r);
    ks.push_back(k);
  }
  if (ks.size() < 2) return;
  double log_mean = 0;
  for (double r : rms) log_mean += std::log(r);
  log_mean /= static_cast<double>(rms.size());
  // Scale all but the last trainable core, then give the last one the
  // exact remainder so the product of factors is one.
  double prod = 1;
  for (std::size_t j = 0; j + 1 < ks.size(); ++j) {
    const double s = std::exp(log_mean) / rms[j];
    prod *= s;
    for (T& x : tt.core(ks[j])) x = static_cast<T>(x * s);
  }
  for (T& x : tt.core(ks.back())) x = static_cast<T>(x / prod);
}

// Identity core patterns used by the reduced parameterization.
template <typename T>
void fill_left_identity(TensorTrain<T>& tt, std::size_t k) {
  const auto [rl, m, rr] = tt.core_extents(k);
  detail::require<RankPatternError>(rl * m == rr, "left identity needs a square left matricization");
  auto c = tt.core(k);
  std::fill(c.begin(), c.end(), T(0));
  for (std::size_t i = 0; i < rr; ++i) c[i * rr + i] = T(1);
  tt.set_identity_flag(k, true);
}

template <typename T>
void fill_right_identity(TensorTrain<T>& tt, std::size_t k) {
  const auto [rl, m, rr] = tt.core_extents(k);
  detail::require<RankPatternError>(rl == m * rr, "right identity needs a square right matricization");
  auto c = tt.core(k);
  std::fill(c.begin(), c.end(), T(0));
  for (std::size_t i = 0; i < rl; ++i) c[i * rl + i] = T(1);
  tt.set_identity_flag(k, true);
}

// True when every masked core holds exactly the identity pattern expected
// at its side of the reduced window.
template <typename T>
bool identity_cores_valid(const TensorTrain<T>& tt) {
  if (!tt.any_identity()) return true;
  ReducedWindow w;
  try {
    w = reduced_window(tt.shape(), tt.rank());
  } catch (const RankPatternError&) {
    return false;
  }
  for (std::size_t k = 0; k < tt.num_dims(); ++k) {
    if (!tt.is_identity(k)) continue;
    if (k >= w.first && k <= w.last) return false;
    const auto [rl, m, rr] = tt.core_extents(k);
    const std::size_t n = k < w.first ? rr : rl;
    auto c = tt.core(k);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (c[i * n + j] != (i == j ? T(1) : T(0))) return false;
  }
  return true;
}

// True when the identity mask is exactly the complement of the reduced window.
template <typename T>
bool is_reduced(const TensorTrain<T>& tt) {
  ReducedWindow w;
  try {
    w = reduced_window(tt.shape(), tt.rank());
  } catch (const RankPatternError&) {
    return false;
  }
  for (std::size_t k = 0; k < tt.num_dims(); ++k)
    if (tt.is_identity(k) != (k < w.first || k > w.last)) return false;
  return true;
}

// Converts a clamped-pyramid tensor train to the reduced parameterization in
// one pass: square matricizations left of the window are absorbed into their
// right neighbour, those right of the window into their left neighbour, and
// replaced by identities.
template <typename T>
TensorTrain<T> full_to_reduced(const TensorTrain<T>& tt) {
  const ReducedWindow w = reduced_window(tt.shape(), tt.rank());
  TensorTrain<T> out = tt;
  for (std::size_t k = 0; k < w.first; ++k) {
    if (!out.is_identity(k)) {
      const auto [rl, m, rr] = out.core_extents(k);
      const auto [rl2, m2, rr2] = out.core_extents(k + 1);
      std::vector<T> next(out.core_size(k + 1));
      RowMap<T>(next.data(), rl2, m2 * rr2).noalias() =
          ConstRowMap<T>(out.core(k).data(), rl * m, rr) *
          ConstRowMap<T>(out.core(k + 1).data(), rl2, m2 * rr2);
      std::copy(next.begin(), next.end(), out.core(k + 1).begin());
    }
    fill_left_identity(out, k);
  }
  for (std::size_t k = out.num_dims() - 1; k > w.last; --k) {
    if (!out.is_identity(k)) {
      const auto [rl, m, rr] = out.core_extents(k);
      const auto [rl0, m0, rr0] = out.core_extents(k - 1);
      std::vector<T> next(out.core_size(k - 1));
      RowMap<T>(next.data(), rl0 * m0, rr0).noalias() =
          ConstRowMap<T>(out.core(k - 1).data(), rl0 * m0, rr0) *
          ConstRowMap<T>(out.core(k).data(), rl, m * rr);
      std::copy(next.begin(), next.end(), out.core(k - 1).begin());
    }
    fill_right_identity(out, k);
  }
  return out;
}

}  // namespace ttnf
