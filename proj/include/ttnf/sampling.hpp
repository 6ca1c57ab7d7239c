#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ttnf/dense_tensor.hpp"
#include "ttnf/error.hpp"
#include "ttnf/memory.hpp"
#include "ttnf/tensor_train.hpp"

namespace ttnf {

// B multi-indices into the virtual tensor, stored row-major (B x D).
struct IndexBatch {
  std::size_t count = 0;
  std::size_t dims = 0;
  std::vector<std::uint32_t> indices;

  IndexBatch() = default;
  IndexBatch(std::size_t b, std::size_t d) : count(b), dims(d), indices(b * d, 0) {}

  std::uint32_t& operator()(std::size_t b, std::size_t k) { return indices[b * dims + k]; }
  std::uint32_t operator()(std::size_t b, std::size_t k) const { return indices[b * dims + k]; }
  std::span<const std::uint32_t> row(std::size_t b) const {
    return {indices.data() + b * dims, dims};
  }

  void validate(const TtShape& shape) const {
    detail::require<ShapeError>(count >= 1, "IndexBatch: empty batch");
    detail::require<ShapeError>(dims == shape.num_dims(), "IndexBatch: arity does not match the shape");
    detail::require<ShapeError>(indices.size() == count * dims, "IndexBatch: storage size mismatch");
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t k = 0; k < dims; ++k)
        if ((*this)(b, k) >= shape.modes[k])
          throw IndexError("IndexBatch: index " + std::to_string((*this)(b, k)) + " out of range for mode " +
                           std::to_string(k));
  }
};

// Dense row-major B x C block of scalars with tracked storage.
template <typename T>
struct Rows {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Buffer<T> data;

  Rows() = default;
  Rows(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  std::span<T> row(std::size_t b) { return {data.data() + b * cols, cols}; }
  std::span<const T> row(std::size_t b) const { return {data.data() + b * cols, cols}; }
  T& operator()(std::size_t b, std::size_t c) { return data[b * cols + c]; }
  T operator()(std::size_t b, std::size_t c) const { return data[b * cols + c]; }

  RowMap<T> matrix() { return RowMap<T>(data.data(), rows, cols); }
  ConstRowMap<T> matrix() const { return ConstRowMap<T>(data.data(), rows, cols); }

  void release() {
    Buffer<T>().swap(data);
    rows = cols = 0;
  }
};

// Sampled payloads, row b belonging to index row b.
template <typename T>
using SampleBatch = Rows<T>;

// `forward[j]` is the input row placed at output row j; `inverse` undoes it.
struct Permutation {
  std::vector<std::uint32_t> forward;
  std::vector<std::uint32_t> inverse;

  static Permutation identity(std::size_t n) {
    Permutation p;
    p.forward.resize(n);
    std::iota(p.forward.begin(), p.forward.end(), 0u);
    p.inverse = p.forward;
    return p;
  }

  static Permutation from_forward(std::vector<std::uint32_t> fwd) {
    Permutation p;
    p.inverse.resize(fwd.size());
    for (std::size_t j = 0; j < fwd.size(); ++j) p.inverse[fwd[j]] = static_cast<std::uint32_t>(j);
    p.forward = std::move(fwd);
    return p;
  }

  std::size_t size() const { return forward.size(); }

  bool valid() const {
    if (forward.size() != inverse.size()) return false;
    for (std::size_t j = 0; j < forward.size(); ++j)
      if (forward[j] >= inverse.size() || inverse[forward[j]] != j) return false;
    return true;
  }
};

enum class SamplerKind { V1, V2, V3, DenseGather };

inline const char* to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::V1: return "v1";
    case SamplerKind::V2: return "v2";
    case SamplerKind::V3: return "v3";
    case SamplerKind::DenseGather: return "dense";
  }
  return "?";
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
  if (s == "v1") return SamplerKind::V1;
  if (s == "v2") return SamplerKind::V2;
  if (s == "v3") return SamplerKind::V3;
  if (s == "dense" || s == "dense_gather") return SamplerKind::DenseGather;
  throw ConfigError("unknown sampler kind '" + s + "'");
}

namespace detail {

// Stable counting sort of `keys` in [0, m): returns the forward permutation
// and writes group offsets (size m + 1) into `starts`.
inline std::vector<std::uint32_t> group_by_mode(std::span<const std::uint32_t> keys, std::size_t m,
                                                std::vector<std::uint32_t>& starts) {
  starts.assign(m + 1, 0);
  for (auto k : keys) ++starts[k + 1];
  for (std::size_t i = 0; i < m; ++i) starts[i + 1] += starts[i];
  std::vector<std::uint32_t> fill(starts.begin(), starts.end() - 1);
  std::vector<std::uint32_t> perm(keys.size());
  for (std::size_t j = 0; j < keys.size(); ++j) perm[fill[keys[j]]++] = static_cast<std::uint32_t>(j);
  return perm;
}

template <typename T>
using SliceMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutSliceMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// Core slice C[:, m, :] as an R_l x R_r matrix view.
template <typename T>
SliceMap<T> core_slice(std::span<const T> core, std::size_t rl, std::size_t modes, std::size_t rr,
                       std::size_t m) {
  return SliceMap<T>(core.data() + m * rr, rl, rr, Eigen::OuterStride<>(modes * rr));
}

template <typename T>
MutSliceMap<T> core_slice(std::span<T> core, std::size_t rl, std::size_t modes, std::size_t rr,
                          std::size_t m) {
  return MutSliceMap<T>(core.data() + m * rr, rl, rr, Eigen::OuterStride<>(modes * rr));
}

// Grouped product: rows [starts[m], starts[m+1]) of `in` times slice m.
template <typename T>
void grouped_product(std::span<const T> core, std::size_t rl, std::size_t modes, std::size_t rr,
                     const std::vector<std::uint32_t>& starts, const Rows<T>& in, Rows<T>& out) {
  for (std::size_t m = 0; m < modes; ++m) {
    const std::size_t s = starts[m], e = starts[m + 1];
    if (s == e) continue;
    out.matrix().middleRows(s, e - s).noalias() =
        in.matrix().middleRows(s, e - s) * core_slice(core, rl, modes, rr, m);
  }
}

}  // namespace detail

// Batched-indexed matrix-vector permuted product. Rows of `v` are grouped by
// their mode index (stable), and each group is multiplied by its core slice.
// Output row j equals v[p.forward[j]] * core[:, i[p.forward[j]], :].
template <typename T>
std::pair<Rows<T>, Permutation> bimvp(std::span<const T> core, std::array<std::size_t, 3> extents,
                                      std::span<const std::uint32_t> i, const Rows<T>& v) {
  const auto [rl, m, rr] = extents;
  detail::require<ShapeError>(core.size() == rl * m * rr, "bimvp: core size mismatch");
  detail::require<ShapeError>(v.rows == i.size() && v.cols == rl, "bimvp: v must be B x R_l");
  for (auto x : i) detail::require<IndexError>(x < m, "bimvp: mode index out of range");
  std::vector<std::uint32_t> starts;
  auto fwd = detail::group_by_mode(i, m, starts);
  Rows<T> grouped(v.rows, rl);
  for (std::size_t j = 0; j < v.rows; ++j) {
    auto src = v.row(fwd[j]);
    std::copy(src.begin(), src.end(), grouped.row(j).begin());
  }
  Rows<T> out(v.rows, rr);
  detail::grouped_product(core, rl, m, rr, starts, grouped, out);
  return {std::move(out), Permutation::from_forward(std::move(fwd))};
}

// One BIMVP step kept for the reverse pass.
template <typename T>
struct ChainStep {
  std::size_t core = 0;
  std::vector<std::uint32_t> perm;    // row j of this step's input came from row perm[j]
  std::vector<std::uint32_t> starts;  // group offsets by mode index
  Rows<T> input;                      // grouped input rows, B x R_{k-1}
};

// Forward context for backward(). Holds a pointer to the tensor train, which
// must outlive the tape.
template <typename T>
struct Tape {
  SamplerKind kind = SamplerKind::V2;
  const TensorTrain<T>* tt = nullptr;
  IndexBatch batch;
  bool cached = false;

  // v2 / v3
  std::size_t first = 0, last = 0;
  std::vector<std::uint32_t> left_index;    // row of core `first` (R_{first-1} axis)
  std::vector<std::uint32_t> right_offset;  // column offset into R_last
  Permutation order;                        // final row j holds sample order.forward[j]
  std::vector<ChainStep<T>> steps;

  // v1
  std::vector<Rows<T>> slices;        // B x (R_{k-1} R_k) per core
  std::vector<Rows<T>> chain_inputs;  // B x R_{k-1} input to core k (k >= 1)
};

namespace detail {

inline std::size_t budget_or_default(std::size_t b) { return b ? b : default_mem_budget().load(); }

// BIMVP chain over cores [first, last] with Alg.-1 permutation bookkeeping.
// The left index selects the first-core row, the right offset the payload
// window within R_{last}.
template <typename T>
SampleBatch<T> chain_forward(const TensorTrain<T>& tt, const IndexBatch& batch, std::size_t first,
                             std::size_t last, std::span<const std::uint32_t> left_index,
                             std::span<const std::uint32_t> right_offset, Tape<T>* tape) {
  const std::size_t bsz = batch.count;
  const std::size_t payload = tt.payload();

  if (first == last) {
    // Direct indexing of the single parameterized core.
    const auto [rl, m, rr] = tt.core_extents(first);
    SampleBatch<T> out(bsz, payload);
    auto core = tt.core(first);
    for (std::size_t b = 0; b < bsz; ++b) {
      const T* src = core.data() + (left_index[b] * m + batch(b, first)) * rr + right_offset[b];
      std::copy(src, src + payload, out.row(b).begin());
    }
    if (tape) tape->order = Permutation::identity(bsz);
    return out;
  }

  Permutation order = Permutation::identity(bsz);
  Rows<T> v;
  {
    const auto [rl, m, rr] = tt.core_extents(first);
    v = Rows<T>(bsz, rr);
    auto core = tt.core(first);
    for (std::size_t b = 0; b < bsz; ++b) {
      const T* src = core.data() + (left_index[b] * m + batch(b, first)) * rr;
      std::copy(src, src + rr, v.row(b).begin());
    }
  }
  std::vector<std::uint32_t> aligned(bsz);
  for (std::size_t k = first + 1; k <= last; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k);
    for (std::size_t j = 0; j < bsz; ++j) aligned[j] = batch(order.forward[j], k);

    ChainStep<T> step;
    step.core = k;
    step.perm = group_by_mode(aligned, m, step.starts);
    step.input = Rows<T>(bsz, rl);
    for (std::size_t j = 0; j < bsz; ++j) {
      auto src = v.row(step.perm[j]);
      std::copy(src.begin(), src.end(), step.input.row(j).begin());
    }
    v.release();
    Rows<T> out(bsz, rr);
    grouped_product(tt.core(k), rl, m, rr, step.starts, step.input, out);
    v = std::move(out);

    // pi <- pi(pi_k), sigma <- sigma_k(sigma).
    std::vector<std::uint32_t> fwd(bsz), inv(bsz);
    for (std::size_t j = 0; j < bsz; ++j) fwd[j] = order.forward[step.perm[j]];
    std::vector<std::uint32_t> step_inv(bsz);
    for (std::size_t j = 0; j < bsz; ++j) step_inv[step.perm[j]] = static_cast<std::uint32_t>(j);
    for (std::size_t b = 0; b < bsz; ++b) inv[b] = step_inv[order.inverse[b]];
    order.forward = std::move(fwd);
    order.inverse = std::move(inv);

    if (tape) tape->steps.push_back(std::move(step));
  }

  SampleBatch<T> out(bsz, payload);
  for (std::size_t b = 0; b < bsz; ++b) {
    auto src = v.row(order.inverse[b]);
    std::copy(src.begin() + right_offset[b], src.begin() + right_offset[b] + payload,
              out.row(b).begin());
  }
  if (tape) tape->order = std::move(order);
  return out;
}

template <typename T>
void chain_backward(const Tape<T>& tape, const Rows<T>& upstream, GradBuffers<T>& grads) {
  const TensorTrain<T>& tt = *tape.tt;
  const IndexBatch& batch = tape.batch;
  const std::size_t bsz = batch.count;
  const std::size_t payload = tt.payload();
  const std::size_t first = tape.first, last = tape.last;

  if (first == last) {
    if (tt.is_identity(first)) return;
    const auto [rl, m, rr] = tt.core_extents(first);
    auto g = grads[first];
    for (std::size_t b = 0; b < bsz; ++b) {
      T* dst = g.data() + (tape.left_index[b] * m + batch(b, first)) * rr + tape.right_offset[b];
      auto src = upstream.row(b);
      for (std::size_t c = 0; c < payload; ++c) dst[c] += src[c];
    }
    return;
  }

  // Gradient w.r.t. the chain output, rows in final (permuted) order.
  Rows<T> g(bsz, tt.rank()[last + 1]);
  for (std::size_t j = 0; j < bsz; ++j) {
    const std::size_t b = tape.order.forward[j];
    auto src = upstream.row(b);
    std::copy(src.begin(), src.end(), g.row(j).begin() + tape.right_offset[b]);
  }
  for (std::size_t s = tape.steps.size(); s-- > 0;) {
    const ChainStep<T>& step = tape.steps[s];
    const std::size_t k = step.core;
    const auto [rl, m, rr] = tt.core_extents(k);
    auto core = tt.core(k);
    Rows<T> g_in(bsz, rl);
    for (std::size_t mi = 0; mi < m; ++mi) {
      const std::size_t a = step.starts[mi], e = step.starts[mi + 1];
      if (a == e) continue;
      if (!tt.is_identity(k))
        core_slice(grads[k], rl, m, rr, mi).noalias() +=
            step.input.matrix().middleRows(a, e - a).transpose() * g.matrix().middleRows(a, e - a);
      g_in.matrix().middleRows(a, e - a).noalias() =
          g.matrix().middleRows(a, e - a) * core_slice(core, rl, m, rr, mi).transpose();
    }
    g.release();
    // Undo the step's grouping permutation.
    Rows<T> prev(bsz, rl);
    for (std::size_t j = 0; j < bsz; ++j) {
      auto src = g_in.row(j);
      std::copy(src.begin(), src.end(), prev.row(step.perm[j]).begin());
    }
    g = std::move(prev);
  }
  // Rows are back in the original sample order at the first core.
  if (tt.is_identity(first)) return;
  const auto [rl, m, rr] = tt.core_extents(first);
  auto gc = grads[first];
  for (std::size_t b = 0; b < bsz; ++b) {
    T* dst = gc.data() + (tape.left_index[b] * m + batch(b, first)) * rr;
    auto src = g.row(b);
    for (std::size_t c = 0; c < rr; ++c) dst[c] += src[c];
  }
}

}  // namespace detail

// v1: replicate one core slice per sample and dimension, then chain batched
// vector-matrix products.
template <typename T>
SampleBatch<T> sample_v1(const TensorTrain<T>& tt, const IndexBatch& batch, Tape<T>* tape = nullptr,
                         std::size_t budget = 0) {
  batch.validate(tt.shape());
  const std::size_t d = tt.num_dims();
  const std::size_t bsz = batch.count;
  std::size_t need = 0;
  for (std::size_t k = 0; k < d; ++k) need += bsz * tt.rank()[k] * tt.rank()[k + 1];
  if (need > detail::budget_or_default(budget))
    throw BudgetError("sample_v1: slice replication needs " + std::to_string(need) + " elements");

  std::vector<Rows<T>> slices(d);
  for (std::size_t k = 0; k < d; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k);
    slices[k] = Rows<T>(bsz, rl * rr);
    auto core = tt.core(k);
    for (std::size_t b = 0; b < bsz; ++b) {
      T* dst = slices[k].row(b).data();
      const std::size_t i = batch(b, k);
      for (std::size_t a = 0; a < rl; ++a) {
        const T* src = core.data() + (a * m + i) * rr;
        std::copy(src, src + rr, dst + a * rr);
      }
    }
  }

  std::vector<Rows<T>> inputs;
  Rows<T> v(bsz, tt.rank()[1]);
  std::copy(slices[0].data.begin(), slices[0].data.end(), v.data.begin());
  for (std::size_t k = 1; k < d; ++k) {
    const auto [rl, m, rr] = tt.core_extents(k);
    Rows<T> out(bsz, rr);
    for (std::size_t b = 0; b < bsz; ++b) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> o(out.row(b).data(), rr);
      o.noalias() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(v.row(b).data(), rl) *
                    ConstRowMap<T>(slices[k].row(b).data(), rl, rr);
    }
    if (tape)
      inputs.push_back(std::move(v));
    else
      v.release();
    v = std::move(out);
  }
  if (tape) {
    tape->kind = SamplerKind::V1;
    tape->tt = &tt;
    tape->batch = batch;
    tape->slices = std::move(slices);
    tape->chain_inputs = std::move(inputs);
    tape->cached = true;
  }
  return v;
}

// v2: Alg.-1 chain of BIMVP steps over every core.
template <typename T>
SampleBatch<T> sample_v2(const TensorTrain<T>& tt, const IndexBatch& batch, Tape<T>* tape = nullptr) {
  batch.validate(tt.shape());
  const std::vector<std::uint32_t> zeros(batch.count, 0);
  if (tape) {
    *tape = Tape<T>{};
    tape->kind = SamplerKind::V2;
    tape->tt = &tt;
    tape->batch = batch;
    tape->first = 0;
    tape->last = tt.num_dims() - 1;
    tape->left_index = zeros;
    tape->right_offset = zeros;
    tape->cached = true;
  }
  return detail::chain_forward(tt, batch, 0, tt.num_dims() - 1, zeros, zeros, tape);
}

// Left row indices and right payload offsets obtained by propagating the
// multi-index through the identity cores outside the window.
struct PropagatedIndices {
  std::vector<std::uint32_t> left;
  std::vector<std::uint32_t> right;
};

inline PropagatedIndices propagate_indices(const TtShape& shape, const TtRank& rank,
                                           const ReducedWindow& w, const IndexBatch& batch) {
  PropagatedIndices p{std::vector<std::uint32_t>(batch.count, 0),
                      std::vector<std::uint32_t>(batch.count, 0)};
  for (std::size_t b = 0; b < batch.count; ++b) {
    std::size_t left = 0, right = 0;
    for (std::size_t k = 0; k < w.first; ++k) left = left * shape.modes[k] + batch(b, k);
    for (std::size_t k = w.last + 1; k < shape.num_dims(); ++k) right += batch(b, k) * rank[k + 1];
    p.left[b] = static_cast<std::uint32_t>(left);
    p.right[b] = static_cast<std::uint32_t>(right);
  }
  return p;
}

// v3: sampling from the reduced parameterization. Identity cores are skipped
// via index propagation; only cores in the reduced window are multiplied.
template <typename T>
SampleBatch<T> sample_v3(const TensorTrain<T>& tt, const IndexBatch& batch, Tape<T>* tape = nullptr) {
  batch.validate(tt.shape());
  if (!is_reduced(tt))
    throw RankPatternError("sample_v3: tensor train is not in the reduced parameterization");
  const ReducedWindow w = reduced_window(tt.shape(), tt.rank());
  PropagatedIndices idx = propagate_indices(tt.shape(), tt.rank(), w, batch);
  if (tape) {
    *tape = Tape<T>{};
    tape->kind = SamplerKind::V3;
    tape->tt = &tt;
    tape->batch = batch;
    tape->first = w.first;
    tape->last = w.last;
    tape->left_index = idx.left;
    tape->right_offset = idx.right;
    tape->cached = true;
  }
  return detail::chain_forward(tt, batch, w.first, w.last, idx.left, idx.right, tape);
}

// Gather rows of a dense (M_1, ..., M_D, R_D) tensor.
template <typename T>
SampleBatch<T> gather_dense(const DenseTensor<T>& dense, const IndexBatch& batch) {
  detail::require<ShapeError>(dense.rank() == batch.dims + 1, "gather_dense: extent mismatch");
  const std::size_t payload = dense.extents().back();
  SampleBatch<T> out(batch.count, payload);
  for (std::size_t b = 0; b < batch.count; ++b) {
    std::size_t flat = 0;
    for (std::size_t k = 0; k < batch.dims; ++k) {
      const std::size_t i = batch(b, k);
      if (i >= dense.extents()[k]) throw IndexError("gather_dense: index out of range");
      flat = flat * dense.extents()[k] + i;
    }
    const T* src = dense.data().data() + flat * payload;
    std::copy(src, src + payload, out.row(b).begin());
  }
  return out;
}

// Dispatch on the sampler kind. A non-null tape is filled for backward().
template <typename T>
SampleBatch<T> sample(const TensorTrain<T>& tt, const IndexBatch& batch, SamplerKind kind,
                      Tape<T>* tape = nullptr, std::size_t budget = 0) {
  switch (kind) {
    case SamplerKind::V1: return sample_v1(tt, batch, tape, budget);
    case SamplerKind::V2: return sample_v2(tt, batch, tape);
    case SamplerKind::V3: return sample_v3(tt, batch, tape);
    case SamplerKind::DenseGather: {
      batch.validate(tt.shape());
      auto out = gather_dense(contract(tt, detail::budget_or_default(budget)), batch);
      if (tape) {
        *tape = Tape<T>{};
        tape->kind = kind;
        tape->tt = &tt;
        tape->batch = batch;
        tape->cached = true;
      }
      return out;
    }
  }
  throw Error("sample: unknown sampler kind");
}

// Accumulates d(sum_b upstream_b . values_b)/d(core) into `grads` for every
// trainable core. Accumulation runs in a fixed order (grouped BIMVP order for
// v2/v3, batch order for v1 and the first core), so results are
// bit-reproducible.
template <typename T>
void backward_into(const Tape<T>& tape, const Rows<T>& upstream, GradBuffers<T>& grads) {
  detail::require<Error>(tape.cached && tape.tt != nullptr, "backward: tape has no forward context");
  const TensorTrain<T>& tt = *tape.tt;
  const std::size_t bsz = tape.batch.count;
  detail::require<ShapeError>(upstream.rows == bsz && upstream.cols == tt.payload(),
                              "backward: upstream must be B x R_D");
  detail::require<ShapeError>(grads.cores.size() == tt.num_dims(), "backward: gradient buffer mismatch");

  switch (tape.kind) {
    case SamplerKind::V2:
    case SamplerKind::V3:
      detail::chain_backward(tape, upstream, grads);
      return;
    case SamplerKind::V1: {
      const std::size_t d = tt.num_dims();
      Rows<T> g(bsz, tt.payload());
      g.data.assign(upstream.data.begin(), upstream.data.end());
      for (std::size_t k = d; k-- > 0;) {
        const auto [rl, m, rr] = tt.core_extents(k);
        if (!tt.is_identity(k)) {
          auto gc = grads[k];
          for (std::size_t b = 0; b < bsz; ++b) {
            T* dst = gc.data() + tape.batch(b, k) * rr;
            auto gb = g.row(b);
            if (k == 0) {
              for (std::size_t c = 0; c < rr; ++c) dst[c] += gb[c];
              continue;
            }
            auto vin = tape.chain_inputs[k - 1].row(b);
            for (std::size_t a = 0; a < rl; ++a) {
              T* drow = dst + a * m * rr;
              const T va = vin[a];
              for (std::size_t c = 0; c < rr; ++c) drow[c] += va * gb[c];
            }
          }
        }
        if (k == 0) break;
        Rows<T> prev(bsz, rl);
        for (std::size_t b = 0; b < bsz; ++b) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> o(prev.row(b).data(), rl);
          o.noalias() = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(g.row(b).data(), rr) *
                        ConstRowMap<T>(tape.slices[k].row(b).data(), rl, rr).transpose();
        }
        g = std::move(prev);
      }
      return;
    }
    case SamplerKind::DenseGather: {
      const std::size_t payload = tt.payload();
      Buffer<T> dense(tt.shape().numel() * payload, T(0));
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t flat = 0;
        for (std::size_t k = 0; k < tt.num_dims(); ++k) flat = flat * tt.shape().modes[k] + tape.batch(b, k);
        auto src = upstream.row(b);
        for (std::size_t c = 0; c < payload; ++c) dense[flat * payload + c] += src[c];
      }
      GradBuffers<T> g = contract_backward(tt, std::span<const T>(dense));
      for (std::size_t k = 0; k < tt.num_dims(); ++k)
        if (grads.has(k) && g.has(k))
          for (std::size_t i = 0; i < g.cores[k].size(); ++i) grads.cores[k][i] += g.cores[k][i];
      return;
    }
  }
}

template <typename T>
GradBuffers<T> backward(const Tape<T>& tape, const Rows<T>& upstream) {
  GradBuffers<T> grads = tape.tt->make_grads();
  backward_into(tape, upstream, grads);
  return grads;
}

// Recomputing variant: runs the forward pass with caching, then the reverse
// pass. Checks that V3 is only used with a reduced tensor train.
template <typename T>
GradBuffers<T> backward(const TensorTrain<T>& tt, const IndexBatch& batch, SamplerKind kind,
                        const Rows<T>& upstream, std::size_t budget = 0) {
  if (kind == SamplerKind::V3 && !is_reduced(tt))
    throw RankPatternError("backward: V3 requires a reduced tensor train");
  Tape<T> tape;
  sample(tt, batch, kind, &tape, budget);
  return backward(tape, upstream);
}

}  // namespace ttnf
