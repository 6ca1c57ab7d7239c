#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ttnf/error.hpp"
#include "ttnf/sampling.hpp"
#include "ttnf/serialize.hpp"
#include "ttnf/tensor_train.hpp"
#include "ttnf/tt_svd.hpp"

namespace ttnf {

using Vec3 = std::array<double, 3>;

struct Box {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  void validate() const {
    for (int a = 0; a < 3; ++a) detail::require<ConfigError>(hi[a] > lo[a], "box must have positive extent");
  }
  bool contains(const Vec3& p) const {
    for (int a = 0; a < 3; ++a)
      if (!(p[a] >= lo[a] && p[a] <= hi[a])) return false;
    return true;
  }
};

struct QttGridConfig {
  std::size_t levels = 5;     // grid side 2^levels
  std::size_t channels = 28;  // density + 27 SH coefficients
  std::size_t r_max = 16;
  Box box;

  std::size_t side() const { return std::size_t{1} << levels; }

  void validate() const {
    detail::require<ConfigError>(levels >= 1 && levels <= 20, "qtt grid: levels must be in [1, 20]");
    detail::require<ConfigError>(channels >= 1, "qtt grid: channels must be >= 1");
    detail::require<ConfigError>(r_max >= 1, "qtt grid: r_max must be >= 1");
    box.validate();
  }

  TtShape shape() const { return {std::vector<std::size_t>(levels, 8), channels}; }
  TtRank rank() const { return clamp_ranks(max_rank_pyramid(shape()), r_max); }
};

struct VoxelCoord {
  std::uint32_t x = 0, y = 0, z = 0;
  bool operator==(const VoxelCoord&) const = default;
};

// Cubic voxel grid of side 2^D as a tensor train over Morton-ordered modes.
template <typename T>
struct QttGrid {
  QttGridConfig config;
  TensorTrain<T> tt;

  QttGrid() = default;
  explicit QttGrid(QttGridConfig cfg) : config(std::move(cfg)) {
    config.validate();
    tt = TensorTrain<T>(config.shape(), config.rank());
  }
  QttGrid(QttGridConfig cfg, TensorTrain<T> t) : config(std::move(cfg)), tt(std::move(t)) {
    config.validate();
    detail::require<ShapeError>(tt.shape() == config.shape(), "QttGrid: tensor train shape mismatch");
    detail::require<ShapeError>(tt.rank() == config.rank(), "QttGrid: tensor train rank mismatch");
  }
};

// Level k (0 = coarsest) gets mode index 4 x_k + 2 y_k + z_k, where x_k is
// bit (D-1-k) of x.
inline void voxel_to_qtt_index(std::size_t levels, const VoxelCoord& v, std::span<std::uint32_t> out) {
  const std::uint32_t side = std::uint32_t{1} << levels;
  if (v.x >= side || v.y >= side || v.z >= side) throw IndexError("voxel outside the grid");
  for (std::size_t k = 0; k < levels; ++k) {
    const unsigned s = static_cast<unsigned>(levels - 1 - k);
    out[k] = (((v.x >> s) & 1u) << 2) | (((v.y >> s) & 1u) << 1) | ((v.z >> s) & 1u);
  }
}

inline std::vector<std::uint32_t> voxel_to_qtt_index(const QttGridConfig& cfg, const VoxelCoord& v) {
  std::vector<std::uint32_t> out(cfg.levels);
  voxel_to_qtt_index(cfg.levels, v, out);
  return out;
}

inline VoxelCoord qtt_index_to_voxel(std::span<const std::uint32_t> idx) {
  VoxelCoord v;
  for (std::uint32_t m : idx) {
    if (m >= 8) throw IndexError("qtt mode index out of range");
    v.x = (v.x << 1) | ((m >> 2) & 1u);
    v.y = (v.y << 1) | ((m >> 1) & 1u);
    v.z = (v.z << 1) | (m & 1u);
  }
  return v;
}

inline IndexBatch voxels_to_batch(std::size_t levels, std::span<const VoxelCoord> voxels) {
  IndexBatch batch(voxels.size(), levels);
  for (std::size_t b = 0; b < voxels.size(); ++b)
    voxel_to_qtt_index(levels, voxels[b], std::span<std::uint32_t>(batch.indices.data() + b * levels, levels));
  return batch;
}

// Payload rows of the given voxels.
template <typename T>
SampleBatch<T> sample_voxels(const QttGrid<T>& grid, std::span<const VoxelCoord> voxels, SamplerKind kind,
                             Tape<T>* tape = nullptr) {
  detail::require<ShapeError>(!voxels.empty(), "sample_voxels: empty batch");
  return sample(grid.tt, voxels_to_batch(grid.config.levels, voxels), kind, tape);
}

// Continuous voxel coordinate of a world point: voxel centres sit at
// lo + (i + 0.5) / 2^D * extent.
inline Vec3 world_to_voxel(const QttGridConfig& cfg, const Vec3& p) {
  const double n = static_cast<double>(cfg.side());
  Vec3 u;
  for (int a = 0; a < 3; ++a) u[a] = (p[a] - cfg.box.lo[a]) / (cfg.box.hi[a] - cfg.box.lo[a]) * n - 0.5;
  return u;
}

// Eight corner voxels and trilinear weights for each point. Corner i uses
// bit 2 for x, bit 1 for y and bit 0 for z; out-of-range corners are clamped
// to the boundary voxel.
struct TrilinearStencil {
  std::vector<VoxelCoord> corners;        // 8 per point
  std::vector<double> weights;            // 8 per point
};

inline TrilinearStencil trilinear_stencil(const QttGridConfig& cfg, std::span<const Vec3> points) {
  TrilinearStencil st;
  st.corners.resize(points.size() * 8);
  st.weights.resize(points.size() * 8);
  const long last = static_cast<long>(cfg.side()) - 1;
  for (std::size_t b = 0; b < points.size(); ++b) {
    if (!cfg.box.contains(points[b]))
      throw IndexError("trilinear_sample: point outside the bounding box");
    const Vec3 u = world_to_voxel(cfg, points[b]);
    long i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      const double fl = std::floor(u[a]);
      i0[a] = static_cast<long>(fl);
      f[a] = u[a] - fl;
    }
    for (int c = 0; c < 8; ++c) {
      const int bx = (c >> 2) & 1, by = (c >> 1) & 1, bz = c & 1;
      const auto clampi = [last](long i) { return static_cast<std::uint32_t>(std::clamp(i, 0L, last)); };
      st.corners[b * 8 + c] = {clampi(i0[0] + bx), clampi(i0[1] + by), clampi(i0[2] + bz)};
      st.weights[b * 8 + c] = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
    }
  }
  return st;
}

// Backward context of trilinear_sample.
template <typename T>
struct TrilinearContext {
  TrilinearStencil stencil;
  std::vector<std::uint32_t> slot;  // stencil entry -> row of the unique-voxel batch
  std::size_t unique = 0;
  Tape<T> tape;
};

// Trilinear interpolation of payload rows at world points. The 8 corners of
// every point are deduplicated and fetched with one batched tensor-train
// sampling call.
template <typename T>
SampleBatch<T> trilinear_sample(const QttGrid<T>& grid, std::span<const Vec3> points, SamplerKind kind,
                                TrilinearContext<T>* ctx = nullptr) {
  detail::require<ShapeError>(!points.empty(), "trilinear_sample: empty batch");
  const auto& cfg = grid.config;
  TrilinearStencil st = trilinear_stencil(cfg, points);

  // Deduplicate corners; unique voxels come out sorted by packed coordinate key.
  const std::size_t n = st.corners.size();
  std::vector<std::uint64_t> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = st.corners[i];
    keys[i] = (std::uint64_t{v.x} << 42) | (std::uint64_t{v.y} << 21) | v.z;
  }
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return keys[a] < keys[b]; });
  std::vector<std::uint32_t> slot(n);
  std::vector<VoxelCoord> unique;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == 0 || keys[order[j]] != keys[order[j - 1]]) unique.push_back(st.corners[order[j]]);
    slot[order[j]] = static_cast<std::uint32_t>(unique.size() - 1);
  }

  Tape<T>* tape = ctx ? &ctx->tape : nullptr;
  const SampleBatch<T> vals = sample_voxels(grid, std::span<const VoxelCoord>(unique), kind, tape);
  const std::size_t c = cfg.channels;
  SampleBatch<T> out(points.size(), c);
  for (std::size_t b = 0; b < points.size(); ++b) {
    auto o = out.row(b);
    for (int k = 0; k < 8; ++k) {
      const T w = static_cast<T>(st.weights[b * 8 + k]);
      auto v = vals.row(slot[b * 8 + k]);
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += w * v[ch];
    }
  }
  if (ctx) {
    ctx->stencil = std::move(st);
    ctx->slot = std::move(slot);
    ctx->unique = unique.size();
  }
  return out;
}

// Accumulates core gradients of sum_b upstream_b . trilinear_sample_b.
template <typename T>
void trilinear_backward_into(const TrilinearContext<T>& ctx, const Rows<T>& upstream, GradBuffers<T>& grads) {
  const std::size_t npts = ctx.stencil.weights.size() / 8;
  detail::require<ShapeError>(upstream.rows == npts, "trilinear_backward: upstream row mismatch");
  Rows<T> g(ctx.unique, upstream.cols);
  for (std::size_t b = 0; b < npts; ++b) {
    auto u = upstream.row(b);
    for (int k = 0; k < 8; ++k) {
      const T w = static_cast<T>(ctx.stencil.weights[b * 8 + k]);
      auto dst = g.row(ctx.slot[b * 8 + k]);
      for (std::size_t ch = 0; ch < u.size(); ++ch) dst[ch] += w * u[ch];
    }
  }
  backward_into(ctx.tape, g, grads);
}

template <typename T>
GradBuffers<T> trilinear_backward(const TrilinearContext<T>& ctx, const Rows<T>& upstream) {
  GradBuffers<T> grads = ctx.tape.tt->make_grads();
  trilinear_backward_into(ctx, upstream, grads);
  return grads;
}

// Uncompressed voxel grid, x-major then y, z, channel.
template <typename T>
struct DenseGrid {
  std::size_t side = 0;
  std::size_t channels = 0;
  std::vector<T> data;

  DenseGrid() = default;
  DenseGrid(std::size_t s, std::size_t c) : side(s), channels(c), data(s * s * s * c, T(0)) {}

  std::size_t offset(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    return ((static_cast<std::size_t>(x) * side + y) * side + z) * channels;
  }
  std::span<T> voxel(std::uint32_t x, std::uint32_t y, std::uint32_t z) {
    return {data.data() + offset(x, y, z), channels};
  }
  std::span<const T> voxel(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    return {data.data() + offset(x, y, z), channels};
  }
};

// Reorders a dense grid into the (8, ..., 8, C) Morton tensor.
template <typename T>
DenseTensor<T> dense_grid_to_morton(const DenseGrid<T>& g, std::size_t levels) {
  detail::require<ShapeError>(g.side == (std::size_t{1} << levels), "dense grid side must be 2^levels");
  std::vector<std::size_t> extents(levels, 8);
  extents.push_back(g.channels);
  DenseTensor<T> out(extents);
  std::vector<std::uint32_t> idx(levels);
  const std::size_t n = g.side * g.side * g.side;
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t f = flat;
    for (std::size_t k = levels; k-- > 0;) {
      idx[k] = static_cast<std::uint32_t>(f % 8);
      f /= 8;
    }
    const VoxelCoord v = qtt_index_to_voxel(idx);
    auto src = g.voxel(v.x, v.y, v.z);
    std::copy(src.begin(), src.end(), out.data().begin() + flat * g.channels);
  }
  return out;
}

template <typename T>
DenseGrid<T> morton_to_dense_grid(const DenseTensor<T>& m, std::size_t levels) {
  const std::size_t c = m.extents().back();
  DenseGrid<T> g(std::size_t{1} << levels, c);
  std::vector<std::uint32_t> idx(levels);
  const std::size_t n = g.side * g.side * g.side;
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t f = flat;
    for (std::size_t k = levels; k-- > 0;) {
      idx[k] = static_cast<std::uint32_t>(f % 8);
      f /= 8;
    }
    const VoxelCoord v = qtt_index_to_voxel(idx);
    auto src = m.data().subspan(flat * c, c);
    std::copy(src.begin(), src.end(), g.voxel(v.x, v.y, v.z).begin());
  }
  return g;
}

// TT-SVD of a dense grid at the configured clamped-pyramid rank.
template <typename T>
QttGrid<T> qtt_from_dense(const QttGridConfig& cfg, const DenseGrid<T>& g) {
  cfg.validate();
  detail::require<ShapeError>(g.channels == cfg.channels, "qtt_from_dense: channel count mismatch");
  return QttGrid<T>(cfg, tt_svd(dense_grid_to_morton(g, cfg.levels), cfg.shape(), cfg.rank()));
}

template <typename T>
DenseGrid<T> qtt_to_dense(const QttGrid<T>& grid) {
  return morton_to_dense_grid(contract(grid.tt), grid.config.levels);
}

// Trilinear interpolation on a dense grid with the same conventions as
// trilinear_sample.
template <typename T>
std::vector<T> trilinear_dense(const QttGridConfig& cfg, const DenseGrid<T>& g, const Vec3& p) {
  const TrilinearStencil st = trilinear_stencil(cfg, std::span<const Vec3>(&p, 1));
  std::vector<T> out(g.channels, T(0));
  for (int k = 0; k < 8; ++k) {
    const auto& v = st.corners[k];
    auto src = g.voxel(v.x, v.y, v.z);
    for (std::size_t ch = 0; ch < g.channels; ++ch) out[ch] += static_cast<T>(st.weights[k]) * src[ch];
  }
  return out;
}

inline nlohmann::json grid_header(const QttGridConfig& cfg) {
  return {{"levels", cfg.levels},
          {"channels", cfg.channels},
          {"r_max", cfg.r_max},
          {"box", {{"min", cfg.box.lo}, {"max", cfg.box.hi}}}};
}

inline QttGridConfig grid_config_from_header(const nlohmann::json& j) {
  try {
    QttGridConfig cfg;
    cfg.levels = j.at("levels").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.r_max = j.at("r_max").get<std::size_t>();
    cfg.box.lo = j.at("box").at("min").get<Vec3>();
    cfg.box.hi = j.at("box").at("max").get<Vec3>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad grid header: ") + e.what());
  }
}

template <typename T>
void save_grid(const QttGrid<T>& grid, const std::filesystem::path& path) {
  save_tt(grid.tt, path, {{"grid", grid_header(grid.config)}});
}

template <typename T>
QttGrid<T> load_grid(const std::filesystem::path& path) {
  const nlohmann::json meta = load_sidecar(path);
  if (!meta.contains("grid")) throw IoError("checkpoint sidecar has no grid header");
  QttGridConfig cfg = grid_config_from_header(meta.at("grid"));
  TensorTrain<T> tt = load_tt<T>(path);
  try {
    return QttGrid<T>(cfg, std::move(tt));
  } catch (const ShapeError& e) {
    throw IoError(std::string("checkpoint does not match its header: ") + e.what());
  }
}

}  // namespace ttnf
