#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "oracles.hpp"
#include "ttnf/qtt_field.hpp"

using namespace ttnf;

namespace {

QttGridConfig small_cfg(std::size_t levels, std::size_t channels, std::size_t r) {
  QttGridConfig c;
  c.levels = levels;
  c.channels = channels;
  c.r_max = r;
  c.box = {{-1.0, -0.5, 0.0}, {1.0, 1.5, 3.0}};
  return c;
}

QttGrid<double> random_grid(const QttGridConfig& cfg, std::uint64_t seed) {
  return QttGrid<double>(cfg, init_random(cfg.shape(), cfg.rank(), 1.0, seed));
}

// Dense grid built from the naive element oracle, x-major then y, z.
DenseGrid<double> oracle_dense(const QttGrid<double>& g) {
  const std::size_t n = g.config.side(), d = g.config.levels;
  DenseGrid<double> out(n, g.config.channels);
  std::vector<std::size_t> idx(d);
  for (std::uint32_t x = 0; x < n; ++x)
    for (std::uint32_t y = 0; y < n; ++y)
      for (std::uint32_t z = 0; z < n; ++z) {
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t s = d - 1 - k;
          idx[k] = ((x >> s) & 1) * 4 + ((y >> s) & 1) * 2 + ((z >> s) & 1);
        }
        const auto v = oracle::element(g.tt, idx);
        std::copy(v.begin(), v.end(), out.voxel(x, y, z).begin());
      }
  return out;
}

// Separable lerp along x, then y, then z with clamp-to-edge reads.
std::vector<double> oracle_trilinear(const QttGridConfig& cfg, const DenseGrid<double>& g, const Vec3& p) {
  const double n = static_cast<double>(cfg.side());
  const long last = static_cast<long>(cfg.side()) - 1;
  long i0[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (p[a] - cfg.box.lo[a]) * n / (cfg.box.hi[a] - cfg.box.lo[a]) - 0.5;
    i0[a] = static_cast<long>(std::floor(u));
    t[a] = u - std::floor(u);
  }
  auto at = [&](long x, long y, long z, std::size_t ch) {
    x = std::min(std::max(x, 0L), last);
    y = std::min(std::max(y, 0L), last);
    z = std::min(std::max(z, 0L), last);
    return g.voxel(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z))[ch];
  };
  std::vector<double> out(g.channels);
  for (std::size_t ch = 0; ch < g.channels; ++ch) {
    double yz[2][2];
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        const double a = at(i0[0], i0[1] + dy, i0[2] + dz, ch), b = at(i0[0] + 1, i0[1] + dy, i0[2] + dz, ch);
        yz[dy][dz] = a + t[0] * (b - a);
      }
    double zz[2];
    for (int dz = 0; dz < 2; ++dz) zz[dz] = yz[0][dz] + t[1] * (yz[1][dz] - yz[0][dz]);
    out[ch] = zz[0] + t[2] * (zz[1] - zz[0]);
  }
  return out;
}

std::vector<Vec3> random_points(const QttGridConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<Vec3> pts(n);
  for (auto& p : pts)
    for (int a = 0; a < 3; ++a) p[a] = std::uniform_real_distribution<double>(cfg.box.lo[a], cfg.box.hi[a])(gen);
  return pts;
}

Vec3 voxel_centre(const QttGridConfig& cfg, double x, double y, double z) {
  const double n = static_cast<double>(cfg.side());
  const Vec3 v{x, y, z};
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = cfg.box.lo[a] + (v[a] + 0.5) / n * (cfg.box.hi[a] - cfg.box.lo[a]);
  return p;
}

}  // namespace

TEST(Morton, Examples) {
  EXPECT_EQ(voxel_to_qtt_index(small_cfg(2, 1, 4), {1, 0, 1}), (std::vector<std::uint32_t>{0, 5}));
  EXPECT_EQ(voxel_to_qtt_index(small_cfg(3, 1, 4), {0, 0, 0}), (std::vector<std::uint32_t>{0, 0, 0}));
  EXPECT_EQ(voxel_to_qtt_index(small_cfg(1, 1, 4), {1, 1, 1}), (std::vector<std::uint32_t>{7}));
  // x = 2 = 0b10, y = 3 = 0b11, z = 1 = 0b01: level 0 takes the high bits.
  EXPECT_EQ(voxel_to_qtt_index(small_cfg(2, 1, 4), {2, 3, 1}), (std::vector<std::uint32_t>{6, 3}));
  EXPECT_THROW(voxel_to_qtt_index(small_cfg(2, 1, 4), {4, 0, 0}), IndexError);
  const std::uint32_t bad[] = {0, 8};
  EXPECT_THROW(qtt_index_to_voxel(bad), IndexError);
}

TEST(Morton, ExhaustiveBijection) {
  for (std::size_t d = 1; d <= 4; ++d) {
    const auto cfg = small_cfg(d, 1, 4);
    const std::uint32_t n = static_cast<std::uint32_t>(cfg.side());
    std::set<std::vector<std::uint32_t>> seen;
    for (std::uint32_t x = 0; x < n; ++x)
      for (std::uint32_t y = 0; y < n; ++y)
        for (std::uint32_t z = 0; z < n; ++z) {
          const auto idx = voxel_to_qtt_index(cfg, {x, y, z});
          ASSERT_EQ(idx.size(), d);
          for (auto m : idx) ASSERT_LT(m, 8u);
          EXPECT_EQ(qtt_index_to_voxel(idx), (VoxelCoord{x, y, z}));
          seen.insert(idx);
        }
    EXPECT_EQ(seen.size(), std::size_t{n} * n * n);
  }
}

TEST(Morton, DenseReorderRoundTrip) {
  DenseGrid<double> g(8, 2);
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = static_cast<double>(i);
  const auto m = dense_grid_to_morton(g, 3);
  EXPECT_EQ(m.extents(), (std::vector<std::size_t>{8, 8, 8, 2}));
  EXPECT_EQ(morton_to_dense_grid(m, 3).data, g.data);
}

TEST(QttGrid, ZeroGridGivesZeroPayloads) {
  const auto cfg = small_cfg(3, 4, 8);
  QttGrid<double> g(cfg);
  const std::vector<VoxelCoord> vox{{0, 0, 0}, {7, 7, 7}, {3, 1, 6}};
  for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::DenseGather}) {
    const auto s = sample_voxels(g, vox, kind);
    for (double v : s.data) EXPECT_EQ(v, 0.0);
  }
  EXPECT_EQ(cfg.shape().modes, std::vector<std::size_t>(3, 8));
  EXPECT_EQ(cfg.shape().payload, 4u);
  EXPECT_EQ(g.tt.rank(), cfg.rank());
}

TEST(QttGrid, RejectsMismatchedTrain) {
  const auto cfg = small_cfg(3, 2, 4);
  EXPECT_THROW(QttGrid<double>(cfg, init_random(small_cfg(3, 3, 4).shape(), small_cfg(3, 3, 4).rank(), 1.0, 1)),
               ShapeError);
  EXPECT_THROW(QttGrid<double>(cfg, init_random(cfg.shape(), small_cfg(3, 2, 2).rank(), 1.0, 1)), ShapeError);
  auto bad = cfg;
  bad.levels = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.box.hi[1] = bad.box.lo[1];
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(QttGrid, SampleVoxelsMatchesDenseOracle) {
  const auto cfg = small_cfg(3, 3, 6);
  const auto g = random_grid(cfg, 11);
  const auto dense = oracle_dense(g);
  std::vector<VoxelCoord> vox;
  for (std::uint32_t x = 0; x < 8; ++x)
    for (std::uint32_t y = 0; y < 8; ++y)
      for (std::uint32_t z = 0; z < 8; ++z) vox.push_back({x, y, z});
  for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::DenseGather}) {
    const auto s = sample_voxels(g, vox, kind);
    ASSERT_EQ(s.rows, vox.size());
    for (std::size_t b = 0; b < vox.size(); ++b) {
      const auto ref = dense.voxel(vox[b].x, vox[b].y, vox[b].z);
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s(b, c), ref[c], 1e-12) << to_string(kind);
    }
  }
  const auto lib = qtt_to_dense(g);
  EXPECT_LE(oracle::rel_err(std::vector<double>(lib.data.begin(), lib.data.end()), dense.data), 1e-12);
}

TEST(QttGrid, ReducedV3AgreesWithFullV2) {
  const auto cfg = small_cfg(4, 2, 8);
  const auto g = random_grid(cfg, 5);
  QttGrid<double> red(cfg, full_to_reduced(g.tt));
  ASSERT_TRUE(red.tt.any_identity());
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<std::uint32_t> u(0, 15);
  std::vector<VoxelCoord> vox(300);
  for (auto& v : vox) v = {u(gen), u(gen), u(gen)};
  const auto a = sample_voxels(g, vox, SamplerKind::V2);
  const auto b = sample_voxels(red, vox, SamplerKind::V3);
  EXPECT_LE(oracle::rel_err(std::vector<double>(b.data.begin(), b.data.end()),
                            std::vector<double>(a.data.begin(), a.data.end())),
            1e-12);
}

TEST(QttGrid, TtSvdOfDenseGridIsExactAtFullRank) {
  auto cfg = small_cfg(2, 2, 64);
  DenseGrid<double> d(4, 2);
  std::mt19937_64 gen(8);
  std::normal_distribution<double> nd;
  for (double& v : d.data) v = nd(gen);
  const auto g = qtt_from_dense(cfg, d);
  const auto back = qtt_to_dense(g);
  EXPECT_LE(oracle::rel_err(std::vector<double>(back.data.begin(), back.data.end()), d.data), 1e-12);
  cfg.channels = 3;
  EXPECT_THROW(qtt_from_dense(cfg, d), ShapeError);
}

TEST(Trilinear, VoxelCentreHitsThatVoxel) {
  const auto cfg = small_cfg(3, 3, 6);
  const auto g = random_grid(cfg, 2);
  const auto dense = oracle_dense(g);
  const std::vector<Vec3> pts{voxel_centre(cfg, 2, 5, 1), voxel_centre(cfg, 0, 0, 0), voxel_centre(cfg, 7, 7, 7)};
  const auto st = trilinear_stencil(cfg, pts);
  EXPECT_NEAR(st.weights[0], 1.0, 1e-12);
  EXPECT_EQ(st.corners[0], (VoxelCoord{2, 5, 1}));
  const auto s = trilinear_sample(g, pts, SamplerKind::V2);
  const VoxelCoord vox[] = {{2, 5, 1}, {0, 0, 0}, {7, 7, 7}};
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(s(b, c), dense.voxel(vox[b].x, vox[b].y, vox[b].z)[c], 1e-12);
}

TEST(Trilinear, MidpointAveragesNeighbours) {
  const auto cfg = small_cfg(3, 3, 6);
  const auto g = random_grid(cfg, 4);
  const auto dense = oracle_dense(g);
  const Vec3 a = voxel_centre(cfg, 3, 2, 6), b = voxel_centre(cfg, 4, 2, 6);
  const Vec3 mid{(a[0] + b[0]) / 2, a[1], a[2]};
  const auto st = trilinear_stencil(cfg, std::span<const Vec3>(&mid, 1));
  EXPECT_NEAR(st.weights[0], 0.5, 1e-12);
  EXPECT_NEAR(st.weights[4], 0.5, 1e-12);
  const auto s = trilinear_sample(g, std::span<const Vec3>(&mid, 1), SamplerKind::V2);
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(s(0, c), 0.5 * (dense.voxel(3, 2, 6)[c] + dense.voxel(4, 2, 6)[c]), 1e-12);
}

TEST(Trilinear, MatchesSeparableOracle) {
  const auto cfg = small_cfg(3, 4, 8);
  const auto g = random_grid(cfg, 9);
  const auto dense = oracle_dense(g);
  auto pts = random_points(cfg, 2000, 1);
  pts.push_back(cfg.box.lo);
  pts.push_back(cfg.box.hi);
  for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::DenseGather}) {
    const auto s = trilinear_sample(g, pts, kind);
    double err = 0, scale = 0;
    for (std::size_t b = 0; b < pts.size(); ++b) {
      const auto ref = oracle_trilinear(cfg, dense, pts[b]);
      const auto lib = trilinear_dense(cfg, dense, pts[b]);
      for (std::size_t c = 0; c < 4; ++c) {
        err = std::max({err, std::abs(s(b, c) - ref[c]), std::abs(lib[c] - ref[c])});
        scale = std::max(scale, std::abs(ref[c]));
      }
    }
    EXPECT_LE(err / scale, 1e-12) << to_string(kind);
  }
}

TEST(Trilinear, WeightsArePartitionOfUnity) {
  const auto cfg = small_cfg(4, 1, 4);
  auto pts = random_points(cfg, 5000, 2);
  pts.push_back(cfg.box.lo);
  pts.push_back(cfg.box.hi);
  const auto st = trilinear_stencil(cfg, pts);
  for (std::size_t b = 0; b < pts.size(); ++b) {
    double sum = 0;
    for (int k = 0; k < 8; ++k) {
      EXPECT_GE(st.weights[b * 8 + k], 0.0);
      sum += st.weights[b * 8 + k];
      const auto& v = st.corners[b * 8 + k];
      EXPECT_LT(std::max({v.x, v.y, v.z}), 16u);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Trilinear, LipschitzInPosition) {
  const auto cfg = small_cfg(3, 2, 6);
  const auto g = random_grid(cfg, 6);
  const auto dense = oracle_dense(g);
  double vmax = 0;
  for (double v : dense.data) vmax = std::max(vmax, std::abs(v));
  double inv_cell = 0;
  for (int a = 0; a < 3; ++a) inv_cell = std::max(inv_cell, 8.0 / (cfg.box.hi[a] - cfg.box.lo[a]));
  // Each axis contributes at most 2 vmax per cell width.
  const double lip = 3 * 2 * vmax * inv_cell;
  const double delta = 1e-6;
  auto pts = random_points(cfg, 500, 3);
  std::mt19937_64 gen(4);
  std::normal_distribution<double> nd;
  std::vector<Vec3> moved(pts.size());
  for (std::size_t b = 0; b < pts.size(); ++b) {
    Vec3 dir{nd(gen), nd(gen), nd(gen)};
    const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    for (int a = 0; a < 3; ++a) {
      moved[b][a] = pts[b][a] + delta * dir[a] / len;
      moved[b][a] = std::clamp(moved[b][a], cfg.box.lo[a], cfg.box.hi[a]);
    }
  }
  const auto s0 = trilinear_sample(g, pts, SamplerKind::V2), s1 = trilinear_sample(g, moved, SamplerKind::V2);
  for (std::size_t b = 0; b < pts.size(); ++b)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_LE(std::abs(s1(b, c) - s0(b, c)), lip * delta * (1 + 1e-9));
}

TEST(Trilinear, OutsideBoxThrows) {
  const auto cfg = small_cfg(2, 1, 4);
  const QttGrid<double> g(cfg);
  const std::vector<Vec3> pts{{0.0, 0.0, 1.0}, {1.0 + 1e-9, 0.0, 1.0}};
  EXPECT_THROW(trilinear_sample(g, pts, SamplerKind::V2), IndexError);
  const std::vector<Vec3> nan_pt{{std::nan(""), 0.0, 1.0}};
  EXPECT_THROW(trilinear_sample(g, nan_pt, SamplerKind::V2), IndexError);
  EXPECT_THROW(trilinear_sample(g, std::span<const Vec3>(), SamplerKind::V2), ShapeError);
}

TEST(Trilinear, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto cfg = small_cfg(3, 2, 3);
    auto g = random_grid(cfg, 20 + seed);
    const bool reduced = seed % 2 == 1;
    if (reduced) g.tt = full_to_reduced(g.tt);
    const SamplerKind kind = reduced ? SamplerKind::V3 : SamplerKind::V2;
    const auto pts = random_points(cfg, 24, 30 + seed);
    Rows<double> up(pts.size(), 2);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd;
    for (double& v : up.data) v = nd(gen);

    TrilinearContext<double> ctx;
    trilinear_sample(g, pts, kind, &ctx);
    const auto grads = trilinear_backward(ctx, up);
    auto f = [&](const TensorTrain<double>& tt) {
      const auto s = trilinear_sample(QttGrid<double>(cfg, tt), pts, kind);
      double acc = 0;
      for (std::size_t i = 0; i < s.data.size(); ++i) acc += s.data[i] * up.data[i];
      return acc;
    };
    const auto fd = oracle::fd_core_grads(g.tt, f);
    for (std::size_t k = 0; k < fd.size(); ++k) {
      if (fd[k].empty()) continue;
      const std::vector<double> an(grads.cores[k].begin(), grads.cores[k].end());
      EXPECT_LE(oracle::rel_err(an, fd[k], 1e-3), 1e-5) << "seed " << seed << " core " << k;
    }
  }
}

TEST(Trilinear, DuplicateCornersAreFetchedOnce) {
  const auto cfg = small_cfg(3, 1, 4);
  const auto g = random_grid(cfg, 1);
  const Vec3 c = voxel_centre(cfg, 1, 1, 1);
  const std::vector<Vec3> pts{c, c, c};
  TrilinearContext<double> ctx;
  trilinear_sample(g, pts, SamplerKind::V2, &ctx);
  EXPECT_LE(ctx.unique, 8u);
  EXPECT_EQ(ctx.slot.size(), 24u);
}

TEST(GridFile, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ttnf_qtt_field_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "grid.tt";
  const auto cfg = small_cfg(3, 5, 7);
  const auto g = random_grid(cfg, 12);
  save_grid(g, path);
  const auto back = load_grid<double>(path);
  EXPECT_EQ(back.tt, g.tt);
  EXPECT_EQ(back.config.levels, 3u);
  EXPECT_EQ(back.config.channels, 5u);
  EXPECT_EQ(back.config.r_max, 7u);
  EXPECT_EQ(back.config.box.lo, cfg.box.lo);
  EXPECT_EQ(back.config.box.hi, cfg.box.hi);

  save_tt(g.tt, dir / "plain.tt");
  EXPECT_THROW(load_grid<double>(dir / "plain.tt"), IoError);
  std::filesystem::remove_all(dir);
}
