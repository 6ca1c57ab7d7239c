#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ttnf/cost_model.hpp"
#include "ttnf/memory.hpp"
#include "ttnf/sampling.hpp"

using namespace ttnf;

namespace {

TtRank R(std::vector<std::size_t> v) { return TtRank{std::move(v)}; }

TensorTrain<double> identity_example() {
  TensorTrain<double> tt({{2, 2}, 1}, R({1, 2, 1}));
  tt.at(0, 0, 0, 0) = 1;
  tt.at(0, 0, 1, 1) = 1;
  tt.at(1, 0, 0, 0) = 3;
  tt.at(1, 1, 0, 0) = 5;
  tt.at(1, 0, 1, 0) = 4;
  tt.at(1, 1, 1, 0) = 6;
  return tt;
}

IndexBatch make_batch(std::vector<std::vector<std::uint32_t>> rows) {
  IndexBatch b(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) b(i, k) = rows[i][k];
  return b;
}

IndexBatch random_batch(std::mt19937_64& gen, const TtShape& s, std::size_t count) {
  IndexBatch b(count, s.num_dims());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t k = 0; k < s.num_dims(); ++k) b(i, k) = static_cast<std::uint32_t>(gen() % s.modes[k]);
  return b;
}

Rows<double> random_rows(std::mt19937_64& gen, std::size_t r, std::size_t c) {
  std::normal_distribution<double> nd;
  Rows<double> out(r, c);
  for (double& x : out.data) x = nd(gen);
  return out;
}

double max_abs_diff(const Rows<double>& a, const Rows<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Row-by-row element() oracle.
Rows<double> element_rows(const TensorTrain<double>& tt, const IndexBatch& batch) {
  Rows<double> out(batch.count, tt.payload());
  for (std::size_t b = 0; b < batch.count; ++b) {
    std::vector<std::size_t> idx(batch.row(b).begin(), batch.row(b).end());
    const auto v = oracle::element(tt, idx);
    std::copy(v.begin(), v.end(), out.row(b).begin());
  }
  return out;
}

SamplerKind kinds_all[] = {SamplerKind::V1, SamplerKind::V2, SamplerKind::V3, SamplerKind::DenseGather};

}  // namespace

TEST(Bimvp, BasisSlicesExample) {
  const std::vector<double> core{1, 0, 0, 1};  // (1, 2, 2): m=0 -> [1,0], m=1 -> [0,1]
  const std::vector<std::uint32_t> i{1, 0};
  Rows<double> v(2, 1);
  v.data = {1, 1};
  auto [out, perm] = bimvp<double>(core, {1, 2, 2}, i, v);
  EXPECT_EQ(perm.forward, (std::vector<std::uint32_t>{1, 0}));
  EXPECT_TRUE(perm.valid());
  EXPECT_EQ((std::vector<double>(out.data.begin(), out.data.end())), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Bimvp, SingletonBatch) {
  std::mt19937_64 gen(1);
  const auto core = random_rows(gen, 1, 3 * 4 * 5);
  const std::vector<std::uint32_t> i{2};
  const auto v = random_rows(gen, 1, 3);
  auto [out, perm] = bimvp<double>(core.data, {3, 4, 5}, i, v);
  EXPECT_EQ(perm.forward, (std::vector<std::uint32_t>{0}));
  for (std::size_t c = 0; c < 5; ++c) {
    double s = 0;
    for (std::size_t a = 0; a < 3; ++a) s += v(0, a) * core.data[(a * 4 + 2) * 5 + c];
    EXPECT_NEAR(out(0, c), s, 1e-14);
  }
}

TEST(Bimvp, UnpermutedMatchesPerSampleLoop) {
  std::mt19937_64 gen(2);
  const std::size_t rl = 4, m = 6, rr = 3, bsz = 64;
  const auto core = random_rows(gen, 1, rl * m * rr);
  std::vector<std::uint32_t> i(bsz);
  for (auto& x : i) x = static_cast<std::uint32_t>(gen() % m);
  const auto v = random_rows(gen, bsz, rl);
  auto [out, perm] = bimvp<double>(core.data, {rl, m, rr}, i, v);
  ASSERT_TRUE(perm.valid());
  // Groups ascend by mode index and are stable.
  for (std::size_t j = 1; j < bsz; ++j) {
    EXPECT_LE(i[perm.forward[j - 1]], i[perm.forward[j]]);
    if (i[perm.forward[j - 1]] == i[perm.forward[j]]) { EXPECT_LT(perm.forward[j - 1], perm.forward[j]); }
  }
  for (std::size_t b = 0; b < bsz; ++b) {
    const std::size_t j = perm.inverse[b];
    for (std::size_t c = 0; c < rr; ++c) {
      double s = 0;
      for (std::size_t a = 0; a < rl; ++a) s += v(b, a) * core.data[(a * m + i[b]) * rr + c];
      EXPECT_NEAR(out(j, c), s, 1e-13);
    }
  }
}

TEST(Bimvp, OutOfRangeRejected) {
  const std::vector<double> core{1, 0, 0, 1};
  const std::vector<std::uint32_t> i{2};
  Rows<double> v(1, 1);
  EXPECT_THROW((bimvp<double>(core, {1, 2, 2}, i, v)), IndexError);
}

TEST(Sample, IdentityCoreExamples) {
  const auto tt = identity_example();
  auto v1 = sample_v1(tt, make_batch({{0, 1}, {1, 0}}));
  EXPECT_EQ(v1(0, 0), 4);
  EXPECT_EQ(v1(1, 0), 5);
  auto v2 = sample_v2(tt, make_batch({{0, 0}, {1, 1}}));
  EXPECT_EQ(v2(0, 0), 3);
  EXPECT_EQ(v2(1, 0), 6);
}

TEST(Sample, V1SingletonEqualsElement) {
  const auto tt = init_random({{3, 4, 5}, 2}, R({1, 3, 3, 2}), 1.0, 1);
  const auto out = sample_v1(tt, make_batch({{2, 1, 4}}));
  const auto e = element(tt, {2, 1, 4});
  EXPECT_EQ(out(0, 0), e[0]);
  EXPECT_EQ(out(0, 1), e[1]);
}

TEST(Sample, RepeatedIndexGivesIdenticalRows) {
  const auto tt = init_random({{3, 4, 5, 2}, 3}, R({1, 3, 6, 6, 3}), 1.0, 2);
  IndexBatch b(40, 4);
  for (std::size_t i = 0; i < 40; ++i) {
    b(i, 0) = 1;
    b(i, 1) = 3;
    b(i, 2) = 0;
    b(i, 3) = 1;
  }
  for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::DenseGather}) {
    const auto out = sample(tt, b, kind);
    for (std::size_t i = 1; i < 40; ++i)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(out(i, c), out(0, c));
  }
}

TEST(Sample, AllKindsAgreeWithDenseGatherOnRandomTrains) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 80; ++trial) {
    const TtShape s = oracle::random_shape(gen, 1, 7, 1, 6, 1, 4, 1 << 12);
    const TtRank r = oracle::random_clamped_rank(gen, s);
    const auto tt = init_random(s, r, 1.0, gen());
    const auto red = full_to_reduced(tt);
    const auto batch = random_batch(gen, s, 1 + gen() % 300);
    const auto ref = gather_dense(contract(tt), batch);
    const auto naive = element_rows(tt, batch);
    EXPECT_LE(max_abs_diff(ref, naive), 1e-12);
    for (auto kind : kinds_all) {
      const auto out = sample(kind == SamplerKind::V3 ? red : tt, batch, kind);
      EXPECT_LE(max_abs_diff(out, ref), 1e-12) << to_string(kind) << " trial " << trial;
    }
  }
}

TEST(Sample, V2MatchesV1AtFiveDims) {
  std::mt19937_64 gen(4);
  const TtShape s{{4, 4, 4, 4, 4}, 2};
  const auto tt = init_random(s, clamp_ranks(max_rank_pyramid(s), 8), 1.0, 4);
  const auto batch = random_batch(gen, s, 1024);
  EXPECT_LE(max_abs_diff(sample_v2(tt, batch), sample_v1(tt, batch)), 1e-12);
}

TEST(Sample, V3UnreducedWindowEqualsV2) {
  // Rank-1 clamp leaves the window as the whole train when modes > 1.
  std::mt19937_64 gen(5);
  const TtShape s{{3, 3, 3}, 1};
  const TtRank r = R({1, 2, 2, 1});
  EXPECT_EQ(reduced_window(s, r), (ReducedWindow{0, 2}));
  const auto tt = full_to_reduced(init_random(s, r, 1.0, 5));
  const auto batch = random_batch(gen, s, 128);
  const auto a = sample_v3(tt, batch), b = sample_v2(tt, batch);
  EXPECT_EQ(std::vector<double>(a.data.begin(), a.data.end()), std::vector<double>(b.data.begin(), b.data.end()));
}

TEST(Sample, V3RequiresReducedTrain) {
  const TtShape s{{2, 2, 2, 2}, 1};
  const auto tt = init_random(s, clamp_ranks(max_rank_pyramid(s), 2), 1.0, 0);
  const auto b = make_batch({{0, 1, 0, 1}});
  EXPECT_THROW(sample_v3(tt, b), RankPatternError);
  EXPECT_THROW(backward(tt, b, SamplerKind::V3, Rows<double>(1, 1)), RankPatternError);
}

TEST(Sample, V2V3ParityAfterReduction) {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 50; ++trial) {
    const TtShape s = oracle::random_shape(gen, 2, 8, 2, 4, 1, 5, 1 << 14);
    const TtRank r = oracle::random_clamped_rank(gen, s);
    const auto tt = init_random(s, r, 1.0, gen());
    const auto batch = random_batch(gen, s, 512);
    EXPECT_LE(max_abs_diff(sample_v2(tt, batch), sample_v3(full_to_reduced(tt), batch)), 1e-12);
  }
}

TEST(Sample, BadBatchesRejected) {
  const auto tt = identity_example();
  EXPECT_THROW(sample_v2(tt, make_batch({{0, 2}})), IndexError);
  EXPECT_THROW(sample_v2(tt, make_batch({{0, 1, 0}})), ShapeError);
  EXPECT_THROW(sample_v2(tt, IndexBatch(0, 2)), ShapeError);
}

TEST(Sample, V1GuardedByBudget) {
  const TtShape s{{4, 4, 4}, 1};
  const auto tt = init_random(s, max_rank_pyramid(s), 1.0, 0);
  std::mt19937_64 gen(7);
  const auto batch = random_batch(gen, s, 100);
  EXPECT_THROW(sample_v1<double>(tt, batch, nullptr, 100), BudgetError);
  EXPECT_THROW(sample<double>(tt, batch, SamplerKind::DenseGather, nullptr, 10), BudgetError);
}

TEST(GatherDense, Examples) {
  const auto dense = contract(identity_example());
  const auto all = gather_dense(dense, make_batch({{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
  EXPECT_EQ((std::vector<double>(all.data.begin(), all.data.end())), (std::vector<double>{3, 4, 5, 6}));
  const auto rep = gather_dense(dense, make_batch({{1, 0}, {1, 0}}));
  EXPECT_EQ(rep(0, 0), 5);
  EXPECT_EQ(rep(1, 0), 5);
  EXPECT_THROW(gather_dense(dense, make_batch({{1}})), ShapeError);
}

TEST(Backward, ZeroUpstreamGivesZero) {
  std::mt19937_64 gen(8);
  const TtShape s{{3, 4, 3}, 2};
  const auto tt = init_random(s, max_rank_pyramid(s), 1.0, 1);
  const auto batch = random_batch(gen, s, 16);
  for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::DenseGather}) {
    const auto g = backward(tt, batch, kind, Rows<double>(16, 2));
    for (const auto& c : g.cores)
      for (double x : c) EXPECT_EQ(x, 0.0);
  }
}

TEST(Backward, SingleCoreIsScatterAdd) {
  TensorTrain<double> tt({{5}, 3}, R({1, 3}));
  std::mt19937_64 gen(9);
  const auto batch = random_batch(gen, tt.shape(), 40);
  const auto up = random_rows(gen, 40, 3);
  std::vector<double> expect(15, 0.0);
  for (std::size_t b = 0; b < 40; ++b)
    for (std::size_t c = 0; c < 3; ++c) expect[batch(b, 0) * 3 + c] += up(b, c);
  for (auto kind : kinds_all) {
    const auto g = backward(kind == SamplerKind::V3 ? full_to_reduced(tt) : tt, batch, kind, up);
    for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(g.cores[0][i], expect[i], 1e-13) << to_string(kind);
  }
}

TEST(Backward, MatchesFiniteDifferences) {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 100; ++trial) {
    const TtShape s = oracle::random_shape(gen, 1, 5, 1, 4, 1, 3, 1 << 10);
    const TtRank r = oracle::random_clamped_rank(gen, s);
    const auto kind = kinds_all[trial % 4];
    auto tt = init_random(s, r, 1.0, gen());
    if (kind == SamplerKind::V3) tt = full_to_reduced(tt);
    const auto batch = random_batch(gen, s, 1 + gen() % 32);
    const auto up = random_rows(gen, batch.count, s.payload);
    const auto g = backward(tt, batch, kind, up);
    const auto fd = oracle::fd_core_grads(tt, [&](const TensorTrain<double>& t) {
      const auto v = element_rows(t, batch);
      double acc = 0;
      for (std::size_t i = 0; i < v.data.size(); ++i) acc += v.data[i] * up.data[i];
      return acc;
    });
    for (std::size_t k = 0; k < s.num_dims(); ++k) {
      ASSERT_EQ(g.has(k), !tt.is_identity(k));
      if (!g.has(k)) continue;
      EXPECT_LE(oracle::rel_err({g.cores[k].begin(), g.cores[k].end()}, fd[k], 1e-3), 1e-5)
          << to_string(kind) << " trial " << trial << " core " << k;
    }
  }
}

TEST(Backward, FourDimsThirtyTwoSamples) {
  std::mt19937_64 gen(11);
  const TtShape s{{3, 4, 2, 3}, 2};
  auto tt = init_random(s, clamp_ranks(max_rank_pyramid(s), 5), 1.0, 11);
  const auto batch = random_batch(gen, s, 32);
  const auto up = random_rows(gen, 32, 2);
  const auto g = backward(tt, batch, SamplerKind::V2, up);
  const auto fd = oracle::fd_core_grads(tt, [&](const TensorTrain<double>& t) {
    const auto v = element_rows(t, batch);
    double acc = 0;
    for (std::size_t i = 0; i < v.data.size(); ++i) acc += v.data[i] * up.data[i];
    return acc;
  });
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < fd[k].size(); ++i)
      EXPECT_LE(std::abs(g.cores[k][i] - fd[k][i]), 1e-5 * std::max(1.0, std::abs(fd[k][i])));
}

TEST(Backward, DeterministicAndLinear) {
  std::mt19937_64 gen(12);
  const TtShape s{{4, 4, 4, 4, 4}, 3};
  const auto tt = init_random(s, clamp_ranks(max_rank_pyramid(s), 6), 1.0, 3);
  const auto red = full_to_reduced(tt);
  const auto batch = random_batch(gen, s, 256);
  const auto u1 = random_rows(gen, 256, 3), u2 = random_rows(gen, 256, 3);
  Rows<double> u12(256, 3);
  for (std::size_t i = 0; i < u12.data.size(); ++i) u12.data[i] = u1.data[i] + u2.data[i];
  for (auto kind : kinds_all) {
    const auto& t = kind == SamplerKind::V3 ? red : tt;
    const auto a = backward(t, batch, kind, u1);
    EXPECT_EQ(a.cores, backward(t, batch, kind, u1).cores) << to_string(kind);
    const auto b = backward(t, batch, kind, u2);
    const auto ab = backward(t, batch, kind, u12);
    for (std::size_t k = 0; k < s.num_dims(); ++k)
      for (std::size_t i = 0; i < ab.cores[k].size(); ++i)
        EXPECT_NEAR(ab.cores[k][i], a.cores[k][i] + b.cores[k][i], 1e-12 * std::max(1.0, std::abs(ab.cores[k][i])));
  }
}

TEST(Backward, TapeReuseMatchesRecompute) {
  std::mt19937_64 gen(13);
  const TtShape s{{4, 4, 4}, 2};
  const auto tt = init_random(s, max_rank_pyramid(s), 1.0, 3);
  const auto batch = random_batch(gen, s, 50);
  const auto up = random_rows(gen, 50, 2);
  Tape<double> tape;
  sample(tt, batch, SamplerKind::V2, &tape);
  EXPECT_EQ(backward(tape, up).cores, backward(tt, batch, SamplerKind::V2, up).cores);
  EXPECT_THROW(backward(tape, Rows<double>(49, 2)), ShapeError);
}

TEST(CostModel, HandCountedExample) {
  const auto c = estimate_cost(SamplerKind::V1, {{2, 2}, 1}, R({1, 2, 1}), 1);
  EXPECT_EQ(c.flops, 8u);
}

TEST(CostModel, V3ZeroFlopsAtFullRank) {
  for (const TtShape& s : {TtShape{{4, 4, 4, 4}, 1}, TtShape{{2, 64, 64, 64, 2}, 1}, TtShape{{8, 8, 8}, 28}}) {
    const auto c = estimate_cost(SamplerKind::V3, s, max_rank_pyramid(s), 1024);
    EXPECT_EQ(c.flops, 0u);
  }
}

TEST(CostModel, FlopOrderingAndMemoryOrdering) {
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 200; ++trial) {
    const TtShape s = oracle::random_shape(gen, 2, 10, 2, 8, 1, 4, std::size_t{1} << 30);
    const TtRank r = oracle::random_clamped_rank(gen, s);
    const std::size_t bsz = 1 + gen() % 4096;
    for (bool training : {false, true}) {
      const auto v1 = estimate_cost(SamplerKind::V1, s, r, bsz, training);
      const auto v2 = estimate_cost(SamplerKind::V2, s, r, bsz, training);
      const auto v3 = estimate_cost(SamplerKind::V3, s, r, bsz, training);
      EXPECT_EQ(v1.flops, v2.flops);
      EXPECT_LE(v3.flops, v2.flops);
      if (v2.r_max() > 2) { EXPECT_LT(v2.peak_mem_elems, v1.peak_mem_elems); }
    }
  }
}

TEST(CostModel, MemoryRatioGrowsWithRank) {
  const TtShape s{{2, 64, 64, 64, 2}, 1};
  double prev = 0;
  for (std::size_t r : {4, 8, 16, 32, 64, 128}) {
    const TtRank rank = clamp_ranks(max_rank_pyramid(s), r);
    const double ratio = static_cast<double>(estimate_cost(SamplerKind::V1, s, rank, 1024).peak_mem_elems) /
                         static_cast<double>(estimate_cost(SamplerKind::V2, s, rank, 1024).peak_mem_elems);
    EXPECT_GT(ratio, prev);
    prev = ratio;
  }
}

TEST(CostModel, PeakMatchesMeasuredAllocations) {
  std::mt19937_64 gen(15);
  for (int trial = 0; trial < 40; ++trial) {
    const TtShape s = oracle::random_shape(gen, 2, 7, 2, 6, 1, 4, 1 << 16);
    const TtRank r = oracle::random_clamped_rank(gen, s);
    const auto tt = init_random(s, r, 1.0, gen());
    const auto red = full_to_reduced(tt);
    const auto batch = random_batch(gen, s, 1 + gen() % 200);
    for (auto kind : {SamplerKind::V1, SamplerKind::V2, SamplerKind::V3}) {
      for (bool training : {false, true}) {
        const auto& t = kind == SamplerKind::V3 ? red : tt;
        std::size_t peak = 0;
        {
          Tape<double> tape;
          PeakProbe probe;
          auto out = sample(t, batch, kind, training ? &tape : nullptr);
          peak = probe.peak();
        }
        EXPECT_EQ(peak, estimate_cost(kind, s, r, batch.count, training).peak_mem_elems)
            << to_string(kind) << " training=" << training << " trial " << trial;
      }
    }
  }
}

TEST(CostModel, CsvRow) {
  const auto c = estimate_cost(SamplerKind::V2, {{4, 4}, 1}, R({1, 4, 1}), 8);
  EXPECT_STREQ(cost_csv_header(), "kind,D,log2_numel,payload,r,B,params,flops,peak_mem_elems");
  EXPECT_EQ(cost_csv_row(c).substr(0, 14), "v2,2,4,1,4,8,3");
}
