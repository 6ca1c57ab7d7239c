#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "ttnf/sampling.hpp"
#include "ttnf/tensor_train.hpp"

namespace ttnf {

// Analytic cost of one forward sampling call.
struct CostReport {
  SamplerKind kind = SamplerKind::V2;
  TtShape shape;
  TtRank rank;
  std::size_t batch = 0;
  bool training = false;
  std::size_t params = 0;          // trainable scalars
  std::size_t flops = 0;           // 2 x multiply-adds
  std::size_t peak_mem_elems = 0;  // transient scalars, including the output

  std::size_t r_max() const {
    std::size_t r = 1;
    for (std::size_t k = 1; k + 1 < rank.size(); ++k) r = std::max(r, rank[k]);
    return rank.size() <= 2 ? rank[rank.size() - 1] : r;
  }
};

namespace detail {

inline std::size_t sat_add(std::size_t a, std::size_t b) {
  return a > std::numeric_limits<std::size_t>::max() - b ? std::numeric_limits<std::size_t>::max() : a + b;
}

// Peak of the BIMVP chain over cores [first, last] (0-based), following the
// allocation order of the implementation: the grouped copy of v lives next to
// v, then next to the step output; the final un-permute writes a B x payload
// block while the last chain vector is alive. In training mode the grouped
// inputs of every step stay alive.
inline std::size_t chain_peak(const TtRank& r, std::size_t payload, std::size_t first, std::size_t last,
                              std::size_t b, bool training) {
  if (first == last) return b * payload;
  std::size_t cached = 0;
  std::size_t peak = b * r[first + 1];
  for (std::size_t k = first + 1; k <= last; ++k) {
    const std::size_t rl = r[k], rr = r[k + 1];
    peak = std::max(peak, cached + b * std::max(2 * rl, rl + rr));
    if (training) cached += b * rl;
  }
  return std::max(peak, cached + b * (r[last + 1] + payload));
}

}  // namespace detail

// FLOPs (two per multiply-add), peak activation memory in scalars, and the
// trainable parameter count of one forward sampling call.
//
// v1 and v2 count every slice product of the chain, including the first
// (row-vector) core: 2B sum_k R_{k-1} R_k. v3 counts the cores inside the
// reduced window after the first; the first window core is counted only when
// it is also the first tensor-train core, which makes v3 and v2 agree exactly
// when nothing is reduced. A window of a single core is pure indexing.
// The dense baseline counts the GEMMs of the contraction.
inline CostReport estimate_cost(SamplerKind kind, const TtShape& shape, const TtRank& rank, std::size_t batch,
                                bool training = false) {
  check_rank(shape, rank);
  detail::require<ShapeError>(batch >= 1, "estimate_cost: batch must be positive");
  const std::size_t d = shape.num_dims();
  const std::size_t payload = shape.payload;
  const std::size_t b = batch;

  CostReport rep;
  rep.kind = kind;
  rep.shape = shape;
  rep.rank = rank;
  rep.batch = batch;
  rep.training = training;

  std::size_t stored = 0;
  std::size_t chain = 0;  // sum_k R_{k-1} R_k
  for (std::size_t k = 0; k < d; ++k) {
    stored = detail::sat_add(stored, rank[k] * shape.modes[k] * rank[k + 1]);
    chain += rank[k] * rank[k + 1];
  }

  switch (kind) {
    case SamplerKind::V1: {
      rep.params = stored;
      rep.flops = 2 * b * chain;
      const std::size_t slices = b * chain;
      std::size_t peak = slices + b * rank[1];
      std::size_t cached = 0;
      for (std::size_t k = 1; k < d; ++k) {
        peak = std::max(peak, slices + cached + b * (rank[k] + rank[k + 1]));
        if (training) cached += b * rank[k];
      }
      rep.peak_mem_elems = peak;
      break;
    }
    case SamplerKind::V2:
      rep.params = stored;
      rep.flops = 2 * b * chain;
      rep.peak_mem_elems = detail::chain_peak(rank, payload, 0, d - 1, b, training);
      break;
    case SamplerKind::V3: {
      const ReducedWindow w = reduced_window(shape, rank);
      rep.params = 0;
      for (std::size_t k = w.first; k <= w.last; ++k) rep.params += rank[k] * shape.modes[k] * rank[k + 1];
      if (w.first != w.last) {
        std::size_t s = w.first == 0 ? rank[0] * rank[1] : 0;
        for (std::size_t k = w.first + 1; k <= w.last; ++k) s += rank[k] * rank[k + 1];
        rep.flops = 2 * b * s;
      }
      rep.peak_mem_elems = detail::chain_peak(rank, payload, w.first, w.last, b, training);
      break;
    }
    case SamplerKind::DenseGather: {
      rep.params = stored;
      std::size_t prefix = shape.modes[0];
      std::size_t flops = 0;
      std::size_t peak = prefix * rank[1];
      for (std::size_t k = 1; k < d; ++k) {
        const std::size_t next = detail::sat_mul(detail::sat_mul(prefix, shape.modes[k]), rank[k + 1]);
        flops = detail::sat_add(flops, detail::sat_mul(2 * rank[k], next));
        peak = std::max(peak, detail::sat_add(detail::sat_mul(prefix, rank[k]), next));
        prefix = detail::sat_mul(prefix, shape.modes[k]);
      }
      rep.flops = flops;
      rep.peak_mem_elems = std::max(peak, detail::sat_add(detail::sat_mul(prefix, payload), b * payload));
      break;
    }
  }
  return rep;
}

inline const char* cost_csv_header() { return "kind,D,log2_numel,payload,r,B,params,flops,peak_mem_elems"; }

inline std::string cost_csv_row(const CostReport& c) {
  double log2n = 0;
  for (auto m : c.shape.modes) log2n += std::log2(static_cast<double>(m));
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", log2n);
  return std::string(to_string(c.kind)) + "," + std::to_string(c.shape.num_dims()) + "," + buf + "," +
         std::to_string(c.shape.payload) + "," + std::to_string(c.r_max()) + "," + std::to_string(c.batch) +
         "," + std::to_string(c.params) + "," + std::to_string(c.flops) + "," +
         std::to_string(c.peak_mem_elems);
}

inline void write_cost_csv(std::ostream& os, const std::vector<CostReport>& rows) {
  os << cost_csv_header() << '\n';
  for (const auto& r : rows) os << cost_csv_row(r) << '\n';
}

}  // namespace ttnf
