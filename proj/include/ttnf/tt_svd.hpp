#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include <Eigen/SVD>

#include "ttnf/dense_tensor.hpp"
#include "ttnf/error.hpp"
#include "ttnf/tensor_train.hpp"

namespace ttnf {

// Left-to-right TT-SVD sweep with exact rank caps. At step k the remainder is
// reshaped to (R_{k-1} M_k) x (rest), the leading min(cap_k, rows, cols)
// left singular vectors become core k, and S V^T carries on to the next step.
// The returned rank may be smaller than the cap where the unfolding is
// narrower than the cap.
//
// Repeated singular values make the cores non-unique; the ordering returned
// by Eigen's BDCSVD is kept as is.
template <typename T>
TensorTrain<T> tt_svd(const DenseTensor<T>& dense, const TtShape& shape, const TtRank& rank_cap) {
  shape.validate();
  const std::size_t d = shape.num_dims();
  detail::require<ShapeError>(dense.size() == detail::sat_mul(shape.numel(), shape.payload),
                              "tt_svd: dense tensor does not reshape to the target shape");
  detail::require<ShapeError>(rank_cap.size() == d + 1, "tt_svd: rank cap must have D+1 entries");

  std::vector<std::vector<T>> cores(d);
  std::vector<std::size_t> ranks(d + 1, 1);
  ranks[d] = shape.payload;

  std::vector<T> rest(dense.data().begin(), dense.data().end());
  std::size_t cols_total = dense.size();
  for (std::size_t k = 0; k + 1 < d; ++k) {
    const std::size_t rows = ranks[k] * shape.modes[k];
    const std::size_t cols = cols_total / rows;
    ConstRowMap<T> mat(rest.data(), rows, cols);
    Eigen::BDCSVD<RowMat<T>> svd(mat, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericalError("tt_svd: SVD did not converge");
    const std::size_t r = std::max<std::size_t>(
        1, std::min({static_cast<std::size_t>(rank_cap[k + 1]), rows, cols}));
    ranks[k + 1] = r;

    cores[k].resize(rows * r);
    // A zero remainder yields zero cores instead of an arbitrary basis.
    if (svd.singularValues().size() == 0 || svd.singularValues()(0) == T(0))
      RowMap<T>(cores[k].data(), rows, r).setZero();
    else
      RowMap<T>(cores[k].data(), rows, r) = svd.matrixU().leftCols(r);

    std::vector<T> next(r * cols);
    RowMap<T>(next.data(), r, cols).noalias() =
        svd.singularValues().head(r).asDiagonal() * svd.matrixV().leftCols(r).transpose();
    rest = std::move(next);
    cols_total = r * cols;
  }
  cores[d - 1] = std::move(rest);

  TtRank rank{ranks};
  TensorTrain<T> tt(shape, rank);
  for (std::size_t k = 0; k < d; ++k) std::copy(cores[k].begin(), cores[k].end(), tt.core(k).begin());
  return tt;
}

}  // namespace ttnf
