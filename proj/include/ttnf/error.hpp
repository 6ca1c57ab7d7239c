#pragma once

#include <atomic>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace ttnf {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Extents, shapes or ranks that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A multi-index, voxel or point outside its valid domain.
class IndexError : public Error {
 public:
  using Error::Error;
};

// An allocation that would exceed the configured element budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// SVD non-convergence, non-finite values and similar.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A TT-rank that is not a clamped pyramid, or a tensor train that is not in
// the reduced parameterization when one is required.
class RankPatternError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename E = Error>
inline void require(bool cond, const std::string& what) {
  if (!cond) throw E(what);
}

}  // namespace detail

// Element budget (in scalars) used by contract(), v1 sampling and the dense
// gather baseline when no explicit budget is passed.
inline std::atomic<std::size_t>& default_mem_budget() {
  static std::atomic<std::size_t> budget{std::size_t{1} << 28};
  return budget;
}

}  // namespace ttnf
