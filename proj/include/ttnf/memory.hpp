#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <new>
#include <type_traits>
#include <vector>

namespace ttnf {

// Live and peak count of floating-point scalars held in Buffer<T> storage on
// the current thread. Index and permutation arrays are not counted.
struct AllocationCounter {
  std::size_t live = 0;
  std::size_t peak = 0;
};

inline AllocationCounter& allocation_counter() {
  thread_local AllocationCounter counter;
  return counter;
}

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if constexpr (std::is_floating_point_v<T>) {
      auto& c = allocation_counter();
      c.live += n;
      c.peak = std::max(c.peak, c.live);
    }
    return std::allocator<T>().allocate(n);
  }

  void deallocate(T* p, std::size_t n) noexcept {
    if constexpr (std::is_floating_point_v<T>) allocation_counter().live -= n;
    std::allocator<T>().deallocate(p, n);
  }

  template <typename U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

// Measures the peak number of scalars allocated above the level that was live
// when the probe was created.
class PeakProbe {
 public:
  PeakProbe() : baseline_(allocation_counter().live), saved_peak_(allocation_counter().peak) {
    allocation_counter().peak = baseline_;
  }
  ~PeakProbe() {
    auto& c = allocation_counter();
    c.peak = std::max(c.peak, saved_peak_);
  }
  PeakProbe(const PeakProbe&) = delete;
  PeakProbe& operator=(const PeakProbe&) = delete;

  std::size_t peak() const { return allocation_counter().peak - baseline_; }

 private:
  std::size_t baseline_;
  std::size_t saved_peak_;
};

}  // namespace ttnf
