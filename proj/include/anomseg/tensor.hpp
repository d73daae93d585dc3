#pragma once

#include <cassert>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <vector>

namespace anomseg {

// 64-byte-aligned storage for everything that reaches the GEMM kernels.
// Uniform alignment keeps those kernels on one code path, which makes results
// bitwise reproducible across allocations within a process.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}

  T* allocate(std::size_t n) {
    std::size_t bytes = (n * sizeof(T) + Align - 1) / Align * Align;
    void* p = std::aligned_alloc(Align, bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const {
    return true;
  }
};

using AlignedVec = std::vector<double, AlignedAllocator<double, 64>>;

// Dense row-major double tensor, rank <= 4. All network math runs in double
// so analytic gradients can be checked against float64 central differences.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<long> shape);

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<long> shape, double v);
  static Tensor scalar(double v);

  const std::vector<long>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  long dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  long numel() const { return static_cast<long>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  // [N,C,H,W] accessor
  double& at4(long n, long c, long y, long x) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  double at4(long n, long c, long y, long x) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  double& at2(long i, long j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at2(long i, long j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at3(long c, long y, long x) {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }
  double at3(long c, long y, long x) const {
    return data_[static_cast<size_t>((c * shape_[1] + y) * shape_[2] + x)];
  }

  void fill(double v);
  Tensor reshaped(std::vector<long> shape) const;

  bool allclose(const Tensor& o, double atol, double rtol = 0.0) const;
  double max_abs() const;

 private:
  std::vector<long> shape_;
  AlignedVec data_;
};

// 8-bit single-channel plane (semantic maps, gt maps).
struct ByteMap {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  ByteMap() = default;
  ByteMap(int height, int width, uint8_t fill_value = 0)
      : h(height), w(width), v(static_cast<size_t>(height) * width, fill_value) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  bool operator==(const ByteMap&) const = default;
};

}  // namespace anomseg
