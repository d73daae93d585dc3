#include "anomseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "anomseg/common.hpp"

namespace anomseg {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Tensor::Tensor(std::vector<long> shape) : shape_(std::move(shape)) {
  long n = 1;
  for (long d : shape_) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  data_.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::full(std::vector<long> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t(std::vector<long>{1});
  t[0] = v;
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(std::vector<long> shape) const {
  Tensor t = *this;
  long n = 1;
  for (long d : shape) n *= d;
  if (n != numel()) throw std::invalid_argument("reshape changes element count");
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::allclose(const Tensor& o, double atol, double rtol) const {
  if (!same_shape(o)) return false;
  for (long i = 0; i < numel(); ++i) {
    double a = data_[static_cast<size_t>(i)];
    double b = o.data_[static_cast<size_t>(i)];
    if (std::abs(a - b) > atol + rtol * std::abs(b)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace anomseg
