#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace subseg {

/// Dense row-major double tensor. Rank and sizes are dynamic; all autodiff
/// values, feature maps and model parameters use this one container.
struct Tensor {
  std::vector<long> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<long> shape, double fill = 0.0)
      : dims(std::move(shape)), data(static_cast<size_t>(checked_numel(dims)), fill) {}

  static long checked_numel(const std::vector<long>& d) {
    if (d.empty()) throw std::invalid_argument("tensor: rank 0 not supported");
    long n = 1;
    for (long v : d) {
      if (v <= 0) throw std::invalid_argument("tensor: dims must be positive");
      n *= v;
    }
    return n;
  }

  long numel() const { return static_cast<long>(data.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  long dim(int i) const { return dims.at(static_cast<size_t>(i)); }

  double operator[](long i) const { return data[static_cast<size_t>(i)]; }
  double& operator[](long i) { return data[static_cast<size_t>(i)]; }

  double at2(long i, long j) const { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double& at2(long i, long j) { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double at3(long c, long y, long x) const {
    return data[static_cast<size_t>((c * dims[1] + y) * dims[2] + x)];
  }
  double& at3(long c, long y, long x) {
    return data[static_cast<size_t>((c * dims[1] + y) * dims[2] + x)];
  }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  static Tensor zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<long> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }
  static Tensor from(std::vector<long> shape, std::vector<double> values) {
    Tensor t;
    t.dims = std::move(shape);
    if (checked_numel(t.dims) != static_cast<long>(values.size()))
      throw std::invalid_argument("tensor: value count does not match shape");
    t.data = std::move(values);
    return t;
  }
};

inline std::string shape_str(const std::vector<long>& d) {
  std::string s = "[";
  for (size_t i = 0; i < d.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(d[i]);
  }
  return s + "]";
}

}  // namespace subseg
