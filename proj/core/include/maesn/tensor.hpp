#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maesn {

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 (vector) and
/// 2 (matrix) are the only ranks the op set needs.
struct Tensor {
  std::vector<long> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<long> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (numel(shape) != static_cast<long>(v.size()))
      throw std::invalid_argument("Tensor: shape/data size mismatch: " +
                                  shape_str() + " vs " + std::to_string(v.size()));
  }

  static long numel(const std::vector<long>& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
  }

  static Tensor scalar(double x) { return Tensor({}, {x}); }
  static Tensor zeros(std::vector<long> s) {
    long n = numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(std::vector<long> s, double x) {
    long n = numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), x));
  }
  static Tensor vector(std::vector<double> data) {
    long n = static_cast<long>(data.size());
    return Tensor({n}, std::move(data));
  }
  static Tensor matrix(long rows, long cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  long size() const { return static_cast<long>(v.size()); }
  long rows() const { return shape.empty() ? 1 : shape[0]; }
  long cols() const { return shape.size() < 2 ? (shape.empty() ? 1 : shape[0]) : shape[1]; }

  double& at(long i) { return v[static_cast<size_t>(i)]; }
  double at(long i) const { return v[static_cast<size_t>(i)]; }
  double& at(long i, long j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
  double at(long i, long j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }

  double item() const {
    if (v.size() != 1) throw std::invalid_argument("Tensor::item on non-scalar " + shape_str());
    return v[0];
  }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw std::invalid_argument(what + ": non-finite values");
}

}  // namespace maesn
