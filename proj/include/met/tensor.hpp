#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "met/rng.hpp"

namespace met {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_str(const std::vector<int64_t>& shape);

// Dense row-major tensor of 64-bit floats. All arithmetic in this project runs
// in double precision; 32-bit storage exists only inside checkpoint files.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> data);
  static Tensor zeros_like(const Tensor& t);
  static Tensor randn(std::vector<int64_t> shape, RngStream& rng,
                      double stddev = 1.0, double mean = 0.0);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool is_scalar() const { return numel() == 1 && dim() <= 1; }

  // 2-D accessors; throw on other ranks.
  int64_t rows() const;
  int64_t cols() const;
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double item() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  // FNV-1a over the raw little-endian bytes; used for frozen-parameter checks.
  uint64_t bit_checksum() const;

  bool requires_grad = false;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

}  // namespace met
