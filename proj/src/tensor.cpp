#include "met/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace met {

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {
size_t checked_numel(const std::vector<int64_t>& shape) {
  size_t n = 1;
  for (const int64_t e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= static_cast<size_t>(e);
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, double fill)
    : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data_[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> data) {
  if (checked_numel(shape) != data.size()) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape_); }

Tensor Tensor::randn(std::vector<int64_t> shape, RngStream& rng,
                     double stddev, double mean) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = mean + stddev * rng.normal();
  return t;
}

int64_t Tensor::rows() const {
  if (dim() != 2) throw ShapeError("rows(): tensor is not 2-D: " + shape_str(shape_));
  return shape_[0];
}

int64_t Tensor::cols() const {
  if (dim() != 2) throw ShapeError("cols(): tensor is not 2-D: " + shape_str(shape_));
  return shape_[1];
}

double& Tensor::at(int64_t r, int64_t c) {
  return data_[static_cast<size_t>(r * cols() + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
  return data_[static_cast<size_t>(r * cols() + c)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (const double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

uint64_t Tensor::bit_checksum() const {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const double v : data_) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace met
