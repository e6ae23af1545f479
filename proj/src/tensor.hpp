#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace pp {

/// Dense row-major tensor of doubles. Shapes are small (<= 4 dims in
/// practice); everything at desk scale fits comfortably in memory.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor randn(std::vector<int> shape, std::mt19937_64& rng,
                      double sigma, double mean = 0.0);

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int numel() const { return static_cast<int>(data_.size()); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int i) const { return data_[static_cast<size_t>(i)]; }

  double& at(int i, int j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }
  double& at(int i, int j, int k) {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  double at(int i, int j, int k) const {
    return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
  }
  double& at(int i, int j, int k, int l) {
    return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }
  double at(int i, int j, int k, int l) const {
    return data_[static_cast<size_t>(((i * dim(1) + j) * dim(2) + k) * dim(3) + l)];
  }

  bool all_finite() const;
  double max_abs() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

int shape_numel(const std::vector<int>& shape);

/// Checkpoint container: magic, little-endian u64 header length, JSON header
/// (tensor directory plus a free-form manifest), then raw little-endian f64
/// payload. Round trips are bit-exact.
struct TensorFile {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void save_tensor_file(const std::string& path, const TensorFile& file);
TensorFile load_tensor_file(const std::string& path);

}  // namespace pp
