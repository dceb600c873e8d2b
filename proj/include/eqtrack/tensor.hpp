#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqtrack {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v);
  // Creation boundary for external data: validates size and rejects NaN/Inf.
  static Tensor from(std::vector<int> shape, std::vector<double> data);

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return numel_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int> idx);
  double at(std::initializer_list<int> idx) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  double max_abs() const;
  double sum() const;  // fixed sequential order

  Tensor reshaped(std::vector<int> shape) const;

  static std::string shape_str(const std::vector<int>& s);

 private:
  std::vector<int> shape_;
  std::int64_t numel_ = 0;
  std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<int>& shape);

// Static channel-partitioned parallelism; results are bit-identical for any
// thread count because each worker owns a disjoint slice and inner loops have
// a fixed order.
int worker_count();
void set_worker_count(int n);  // 0 restores hardware default
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace eqtrack
