#include "eqtrack/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace eqtrack {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw Error("tensor extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  data_.assign(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data_[0] = v;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
  std::int64_t n = shape_numel(shape);
  if (static_cast<std::int64_t>(data.size()) != n)
    throw Error("tensor data length " + std::to_string(data.size()) +
                " does not match shape " + shape_str(shape));
  for (double v : data)
    if (!std::isfinite(v)) throw Error("non-finite value rejected at tensor creation");
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = n;
  t.data_ = std::move(data);
  return t;
}

namespace {
std::int64_t flat_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
  if (idx.size() != shape.size()) throw Error("index rank mismatch");
  std::int64_t off = 0;
  size_t d = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape[d]) throw Error("index out of range");
    off = off * shape[d] + i;
    ++d;
  }
  return off;
}
}  // namespace

double& Tensor::at(std::initializer_list<int> idx) {
  return data_[static_cast<size_t>(flat_index(shape_, idx))];
}

double Tensor::at(std::initializer_list<int> idx) const {
  return data_[static_cast<size_t>(flat_index(shape_, idx))];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (shape_numel(shape) != numel_)
    throw Error("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                " changes element count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  t.data_ = data_;
  return t;
}

std::string Tensor::shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {
std::atomic<int> g_workers{0};

int default_workers() {
  if (const char* env = std::getenv("EQTRACK_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}
}  // namespace

int worker_count() {
  int n = g_workers.load();
  return n > 0 ? n : default_workers();
}

void set_worker_count(int n) { g_workers.store(n); }

void parallel_for(int n, const std::function<void(int)>& fn) {
  int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += workers) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace eqtrack
