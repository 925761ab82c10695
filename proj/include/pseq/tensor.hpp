#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseq {

/// Dense numeric array of rank 1..4, channels-last layout for feature maps
/// (batch x height x width x channels). Carries an optional gradient buffer
/// of identical shape. Element type is float for the fast path and double
/// for verification.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(const std::vector<int>& shape) { reshape(shape); }
  Tensor(std::initializer_list<int> shape) { reshape(std::vector<int>(shape)); }

  static Tensor zeros(const std::vector<int>& shape) { return Tensor(shape); }

  static Tensor full(const std::vector<int>& shape, T value) {
    Tensor t(shape);
    std::fill(t.v_.begin(), t.v_.end(), value);
    return t;
  }

  static Tensor from_values(const std::vector<int>& shape, std::vector<T> values) {
    Tensor t(shape);
    if (static_cast<int64_t>(values.size()) != t.size()) {
      throw std::invalid_argument("Tensor::from_values: " + std::to_string(values.size()) +
                                  " values for shape " + t.shape_str());
    }
    t.v_ = std::move(values);
    return t;
  }

  /// Uniform values in [lo, hi) from the given engine.
  static Tensor uniform(const std::vector<int>& shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
    Tensor t(shape);
    std::uniform_real_distribution<T> dist(lo, hi);
    for (auto& x : t.v_) x = dist(rng);
    return t;
  }

  void reshape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4) {
      throw std::invalid_argument("Tensor: rank must be 1..4, got " + std::to_string(shape.size()));
    }
    rank_ = static_cast<int>(shape.size());
    // dims are right-aligned into the 4 slots so that operator()(i, j) on a
    // rank-2 tensor addresses the last two axes
    dims_ = {1, 1, 1, 1};
    for (int i = 0; i < rank_; ++i) {
      if (shape[i] < 0) throw std::invalid_argument("Tensor: negative dimension");
      dims_[static_cast<size_t>(4 - rank_ + i)] = shape[i];
    }
    int64_t n = 1;
    for (int i = 0; i < 4; ++i) n *= dims_[static_cast<size_t>(i)];
    stride_[3] = 1;
    for (int i = 2; i >= 0; --i) stride_[i] = stride_[i + 1] * dims_[static_cast<size_t>(i + 1)];
    v_.assign(static_cast<size_t>(n), T(0));
    g_.clear();
  }

  int rank() const { return rank_; }
  int dim(int i) const { return dims_[static_cast<size_t>(4 - rank_ + i)]; }
  std::vector<int> shape() const { return std::vector<int>(dims_.begin() + (4 - rank_), dims_.end()); }
  int64_t size() const { return static_cast<int64_t>(v_.size()); }
  bool empty() const { return v_.empty(); }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dim(i);
    os << ")";
    return os.str();
  }

  bool same_shape(const Tensor& o) const { return rank_ == o.rank_ && dims_ == o.dims_; }

  T* data() { return v_.data(); }
  const T* data() const { return v_.data(); }
  std::vector<T>& values() { return v_; }
  const std::vector<T>& values() const { return v_; }

  T& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

  int64_t offset(int i, int j, int k, int l) const {
    return i * stride_[0] + j * stride_[1] + k * stride_[2] + l;
  }

  T& operator()(int i) { return v_[static_cast<size_t>(i)]; }
  const T& operator()(int i) const { return v_[static_cast<size_t>(i)]; }
  T& operator()(int i, int j) { return v_[static_cast<size_t>(i * stride_[2] + j)]; }
  const T& operator()(int i, int j) const { return v_[static_cast<size_t>(i * stride_[2] + j)]; }
  T& operator()(int i, int j, int k) { return v_[static_cast<size_t>(i * stride_[1] + j * stride_[2] + k)]; }
  const T& operator()(int i, int j, int k) const {
    return v_[static_cast<size_t>(i * stride_[1] + j * stride_[2] + k)];
  }
  T& operator()(int i, int j, int k, int l) { return v_[static_cast<size_t>(offset(i, j, k, l))]; }
  const T& operator()(int i, int j, int k, int l) const { return v_[static_cast<size_t>(offset(i, j, k, l))]; }

  // Gradient buffer. Absent until ensure_grad(); always the same shape as the values.
  bool has_grad() const { return !g_.empty(); }
  void ensure_grad() {
    if (g_.empty()) g_.assign(v_.size(), T(0));
  }
  void zero_grad() { std::fill(g_.begin(), g_.end(), T(0)); }
  void drop_grad() { g_.clear(); }
  std::vector<T>& grad() {
    ensure_grad();
    return g_;
  }
  const std::vector<T>& grad() const {
    if (g_.empty()) throw std::logic_error("Tensor: gradient buffer not allocated");
    return g_;
  }
  void accumulate_grad(const Tensor& dx) {
    if (!same_shape(dx)) {
      throw std::invalid_argument("Tensor: gradient shape " + dx.shape_str() + " != value shape " + shape_str());
    }
    ensure_grad();
    for (size_t i = 0; i < g_.size(); ++i) g_[i] += dx.v_[i];
  }

  void fill(T value) { std::fill(v_.begin(), v_.end(), value); }

  /// Lossy dtype conversion, used at the 32/64-bit verification boundary.
  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.reshape(shape());
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(v_[static_cast<size_t>(i)]);
    return out;
  }

 private:
  std::array<int, 4> dims_{0, 0, 0, 0};
  std::array<int64_t, 4> stride_{0, 0, 0, 0};
  int rank_ = 0;
  std::vector<T> v_;
  std::vector<T> g_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace pseq
