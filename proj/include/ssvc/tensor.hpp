#pragma once

#include <algorithm>
#include <new>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace ssvc {

/// Malformed input data or model state (CLI exit status 2).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad command-line usage or configuration (CLI exit status 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename... Args>
[[nodiscard]] inline std::string cat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

#define SSVC_CHECK(cond, ...)                                \
  do {                                                       \
    if (!(cond)) throw std::invalid_argument(::ssvc::cat(__VA_ARGS__)); \
  } while (0)

/// 64-byte aligned allocator. Eigen's vectorised loops peel to aligned addresses, so results are only
/// reproducible run to run when every buffer it touches starts on the same boundary.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }
  template <typename U>
  bool operator==(const AlignedAllocator<U, Align>&) const noexcept { return true; }
};

/// Float buffer safe to hand to Eigen kernels.
using fvec = std::vector<float, AlignedAllocator<float>>;

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                         [](std::int64_t a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense row-major float tensor. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), fill) {
    for (int d : shape_) SSVC_CHECK(d >= 0, "negative dimension in ", shape_str(shape_));
  }
  Tensor(Shape shape, const std::vector<float>& data) : Tensor(std::move(shape), fvec(data.begin(), data.end())) {}
  Tensor(Shape shape, fvec data) : shape_(std::move(shape)), data_(std::move(data)) {
    SSVC_CHECK(static_cast<std::int64_t>(data_.size()) == shape_size(shape_),
               "data length ", data_.size(), " does not match shape ", shape_str(shape_));
  }

  static Tensor matrix(int rows, int cols, float fill = 0.0f) { return Tensor({rows, cols}, fill); }
  static Tensor vector(const std::vector<float>& v) { return Tensor({static_cast<int>(v.size())}, v); }
  static Tensor scalar(float v) { return Tensor({1}, fvec{v}); }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int rank() const { return static_cast<int>(shape_.size()); }
  [[nodiscard]] int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  /// Rows/cols of the tensor viewed as a matrix whose last axis is the column axis.
  [[nodiscard]] int cols() const { return shape_.empty() ? 1 : shape_.back(); }
  [[nodiscard]] int rows() const {
    const int c = cols();
    return c == 0 ? 0 : static_cast<int>(size() / c);
  }

  float* data() { return data_.data(); }
  [[nodiscard]] const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  [[nodiscard]] std::span<const float> values() const { return data_; }
  fvec& storage() { return data_; }
  [[nodiscard]] const fvec& storage() const { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  [[nodiscard]] float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  float* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols(); }
  [[nodiscard]] const float* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols(); }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    SSVC_CHECK(shape_size(s) == size(), "cannot reshape ", shape_str(shape_), " to ", shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  fvec data_;
};

namespace kernel {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

/// C[m x n] (+)= A[m x k] * B[k x n], all row-major and contiguous.
inline void gemm_nn(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
  MapM cm(c, m, n);
  if (accumulate)
    cm.noalias() += MapC(a, m, k) * MapC(b, k, n);
  else
    cm.noalias() = MapC(a, m, k) * MapC(b, k, n);
}

inline fvec transpose(const float* a, int rows, int cols) {
  fvec t(static_cast<std::size_t>(rows) * cols);
  MapM(t.data(), cols, rows) = MapC(a, rows, cols).transpose();
  return t;
}

/// C[m x n] (+)= A[m x k] * B[n x k]^T
inline void gemm_nt(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
  MapM cm(c, m, n);
  if (accumulate)
    cm.noalias() += MapC(a, m, k) * MapC(b, n, k).transpose();
  else
    cm.noalias() = MapC(a, m, k) * MapC(b, n, k).transpose();
}

/// C[m x n] (+)= A[k x m]^T * B[k x n]
inline void gemm_tn(const float* a, const float* b, float* c, int m, int n, int k, bool accumulate) {
  MapM cm(c, m, n);
  if (accumulate)
    cm.noalias() += MapC(a, k, m).transpose() * MapC(b, k, n);
  else
    cm.noalias() = MapC(a, k, m).transpose() * MapC(b, k, n);
}

}  // namespace kernel

/// Plain (non-differentiable) matrix product of rank-2 tensors.
inline Tensor matmul_values(const Tensor& a, const Tensor& b) {
  SSVC_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul shape mismatch ",
             shape_str(a.shape()), " x ", shape_str(b.shape()));
  Tensor c = Tensor::matrix(a.dim(0), b.dim(1));
  kernel::gemm_nn(a.data(), b.data(), c.data(), a.dim(0), b.dim(1), a.dim(1), false);
  return c;
}

}  // namespace ssvc
