#ifndef LSF_TENSOR_HPP
#define LSF_TENSOR_HPP

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsf {

/// Shape of a dense tensor, rank 1 to 3. Kept as a small value type so
/// tensors do not pay a heap allocation for their metadata.
struct Shape {
  std::array<int, 3> dims{0, 0, 0};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> ds) {
    if (ds.size() < 1 || ds.size() > 3) {
      throw std::invalid_argument("Shape: rank must be 1..3, got " + std::to_string(ds.size()));
    }
    rank = static_cast<int>(ds.size());
    int i = 0;
    for (int d : ds) {
      if (d <= 0) throw std::invalid_argument("Shape: dimensions must be positive");
      dims[i++] = d;
    }
  }

  int dim(int i) const { return dims[static_cast<size_t>(i)]; }
  int last() const { return dims[static_cast<size_t>(rank - 1)]; }

  std::int64_t size() const {
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= dims[static_cast<size_t>(i)];
    return n;
  }

  /// Number of rows when the tensor is viewed as a 2-D array over its last
  /// dimension (rank-1 tensors count as a single row).
  std::int64_t rows_flat() const { return size() / last(); }

  bool operator==(const Shape& o) const { return rank == o.rank && dims == o.dims; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank; ++i) os << (i ? "x" : "") << dims[static_cast<size_t>(i)];
    os << ']';
    return os.str();
  }
};

/// Dense row-major tensor of rank 1..3. The flat data layout is row-major
/// (last index varies fastest), which is also the on-disk layout of every
/// file format in this project.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(static_cast<size_t>(shape.size()), T(0)) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.size()) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T v) {
    Tensor t(shape);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return shape_.rank; }
  int dim(int i) const { return shape_.dim(i); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int i) { return data_[static_cast<size_t>(i)]; }
  const T& at(int i) const { return data_[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_.dim(1) + j]; }
  const T& at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_.dim(1) + j]; }
  T& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_.dim(1) + j) * shape_.dim(2) + k];
  }
  const T& at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_.dim(1) + j) * shape_.dim(2) + k];
  }

  /// 2-D Eigen view. Rank-1 tensors map to a single row; rank-3 tensors map
  /// to (d0*d1) x d2, which is exactly the "batch of rows" view every
  /// rowwise op in this project uses.
  Eigen::Map<MatrixRM> mat() {
    return Eigen::Map<MatrixRM>(data_.data(), shape_.rows_flat(), shape_.last());
  }
  Eigen::Map<const MatrixRM> mat() const {
    return Eigen::Map<const MatrixRM>(data_.data(), shape_.rows_flat(), shape_.last());
  }

  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> array() {
    return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(), size());
  }
  Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> array() const {
    return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(), size());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(d));
  }

 private:
  Shape shape_{};
  std::vector<T> data_{};
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  }
  return (a.array() - b.array()).abs().maxCoeff();
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return a.array().isFinite().all();
}

/// Relative error used by all gradient checks:
/// |x - y| / max(|x|, |y|, floor).
template <typename T>
T relative_error(T x, T y, T floor = T(1e-8)) {
  T denom = std::max({std::abs(x), std::abs(y), floor});
  return std::abs(x - y) / denom;
}

}  // namespace lsf

#endif  // LSF_TENSOR_HPP
