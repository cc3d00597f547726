#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

#include "sejd/errors.hpp"

namespace sejd {

// Dense row-major matrix. Sequences (L x D), weights and activations all
// live in one of these.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data);

  static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows);
  static BasicMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  void fill(T value);
  // Resize without preserving contents; keeps capacity.
  void reshape(std::size_t rows, std::size_t cols);

  bool same_shape(const BasicMatrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

// splitmix64 stream with Box-Muller normals. The second normal of each
// Box-Muller pair is cached and returned by the next normal() call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept;
  // Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform() noexcept;
  double normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::vector<double> gaussian(Rng& rng, std::size_t n);

template <typename T>
BasicMatrix<T> gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0);

// out = a * b. Every output cell is summed over k in ascending order, so the
// result is bit-identical to the textbook triple loop.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <typename T>
void matmul_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out);
// out (+)= a^T * b and out (+)= a * b^T, used by the backward pass.
template <typename T>
void matmul_tn_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out);
template <typename T>
void matmul_nt_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out,
                    bool accumulate = false);

template <typename T>
T inf_norm_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <typename T>
T l2_norm_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <typename T>
T squared_norm(const BasicMatrix<T>& a);
template <typename T>
T cosine_similarity(const BasicMatrix<T>& a, const BasicMatrix<T>& b);

template <typename T>
bool all_finite(const BasicMatrix<T>& m);

}  // namespace sejd
