#include "sejd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

namespace sejd {

const char* to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::kIo: return "io";
    case CheckpointErrorKind::kBadMagic: return "bad-magic";
    case CheckpointErrorKind::kVersionMismatch: return "version-mismatch";
    case CheckpointErrorKind::kTruncated: return "truncated";
    case CheckpointErrorKind::kDimensionOverflow: return "dimension-overflow";
    case CheckpointErrorKind::kSchemaMismatch: return "schema-mismatch";
  }
  return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrorKind kind, std::uint64_t offset,
                                 std::string record, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + " at byte " + std::to_string(offset) +
                         (record.empty() ? std::string() : " (record '" + record + "')") +
                         ": " + detail),
      kind_(kind),
      offset_(offset),
      record_(std::move(record)) {}

// ---------------------------------------------------------------------------
// BasicMatrix

template <typename T>
BasicMatrix<T>::BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ContractError("matrix data length " + std::to_string(data_.size()) +
                        " != rows*cols " + std::to_string(rows_ * cols_));
  }
}

template <typename T>
BasicMatrix<T> BasicMatrix<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ContractError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return BasicMatrix(r, c, std::move(data));
}

template <typename T>
BasicMatrix<T> BasicMatrix<T>::identity(std::size_t n) {
  BasicMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
  return out;
}

template <typename T>
void BasicMatrix<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void BasicMatrix<T>::reshape(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  data_.resize(rows * cols);
}

template class BasicMatrix<float>;
template class BasicMatrix<double>;

// ---------------------------------------------------------------------------
// Rng

std::uint64_t Rng::next_u64() noexcept {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() noexcept {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  if (n <= 1) return 0;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

std::vector<double> gaussian(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

template <typename T>
BasicMatrix<T> gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  BasicMatrix<T> out(rows, cols);
  for (auto& v : out.values()) v = static_cast<T>(stddev * rng.normal());
  return out;
}

template Matrix gaussian_matrix<float>(Rng&, std::size_t, std::size_t, double);
template MatrixD gaussian_matrix<double>(Rng&, std::size_t, std::size_t, double);

// ---------------------------------------------------------------------------
// Products

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;

// 64-byte SIMD lane group; the compiler lowers it to whatever the target has.
template <typename T>
struct Lanes {
  typedef T type __attribute__((vector_size(64)));
  static constexpr std::size_t kWidth = 64 / sizeof(T);
  static constexpr std::size_t kPerTile = kTileCols / kWidth;
};

template <typename T>
typename Lanes<T>::type load_lanes(const T* p) {
  typename Lanes<T>::type v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
void store_lanes(T* p, const typename Lanes<T>::type& v) {
  std::memcpy(p, &v, sizeof v);
}

// Separate multiply and add per k (no contraction), so every lane follows the
// scalar k-ascending recurrence exactly.
template <typename T>
void full_tile(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t depth) {
  using V = typename Lanes<T>::type;
  constexpr std::size_t kV = Lanes<T>::kPerTile;
  V acc[kTileRows][kV] = {};
  for (std::size_t k = 0; k < depth; ++k) {
    V bv[kV];
    for (std::size_t v = 0; v < kV; ++v) bv[v] = load_lanes(b + k * ldb + v * Lanes<T>::kWidth);
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const V av = V{} + a[r * lda + k];
      for (std::size_t v = 0; v < kV; ++v) acc[r][v] = acc[r][v] + av * bv[v];
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    for (std::size_t v = 0; v < kV; ++v) store_lanes(c + r * ldc + v * Lanes<T>::kWidth, acc[r][v]);
  }
}

// Single-row variant; the incremental decoder lives on this path.
template <typename T>
void row_tile(const T* a, const T* b, std::size_t ldb, T* c, std::size_t depth) {
  using V = typename Lanes<T>::type;
  constexpr std::size_t kV = Lanes<T>::kPerTile;
  V acc[kV] = {};
  for (std::size_t k = 0; k < depth; ++k) {
    const V av = V{} + a[k];
    for (std::size_t v = 0; v < kV; ++v) {
      acc[v] = acc[v] + av * load_lanes(b + k * ldb + v * Lanes<T>::kWidth);
    }
  }
  for (std::size_t v = 0; v < kV; ++v) store_lanes(c + v * Lanes<T>::kWidth, acc[v]);
}

template <typename T>
void edge_tile(const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc,
               std::size_t depth, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) {
      T sum = T{0};
      for (std::size_t k = 0; k < depth; ++k) sum += a[r * lda + k] * b[k * ldb + j];
      c[r * ldc + j] = sum;
    }
  }
}

}  // namespace

template <typename T>
void matmul_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                        " vs " + std::to_string(b.rows()) + ")");
  }
  const std::size_t n = a.rows();
  const std::size_t depth = a.cols();
  const std::size_t m = b.cols();
  out.reshape(n, m);
  const T* ap = a.data();
  const T* bp = b.data();
  T* cp = out.data();
  for (std::size_t i0 = 0; i0 < n; i0 += kTileRows) {
    const std::size_t rows = std::min(kTileRows, n - i0);
    for (std::size_t j0 = 0; j0 < m; j0 += kTileCols) {
      const std::size_t cols = std::min(kTileCols, m - j0);
      const T* at = ap + i0 * depth;
      T* ct = cp + i0 * m + j0;
      if (cols == kTileCols && rows == kTileRows) {
        full_tile(at, depth, bp + j0, m, ct, m, depth);
      } else if (cols == kTileCols) {
        for (std::size_t r = 0; r < rows; ++r) {
          row_tile(at + r * depth, bp + j0, m, ct + r * m, depth);
        }
      } else {
        edge_tile(at, depth, bp + j0, m, ct, m, depth, rows, cols);
      }
    }
  }
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  BasicMatrix<T> out;
  matmul_into(a, b, out);
  return out;
}

template <typename T>
void matmul_tn_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ContractError("matmul_tn_acc: shape mismatch");
  }
  const std::size_t m = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* brow = b.data() + r * m;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T av = a(r, i);
      T* orow = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt_into(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out,
                    bool accumulate) {
  if (a.cols() != b.cols()) throw ContractError("matmul_nt: inner dimensions differ");
  BasicMatrix<T> bt(b.cols(), b.rows());
  for (std::size_t i = 0; i < b.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) bt(j, i) = b(i, j);
  }
  if (!accumulate) {
    matmul_into(a, bt, out);
    return;
  }
  if (out.rows() != a.rows() || out.cols() != b.rows()) {
    throw ContractError("matmul_nt: accumulator shape mismatch");
  }
  BasicMatrix<T> tmp;
  matmul_into(a, bt, tmp);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += tmp.data()[i];
}

template Matrix matmul<float>(const Matrix&, const Matrix&);
template MatrixD matmul<double>(const MatrixD&, const MatrixD&);
template void matmul_into<float>(const Matrix&, const Matrix&, Matrix&);
template void matmul_into<double>(const MatrixD&, const MatrixD&, MatrixD&);
template void matmul_tn_acc<float>(const Matrix&, const Matrix&, Matrix&);
template void matmul_tn_acc<double>(const MatrixD&, const MatrixD&, MatrixD&);
template void matmul_nt_into<float>(const Matrix&, const Matrix&, Matrix&, bool);
template void matmul_nt_into<double>(const MatrixD&, const MatrixD&, MatrixD&, bool);

// ---------------------------------------------------------------------------
// Metrics

namespace {

template <typename T>
void require_same_shape(const BasicMatrix<T>& a, const BasicMatrix<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
}

}  // namespace

template <typename T>
T inf_norm_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "inf_norm_diff");
  T best = T{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    best = std::max(best, std::abs(a.data()[i] - b.data()[i]));
  }
  return best;
}

template <typename T>
T l2_norm_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "l2_norm_diff");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    sum += d * d;
  }
  return static_cast<T>(std::sqrt(sum));
}

template <typename T>
T squared_norm(const BasicMatrix<T>& a) {
  double sum = 0.0;
  for (const T v : a.values()) sum += static_cast<double>(v) * static_cast<double>(v);
  return static_cast<T>(sum);
}

template <typename T>
T cosine_similarity(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "cosine_similarity");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i];
    const double y = b.data()[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) {
    throw UndefinedSimilarityError("cosine_similarity: zero-norm input");
  }
  const double cs = dot / std::sqrt(na * nb);
  return static_cast<T>(std::clamp(cs, -1.0, 1.0));
}

template <typename T>
bool all_finite(const BasicMatrix<T>& m) {
  return std::all_of(m.values().begin(), m.values().end(),
                     [](T v) { return std::isfinite(v); });
}

#define SEJD_INSTANTIATE_METRICS(T)                                      \
  template T inf_norm_diff<T>(const BasicMatrix<T>&, const BasicMatrix<T>&); \
  template T l2_norm_diff<T>(const BasicMatrix<T>&, const BasicMatrix<T>&);  \
  template T squared_norm<T>(const BasicMatrix<T>&);                         \
  template T cosine_similarity<T>(const BasicMatrix<T>&, const BasicMatrix<T>&); \
  template bool all_finite<T>(const BasicMatrix<T>&);

SEJD_INSTANTIATE_METRICS(float)
SEJD_INSTANTIATE_METRICS(double)

#undef SEJD_INSTANTIATE_METRICS

}  // namespace sejd
