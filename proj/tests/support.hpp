#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sejd/conditioner.hpp"
#include "sejd/flow.hpp"
#include "sejd/numerics.hpp"

namespace sejd::testing {

template <typename T>
BasicMatrix<T> column(std::initializer_list<T> values) {
  BasicMatrix<T> m(values.size(), 1);
  std::size_t i = 0;
  for (const T v : values) m(i++, 0) = v;
  return m;
}

template <typename T>
BasicMatrix<T> naive_matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  BasicMatrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T sum = T{0};
      for (std::size_t k = 0; k < a.cols(); ++k) sum += a(i, k) * b(k, j);
      out(i, j) = sum;
    }
  }
  return out;
}

// Every tensor redrawn from N(mean, stddev^2); gains centred on 1.
template <typename T>
ConditionerParams<T> dense_params(std::uint64_t seed, const ConditionerHyper& hp, double stddev) {
  Rng rng(seed);
  auto p = ConditionerParams<T>::zeros(hp);
  p.for_each([&](const std::string& name, BasicMatrix<T>& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (T& v : m.values()) v = static_cast<T>((gain ? 1.0 : 0.0) + stddev * rng.normal());
  });
  return p;
}

// Standard init with a nonzero output head, so the layer is a genuine
// non-identity transform.
template <typename T>
ConditionerParams<T> active_params(std::uint64_t seed, const ConditionerHyper& hp,
                                   double head_stddev = 0.3) {
  Rng rng(seed);
  auto p = init_params<T>(rng, hp);
  for (T& v : p.head_w.values()) v = static_cast<T>(head_stddev * rng.normal());
  for (T& v : p.head_b.values()) v = static_cast<T>(0.1 * rng.normal());
  return p;
}

template <typename T>
FlowModel<T> active_model(std::uint64_t seed, const ConditionerHyper& hp, std::size_t layers,
                          bool flip, double head_stddev = 0.3) {
  std::vector<ConditionerParams<T>> params;
  for (std::size_t k = 0; k < layers; ++k) {
    params.push_back(active_params<T>(seed * 131 + k, hp, head_stddev));
  }
  return FlowModel<T>::from_params(std::move(params), flip);
}

template <typename T>
FlowModel<T> stub_model(std::vector<std::shared_ptr<const Conditioner<T>>> layers,
                        bool flip = false) {
  return FlowModel<T>(std::move(layers), flip);
}

template <typename T>
std::vector<BasicMatrix<T>*> tensors_of(ConditionerParams<T>& p) {
  std::vector<BasicMatrix<T>*> out;
  p.for_each([&](const std::string&, BasicMatrix<T>& m) { out.push_back(&m); });
  return out;
}

template <typename T>
std::vector<std::string> tensor_names(const ConditionerParams<T>& p) {
  std::vector<std::string> out;
  p.for_each([&](const std::string& name, const BasicMatrix<T>&) { out.push_back(name); });
  return out;
}

// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// log|det A| by Gaussian elimination with partial pivoting.
inline double log_abs_det(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  double logdet = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[pivot][c])) pivot = r;
    }
    std::swap(a[c], a[pivot]);
    logdet += std::log(std::abs(a[c][c]));
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
    }
  }
  return logdet;
}

// Central-difference Jacobian of a Sequence -> Sequence map.
inline std::vector<std::vector<double>> numeric_jacobian(
    const std::function<MatrixD(const MatrixD&)>& f, const MatrixD& x, double eps) {
  const std::size_t n = x.size();
  std::vector<std::vector<double>> jac(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    MatrixD xp = x;
    MatrixD xm = x;
    xp.data()[j] += eps;
    xm.data()[j] -= eps;
    const MatrixD fp = f(xp);
    const MatrixD fm = f(xm);
    for (std::size_t i = 0; i < n; ++i) jac[i][j] = (fp.data()[i] - fm.data()[i]) / (2 * eps);
  }
  return jac;
}

}  // namespace sejd::testing
