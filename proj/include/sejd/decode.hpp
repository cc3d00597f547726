#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sejd/flow.hpp"

namespace sejd {

enum class DecodeMode { kSequential, kUjd, kSejd };

const char* to_string(DecodeMode mode);
DecodeMode parse_decode_mode(const std::string& name);

// Default stopping threshold for Jacobi iterations.
inline constexpr double kDefaultTau = 0.5;

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kSejd;
  double tau = kDefaultTau;
  // Defaults to L; L iterations always reproduce the sequential result.
  std::optional<std::size_t> max_iters;
  // 1-based layer indices decoded sequentially in sejd mode.
  std::vector<std::size_t> sequential_layers = {1};
  // Start Jacobi from z0 = u instead of z0 = 0.
  bool warm_start = false;

  void validate(std::size_t num_layers) const;
};

struct IterationRecord {
  double step_inf = 0.0;
  std::optional<double> err_l2;  // only when an oracle was supplied
};

struct LayerTrace {
  std::size_t layer = 0;  // 1-based
  bool sequential = false;
  // Jacobi iterations, or L for a sequentially decoded layer.
  std::size_t iterations_used = 0;
  bool truncated = false;
  std::vector<IterationRecord> iterations;
};

struct ConvergenceTrace {
  std::vector<LayerTrace> layers;
  bool truncated() const;
};

template <typename T>
struct JacobiResult {
  BasicMatrix<T> output;
  LayerTrace trace;
};

// Observer called with (t, z^t) after every Jacobi iteration.
template <typename T>
using IterateObserver = std::function<void(std::size_t, const BasicMatrix<T>&)>;

// Parallel fixed-point solve of the layer's generative inverse. Each iteration
// is one batched conditioner call; stops once ||z^t - z^{t-1}||_inf < tau or
// after max_iters iterations.
template <typename T>
JacobiResult<T> layer_generate_jacobi(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                      double tau, std::size_t max_iters,
                                      const BasicMatrix<T>* oracle = nullptr,
                                      bool warm_start = false,
                                      const IterateObserver<T>& observer = {});

template <typename T>
struct DecodeResult {
  BasicMatrix<T> x;
  ConvergenceTrace trace;
  double seconds = 0.0;
};

template <typename T>
DecodeResult<T> decode(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                       const DecodeConfig& cfg);

// Decodes every sample, concurrently across `threads` workers.
template <typename T>
std::vector<DecodeResult<T>> decode_batch(const FlowModel<T>& model,
                                          const std::vector<BasicMatrix<T>>& noise,
                                          const DecodeConfig& cfg, std::size_t threads = 0);

struct PrefixReport {
  bool holds = true;
  // First (iteration, position) violating P(t), both 1-based.
  std::size_t iteration = 0;
  std::size_t position = 0;
  double deviation = 0.0;

  std::string describe() const;
};

// Checks that rows 1..t of the Jacobi iterate equal the sequential solution
// at every t = 1..L.
template <typename T>
PrefixReport prefix_property_check(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                   double tol = 1e-5);

struct RedundancyRow {
  std::size_t layer = 0;  // 1-based
  double cos_sim = 0.0;
};

// For each layer, feeds the input of the standard generation run through the
// layer twice (unmasked and with the o nearest predecessors masked) and
// reports the mean cosine similarity of the two outputs across the batch.
template <typename T>
std::vector<RedundancyRow> redundancy_analysis(const FlowModel<T>& model,
                                               const std::vector<BasicMatrix<T>>& noise,
                                               std::size_t mask_offset, std::size_t threads = 0);

struct ConvergenceRow {
  std::size_t layer = 0;  // 1-based
  std::size_t iter = 0;   // 1-based
  double step_inf = 0.0;
  double err_l2 = 0.0;
};

// Jacobi with tau = 0 on every layer against the sequential oracle.
template <typename T>
std::vector<ConvergenceRow> convergence_study(const FlowModel<T>& model,
                                              const BasicMatrix<T>& noise,
                                              std::size_t max_iters);

// Mean of the per-sample rows.
template <typename T>
std::vector<ConvergenceRow> convergence_study(const FlowModel<T>& model,
                                              const std::vector<BasicMatrix<T>>& noise,
                                              std::size_t max_iters, std::size_t threads = 0);

void write_convergence_csv(std::ostream& os, const std::vector<ConvergenceRow>& rows);
void write_redundancy_csv(std::ostream& os, const std::vector<RedundancyRow>& rows);

}  // namespace sejd
