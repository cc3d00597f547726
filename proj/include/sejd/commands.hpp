#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sejd/decode.hpp"
#include "sejd/train.hpp"

namespace sejd {

// Bad flag values or combinations; the CLI maps this to exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// SEJD_THREADS, when set to a non-negative integer, overrides `requested`.
std::size_t threads_from_env(std::size_t requested);

// Shared Gaussian noise: `count` sequences of L x D drawn from Rng(seed).
std::vector<Matrix> make_noise(std::uint64_t seed, std::size_t count, std::size_t seq_len,
                               std::size_t patch_dim);

// ---------------------------------------------------------------------------
// train

struct TrainArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
};

inline constexpr const char* kCheckpointFile = "checkpoint.sejd";
inline constexpr const char* kLossFile = "loss.csv";

// Trains, then writes <out_dir>/checkpoint.sejd and <out_dir>/loss.csv. On
// divergence the last finite model is still written before
// TrainingDivergenceError is thrown.
TrainResult cmd_train(const TrainConfig& config, const std::filesystem::path& out_dir,
                      TrainArtifacts* artifacts = nullptr);

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& log);

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::vector<DecodeMode> modes = {DecodeMode::kSequential, DecodeMode::kUjd, DecodeMode::kSejd};
  double tau = kDefaultTau;
  std::optional<std::size_t> max_iters;
  std::size_t batch = 64;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sequential_layers = {1};
  std::size_t threads = 0;

  void validate(std::size_t num_layers) const;
};

struct BenchRow {
  DecodeMode mode = DecodeMode::kSequential;
  double median_seconds = 0.0;
  double speedup = 1.0;
  std::vector<double> mean_iterations;  // per layer, averaged over the batch
  double max_abs_deviation = 0.0;
  double mean_nll = 0.0;
  std::vector<double> repeat_seconds;
};

struct BenchReport {
  std::size_t layers = 0;
  std::size_t seq_len = 0;
  std::size_t patch_dim = 0;
  std::size_t batch = 0;
  std::size_t repeats = 0;
  std::size_t threads = 0;
  double tau = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sequential_layers;
  std::vector<BenchRow> rows;  // sequential first

  const BenchRow* find(DecodeMode mode) const;
};

// Every mode decodes the same noise batch. One warm-up run precedes the timed
// repeats; the reported time is the median. The sequential reference is always
// run and reported, whether or not it was requested.
BenchReport cmd_bench(const FlowModel<float>& model, const BenchOptions& options);

std::string bench_report_json(const BenchReport& report);
void write_bench_csv(std::ostream& os, const BenchReport& report);

// ---------------------------------------------------------------------------
// analyze

// Default masking offset for the redundancy study.
inline constexpr std::size_t kDefaultMaskOffset = 5;

std::vector<RedundancyRow> cmd_analyze_redundancy(const FlowModel<float>& model,
                                                  std::size_t mask_offset, std::size_t batch,
                                                  std::uint64_t seed, std::size_t threads = 0);

std::vector<ConvergenceRow> cmd_analyze_convergence(const FlowModel<float>& model,
                                                    std::optional<std::size_t> max_iters,
                                                    std::size_t batch, std::uint64_t seed,
                                                    std::size_t threads = 0);

// ---------------------------------------------------------------------------
// ablate-tau

inline const std::vector<double> kDefaultTaus = {0.05, 0.1, 0.25, 0.5, 1.0, 2.0};

struct TauRow {
  double tau = 0.0;
  double time_s = 0.0;
  double max_dev = 0.0;
  double mean_iters = 0.0;  // over Jacobi-decoded layers and samples
};

// Rows are sorted by tau; all values share one noise batch.
std::vector<TauRow> cmd_ablate_tau(const FlowModel<float>& model, std::vector<double> taus,
                                   const BenchOptions& options);

void write_tau_csv(std::ostream& os, const std::vector<TauRow>& rows);

}  // namespace sejd
