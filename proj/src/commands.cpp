#include "sejd/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include "json.hpp"
#include "sejd/data.hpp"
#include "sejd/parallel.hpp"

namespace sejd {

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

DecodeConfig config_for(DecodeMode mode, const BenchOptions& o, double tau) {
  DecodeConfig cfg;
  cfg.mode = mode;
  cfg.tau = tau;
  cfg.max_iters = o.max_iters;
  cfg.sequential_layers = o.sequential_layers;
  return cfg;
}

struct TimedRun {
  std::vector<DecodeResult<float>> results;
  std::vector<double> seconds;
};

TimedRun timed_decode(const FlowModel<float>& model, const std::vector<Matrix>& noise,
                      const DecodeConfig& cfg, std::size_t repeats, std::size_t threads) {
  TimedRun run;
  run.results = decode_batch(model, noise, cfg, threads);  // warm-up
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    run.results = decode_batch(model, noise, cfg, threads);
    const auto stop = std::chrono::steady_clock::now();
    run.seconds.push_back(std::chrono::duration<double>(stop - start).count());
  }
  return run;
}

double max_deviation(const std::vector<DecodeResult<float>>& a,
                     const std::vector<DecodeResult<float>>& b) {
  double dev = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dev = std::max(dev, static_cast<double>(inf_norm_diff(a[i].x, b[i].x)));
  }
  return dev;
}

void check_mask_offset(const FlowModel<float>& model, std::size_t mask_offset) {
  if (mask_offset >= model.seq_len()) {
    throw UsageError("--o must be < L = " + std::to_string(model.seq_len()));
  }
}

}  // namespace

std::size_t threads_from_env(std::size_t requested) {
  const char* env = std::getenv("SEJD_THREADS");
  if (env == nullptr || *env == '\0') return requested;
  char* end = nullptr;
  const long long v = std::strtoll(env, &end, 10);
  if (*end != '\0' || v < 0) throw UsageError("SEJD_THREADS must be a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::vector<Matrix> make_noise(std::uint64_t seed, std::size_t count, std::size_t seq_len,
                               std::size_t patch_dim) {
  Rng rng(seed);
  std::vector<Matrix> noise;
  noise.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    noise.push_back(gaussian_matrix<float>(rng, seq_len, patch_dim));
  }
  return noise;
}

// ---------------------------------------------------------------------------
// train

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& log) {
  os << "step,loss\n";
  for (const auto& r : log) os << r.step << ',' << fmt_real(r.loss) << '\n';
}

TrainResult cmd_train(const TrainConfig& config, const std::filesystem::path& out_dir,
                      TrainArtifacts* artifacts) {
  std::filesystem::create_directories(out_dir);
  TrainResult result = train(config);
  const auto ckpt = out_dir / kCheckpointFile;
  const auto loss = out_dir / kLossFile;
  save_checkpoint(result.model, ckpt);
  std::ofstream os(loss, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + loss.string());
  write_loss_csv(os, result.loss_log);
  if (artifacts != nullptr) *artifacts = {ckpt, loss};
  if (result.diverged) {
    throw TrainingDivergenceError("training diverged; wrote the last finite model",
                                  static_cast<std::int64_t>(result.diverged_at));
  }
  return result;
}

// ---------------------------------------------------------------------------
// bench

void BenchOptions::validate(std::size_t num_layers) const {
  if (modes.empty()) throw UsageError("--modes must name at least one mode");
  if (!(tau >= 0.0)) throw UsageError("--tau must be >= 0");
  if (max_iters && *max_iters < 1) throw UsageError("--max-iters must be >= 1");
  if (batch < 1) throw UsageError("--batch must be >= 1");
  if (repeats < 5) throw UsageError("--repeats must be >= 5");
  for (const std::size_t k : sequential_layers) {
    if (k < 1 || k > num_layers) {
      throw UsageError("--sequential-layers entries must lie in 1.." + std::to_string(num_layers));
    }
  }
}

const BenchRow* BenchReport::find(DecodeMode mode) const {
  for (const auto& r : rows) {
    if (r.mode == mode) return &r;
  }
  return nullptr;
}

BenchReport cmd_bench(const FlowModel<float>& model, const BenchOptions& options) {
  options.validate(model.num_layers());
  const std::size_t threads = resolve_threads(options.threads);
  const auto noise = make_noise(options.seed, options.batch, model.seq_len(), model.patch_dim());

  BenchReport report;
  report.layers = model.num_layers();
  report.seq_len = model.seq_len();
  report.patch_dim = model.patch_dim();
  report.batch = options.batch;
  report.repeats = options.repeats;
  report.threads = threads;
  report.tau = options.tau;
  report.seed = options.seed;
  report.sequential_layers = options.sequential_layers;

  std::vector<DecodeMode> modes = {DecodeMode::kSequential};
  for (const DecodeMode m : options.modes) {
    if (std::find(modes.begin(), modes.end(), m) == modes.end()) modes.push_back(m);
  }

  std::vector<DecodeResult<float>> reference;
  double reference_seconds = 0.0;
  for (const DecodeMode mode : modes) {
    const auto run = timed_decode(model, noise, config_for(mode, options, options.tau),
                                  options.repeats, threads);
    BenchRow row;
    row.mode = mode;
    row.repeat_seconds = run.seconds;
    row.median_seconds = median(run.seconds);
    if (mode == DecodeMode::kSequential) {
      reference = run.results;
      reference_seconds = row.median_seconds;
    }
    row.speedup = mode == DecodeMode::kSequential ? 1.0 : reference_seconds / row.median_seconds;
    row.max_abs_deviation = mode == DecodeMode::kSequential ? 0.0 : max_deviation(run.results, reference);
    row.mean_iterations.assign(model.num_layers(), 0.0);
    for (const auto& r : run.results) {
      for (std::size_t k = 0; k < model.num_layers(); ++k) {
        row.mean_iterations[k] += static_cast<double>(r.trace.layers[k].iterations_used);
      }
    }
    for (double& v : row.mean_iterations) v /= static_cast<double>(run.results.size());
    std::vector<Matrix> samples;
    samples.reserve(run.results.size());
    for (const auto& r : run.results) samples.push_back(r.x);
    row.mean_nll = mean_nll(model, samples, threads);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string bench_report_json(const BenchReport& report) {
  nlohmann::ordered_json j;
  j["layers"] = report.layers;
  j["seq_len"] = report.seq_len;
  j["patch_dim"] = report.patch_dim;
  j["batch"] = report.batch;
  j["repeats"] = report.repeats;
  j["threads"] = report.threads;
  j["tau"] = report.tau;
  j["seed"] = report.seed;
  j["sequential_layers"] = report.sequential_layers;
  auto& rows = j["modes"] = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row;
    row["mode"] = to_string(r.mode);
    row["median_seconds"] = r.median_seconds;
    row["speedup"] = r.speedup;
    row["mean_iterations"] = r.mean_iterations;
    row["max_abs_deviation"] = r.max_abs_deviation;
    row["mean_nll"] = r.mean_nll;
    row["repeat_seconds"] = r.repeat_seconds;
    rows.push_back(std::move(row));
  }
  return j.dump(2);
}

void write_bench_csv(std::ostream& os, const BenchReport& report) {
  os << "mode,median_seconds,speedup,max_abs_deviation,mean_nll";
  for (std::size_t k = 1; k <= report.layers; ++k) os << ",iters_layer" << k;
  os << '\n';
  for (const auto& r : report.rows) {
    os << to_string(r.mode) << ',' << fmt_real(r.median_seconds) << ',' << fmt_real(r.speedup)
       << ',' << fmt_real(r.max_abs_deviation) << ',' << fmt_real(r.mean_nll);
    for (const double it : r.mean_iterations) os << ',' << fmt_real(it);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// analyze

std::vector<RedundancyRow> cmd_analyze_redundancy(const FlowModel<float>& model,
                                                  std::size_t mask_offset, std::size_t batch,
                                                  std::uint64_t seed, std::size_t threads) {
  check_mask_offset(model, mask_offset);
  if (batch < 1) throw UsageError("--batch must be >= 1");
  const auto noise = make_noise(seed, batch, model.seq_len(), model.patch_dim());
  return redundancy_analysis(model, noise, mask_offset, resolve_threads(threads));
}

std::vector<ConvergenceRow> cmd_analyze_convergence(const FlowModel<float>& model,
                                                    std::optional<std::size_t> max_iters,
                                                    std::size_t batch, std::uint64_t seed,
                                                    std::size_t threads) {
  if (max_iters && *max_iters < 1) throw UsageError("--max-iters must be >= 1");
  if (batch < 1) throw UsageError("--batch must be >= 1");
  const auto noise = make_noise(seed, batch, model.seq_len(), model.patch_dim());
  return convergence_study(model, noise, max_iters.value_or(model.seq_len()),
                           resolve_threads(threads));
}

// ---------------------------------------------------------------------------
// ablate-tau

std::vector<TauRow> cmd_ablate_tau(const FlowModel<float>& model, std::vector<double> taus,
                                   const BenchOptions& options) {
  if (taus.empty()) throw UsageError("--taus must list at least one value");
  for (const double t : taus) {
    if (!(t >= 0.0)) throw UsageError("--taus entries must be >= 0");
  }
  options.validate(model.num_layers());
  std::sort(taus.begin(), taus.end());
  const std::size_t threads = resolve_threads(options.threads);
  const auto noise = make_noise(options.seed, options.batch, model.seq_len(), model.patch_dim());
  const auto reference =
      decode_batch(model, noise, config_for(DecodeMode::kSequential, options, 0.0), threads);

  std::vector<TauRow> rows;
  for (const double tau : taus) {
    const auto run = timed_decode(model, noise, config_for(DecodeMode::kSejd, options, tau),
                                  options.repeats, threads);
    TauRow row;
    row.tau = tau;
    row.time_s = median(run.seconds);
    row.max_dev = max_deviation(run.results, reference);
    double iters = 0.0;
    std::size_t count = 0;
    for (const auto& r : run.results) {
      for (const auto& layer : r.trace.layers) {
        if (layer.sequential) continue;
        iters += static_cast<double>(layer.iterations_used);
        ++count;
      }
    }
    row.mean_iters = count > 0 ? iters / static_cast<double>(count) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

void write_tau_csv(std::ostream& os, const std::vector<TauRow>& rows) {
  os << "tau,time_s,max_dev,mean_iters\n";
  for (const auto& r : rows) {
    os << fmt_real(r.tau) << ',' << fmt_real(r.time_s) << ',' << fmt_real(r.max_dev) << ','
       << fmt_real(r.mean_iters) << '\n';
  }
}

}  // namespace sejd
