#include "sejd/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "sejd/parallel.hpp"

namespace sejd {

const char* to_string(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kSequential: return "sequential";
    case DecodeMode::kUjd: return "ujd";
    case DecodeMode::kSejd: return "sejd";
  }
  return "unknown";
}

DecodeMode parse_decode_mode(const std::string& name) {
  if (name == "sequential") return DecodeMode::kSequential;
  if (name == "ujd") return DecodeMode::kUjd;
  if (name == "sejd") return DecodeMode::kSejd;
  throw ContractError("unknown decode mode '" + name + "'");
}

void DecodeConfig::validate(std::size_t num_layers) const {
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ContractError("decode: tau must be >= 0");
  if (max_iters && *max_iters < 1) throw ContractError("decode: max_iters must be >= 1");
  for (const std::size_t k : sequential_layers) {
    if (k < 1 || k > num_layers) {
      throw ContractError("decode: sequential layer " + std::to_string(k) + " outside 1.." +
                          std::to_string(num_layers));
    }
  }
}

bool ConvergenceTrace::truncated() const {
  return std::any_of(layers.begin(), layers.end(), [](const LayerTrace& t) { return t.truncated; });
}

template <typename T>
JacobiResult<T> layer_generate_jacobi(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                      double tau, std::size_t max_iters,
                                      const BasicMatrix<T>* oracle, bool warm_start,
                                      const IterateObserver<T>& observer) {
  if (u.rows() != layer.seq_len() || u.cols() != layer.patch_dim()) {
    throw ContractError("layer_generate_jacobi: input shape mismatch");
  }
  if (!(tau >= 0.0)) throw ContractError("layer_generate_jacobi: tau must be >= 0");
  if (max_iters < 1) throw ContractError("layer_generate_jacobi: max_iters must be >= 1");
  if (oracle != nullptr && !oracle->same_shape(u)) {
    throw ContractError("layer_generate_jacobi: oracle shape mismatch");
  }
  const std::size_t L = u.rows();
  const std::size_t D = u.cols();

  JacobiResult<T> result;
  BasicMatrix<T> prev = warm_start ? u : BasicMatrix<T>(L, D);
  BasicMatrix<T> next(L, D);
  ScaleShift<T> ss;
  bool converged = false;
  std::size_t t = 0;
  while (t < max_iters) {
    ++t;
    layer.forward(prev, 0, ss);
    for (std::size_t d = 0; d < D; ++d) next(0, d) = u(0, d);
    for (std::size_t l = 1; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) {
        next(l, d) = u(l, d) * std::exp(-ss.scale(l, d)) + ss.shift(l, d);
      }
    }
    IterationRecord rec;
    rec.step_inf = static_cast<double>(inf_norm_diff(next, prev));
    if (oracle != nullptr) rec.err_l2 = static_cast<double>(l2_norm_diff(next, *oracle));
    result.trace.iterations.push_back(rec);
    if (observer) observer(t, next);
    std::swap(prev, next);
    if (rec.step_inf < tau) {
      converged = true;
      break;
    }
  }
  result.output = std::move(prev);
  result.trace.iterations_used = t;
  result.trace.truncated = !converged && tau > 0.0;
  return result;
}

namespace {

bool is_sequential_layer(const DecodeConfig& cfg, std::size_t k) {
  switch (cfg.mode) {
    case DecodeMode::kSequential: return true;
    case DecodeMode::kUjd: return false;
    case DecodeMode::kSejd:
      return std::find(cfg.sequential_layers.begin(), cfg.sequential_layers.end(), k + 1) !=
             cfg.sequential_layers.end();
  }
  return true;
}

}  // namespace

template <typename T>
DecodeResult<T> decode(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                       const DecodeConfig& cfg) {
  cfg.validate(model.num_layers());
  const std::size_t max_iters = cfg.max_iters.value_or(model.seq_len());
  DecodeResult<T> result;
  result.trace.layers.reserve(model.num_layers());
  const auto start = std::chrono::steady_clock::now();
  result.x = model_generate<T>(
      model, noise, [&](std::size_t k, const Conditioner<T>& layer, const BasicMatrix<T>& u) {
        if (is_sequential_layer(cfg, k)) {
          LayerTrace trace;
          trace.layer = k + 1;
          trace.sequential = true;
          trace.iterations_used = u.rows();
          result.trace.layers.push_back(std::move(trace));
          return layer_generate_sequential(layer, u);
        }
        auto jr = layer_generate_jacobi<T>(layer, u, cfg.tau, max_iters, nullptr, cfg.warm_start);
        jr.trace.layer = k + 1;
        result.trace.layers.push_back(std::move(jr.trace));
        return std::move(jr.output);
      });
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

template <typename T>
std::vector<DecodeResult<T>> decode_batch(const FlowModel<T>& model,
                                          const std::vector<BasicMatrix<T>>& noise,
                                          const DecodeConfig& cfg, std::size_t threads) {
  cfg.validate(model.num_layers());
  std::vector<DecodeResult<T>> out(noise.size());
  parallel_for(noise.size(), threads, [&](std::size_t i) { out[i] = decode(model, noise[i], cfg); });
  return out;
}

std::string PrefixReport::describe() const {
  if (holds) return "none";
  char buf[128];
  std::snprintf(buf, sizeof buf, "t=%zu l=%zu deviation=%.3g", iteration, position, deviation);
  return buf;
}

template <typename T>
PrefixReport prefix_property_check(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                   double tol) {
  const auto oracle = layer_generate_sequential(layer, u);
  const std::size_t L = u.rows();
  PrefixReport report;
  layer_generate_jacobi<T>(layer, u, 0.0, L, nullptr, false,
                           [&](std::size_t t, const BasicMatrix<T>& z) {
                             if (!report.holds) return;
                             for (std::size_t l = 0; l < std::min(t, L); ++l) {
                               for (std::size_t d = 0; d < u.cols(); ++d) {
                                 const double dev = std::abs(static_cast<double>(z(l, d)) -
                                                             static_cast<double>(oracle(l, d)));
                                 if (dev > tol) {
                                   report = {false, t, l + 1, dev};
                                   return;
                                 }
                               }
                             }
                           });
  return report;
}

namespace {

// Inputs and outputs of every layer in a standard sequential generation run.
template <typename T>
void sequential_layer_io(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                         std::vector<BasicMatrix<T>>& inputs,
                         std::vector<BasicMatrix<T>>& outputs) {
  inputs.clear();
  outputs.clear();
  model_generate<T>(model, noise,
                    [&](std::size_t, const Conditioner<T>& layer, const BasicMatrix<T>& u) {
                      inputs.push_back(u);
                      outputs.push_back(layer_generate_sequential(layer, u));
                      return outputs.back();
                    });
}

}  // namespace

template <typename T>
std::vector<RedundancyRow> redundancy_analysis(const FlowModel<T>& model,
                                               const std::vector<BasicMatrix<T>>& noise,
                                               std::size_t mask_offset, std::size_t threads) {
  if (mask_offset >= model.seq_len()) {
    throw ContractError("redundancy_analysis: offset must be < L");
  }
  if (noise.empty()) throw ContractError("redundancy_analysis: empty noise batch");
  const std::size_t K = model.num_layers();
  std::vector<std::vector<double>> per_sample(noise.size(), std::vector<double>(K));
  parallel_for(noise.size(), threads, [&](std::size_t i) {
    std::vector<BasicMatrix<T>> inputs;
    std::vector<BasicMatrix<T>> outputs;
    sequential_layer_io(model, noise[i], inputs, outputs);
    for (std::size_t k = 0; k < K; ++k) {
      const auto masked = layer_generate_sequential(model.layer(k), inputs[k], mask_offset);
      per_sample[i][k] = static_cast<double>(cosine_similarity(outputs[k], masked));
    }
  });
  std::vector<RedundancyRow> rows(K);
  for (std::size_t k = 0; k < K; ++k) {
    double sum = 0.0;
    for (const auto& s : per_sample) sum += s[k];
    rows[k] = {k + 1, sum / static_cast<double>(noise.size())};
  }
  return rows;
}

template <typename T>
std::vector<ConvergenceRow> convergence_study(const FlowModel<T>& model,
                                              const BasicMatrix<T>& noise,
                                              std::size_t max_iters) {
  std::vector<BasicMatrix<T>> inputs;
  std::vector<BasicMatrix<T>> outputs;
  sequential_layer_io(model, noise, inputs, outputs);
  std::vector<ConvergenceRow> rows;
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    const auto jr = layer_generate_jacobi(model.layer(k), inputs[k], 0.0, max_iters, &outputs[k]);
    for (std::size_t t = 0; t < jr.trace.iterations.size(); ++t) {
      const auto& rec = jr.trace.iterations[t];
      rows.push_back({k + 1, t + 1, rec.step_inf, rec.err_l2.value_or(0.0)});
    }
  }
  return rows;
}

template <typename T>
std::vector<ConvergenceRow> convergence_study(const FlowModel<T>& model,
                                              const std::vector<BasicMatrix<T>>& noise,
                                              std::size_t max_iters, std::size_t threads) {
  if (noise.empty()) throw ContractError("convergence_study: empty noise batch");
  std::vector<std::vector<ConvergenceRow>> per_sample(noise.size());
  parallel_for(noise.size(), threads, [&](std::size_t i) {
    per_sample[i] = convergence_study(model, noise[i], max_iters);
  });
  std::vector<ConvergenceRow> rows = per_sample.front();
  for (std::size_t i = 1; i < per_sample.size(); ++i) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      rows[r].step_inf += per_sample[i][r].step_inf;
      rows[r].err_l2 += per_sample[i][r].err_l2;
    }
  }
  const double n = static_cast<double>(noise.size());
  for (auto& r : rows) {
    r.step_inf /= n;
    r.err_l2 /= n;
  }
  return rows;
}

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_convergence_csv(std::ostream& os, const std::vector<ConvergenceRow>& rows) {
  os << "layer,iter,step_inf,err_l2\n";
  for (const auto& r : rows) {
    os << r.layer << ',' << r.iter << ',' << fmt_real(r.step_inf) << ',' << fmt_real(r.err_l2)
       << '\n';
  }
}

void write_redundancy_csv(std::ostream& os, const std::vector<RedundancyRow>& rows) {
  os << "layer,cos_sim\n";
  for (const auto& r : rows) os << r.layer << ',' << fmt_real(r.cos_sim) << '\n';
}

#define SEJD_INSTANTIATE_DECODE(T)                                                            \
  template JacobiResult<T> layer_generate_jacobi<T>(const Conditioner<T>&,                    \
                                                    const BasicMatrix<T>&, double, std::size_t, \
                                                    const BasicMatrix<T>*, bool,              \
                                                    const IterateObserver<T>&);               \
  template DecodeResult<T> decode<T>(const FlowModel<T>&, const BasicMatrix<T>&,              \
                                     const DecodeConfig&);                                    \
  template std::vector<DecodeResult<T>> decode_batch<T>(                                      \
      const FlowModel<T>&, const std::vector<BasicMatrix<T>>&, const DecodeConfig&, std::size_t); \
  template PrefixReport prefix_property_check<T>(const Conditioner<T>&, const BasicMatrix<T>&, \
                                                 double);                                     \
  template std::vector<RedundancyRow> redundancy_analysis<T>(                                 \
      const FlowModel<T>&, const std::vector<BasicMatrix<T>>&, std::size_t, std::size_t);      \
  template std::vector<ConvergenceRow> convergence_study<T>(const FlowModel<T>&,              \
                                                            const BasicMatrix<T>&, std::size_t); \
  template std::vector<ConvergenceRow> convergence_study<T>(                                  \
      const FlowModel<T>&, const std::vector<BasicMatrix<T>>&, std::size_t, std::size_t);

SEJD_INSTANTIATE_DECODE(float)
SEJD_INSTANTIATE_DECODE(double)

#undef SEJD_INSTANTIATE_DECODE

}  // namespace sejd
