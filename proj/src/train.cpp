#include "sejd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "sejd/data.hpp"
#include "sejd/parallel.hpp"

namespace sejd {

void TrainConfig::validate() const {
  if (steps < 1) throw ContractError("train: steps must be >= 1");
  if (batch < 1) throw ContractError("train: batch must be >= 1");
  if (!(adam.lr > 0.0) || !std::isfinite(adam.lr)) throw ContractError("train: lr must be > 0");
  if (!(adam.beta1 > 0.0 && adam.beta1 < 1.0) || !(adam.beta2 > 0.0 && adam.beta2 < 1.0)) {
    throw ContractError("train: adam betas must lie in (0, 1)");
  }
  if (!(adam.eps >= 0.0)) throw ContractError("train: adam eps must be >= 0");
  if (!(adam.grad_clip > 0.0)) throw ContractError("train: grad clip must be > 0");
  if (layers < 1) throw ContractError("train: layers must be >= 1");
  if (dataset_size < 10) throw ContractError("train: dataset_size must be >= 10");
  hyper.validate();
}

template <typename T>
std::vector<BasicMatrix<T>*> tensor_list(std::vector<ConditionerParams<T>>& layers) {
  std::vector<BasicMatrix<T>*> out;
  for (auto& p : layers) {
    p.for_each([&](const std::string&, BasicMatrix<T>& m) { out.push_back(&m); });
  }
  return out;
}

template <typename T>
double global_norm(std::span<BasicMatrix<T>* const> grads) {
  double sq = 0.0;
  for (const auto* g : grads) {
    for (const T v : g->values()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(sq);
}

template <typename T>
double adam_step(std::span<BasicMatrix<T>* const> params, std::span<BasicMatrix<T>* const> grads,
                 OptimizerState<T>& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ContractError("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: state/params mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i])) {
      throw ContractError("adam_step: shape mismatch at tensor " + std::to_string(i));
    }
  }

  const double norm = global_norm(grads);
  if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
    const double factor = cfg.grad_clip / norm;
    for (auto* g : grads) {
      for (T& v : g->values()) v = static_cast<T>(static_cast<double>(v) * factor);
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->data();
    const T* g = grads[i]->data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    for (std::size_t j = 0; j < params[i]->size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = cfg.lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
      p[j] = static_cast<T>(p[j] - update);
    }
  }
  return norm;
}

namespace {

constexpr std::size_t kChunk = 8;

bool final_unflip(bool flip, std::size_t num_layers) { return flip && (num_layers - 1) % 2 == 1; }

template <typename T>
void add_into(ConditionerParams<T>& acc, const ConditionerParams<T>& other) {
  std::vector<const BasicMatrix<T>*> src;
  other.for_each([&](const std::string&, const BasicMatrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  acc.for_each([&](const std::string&, BasicMatrix<T>& m) {
    const T* s = src[i++]->data();
    for (std::size_t j = 0; j < m.size(); ++j) m.data()[j] += s[j];
  });
}

template <typename T>
struct SampleWork {
  std::vector<ForwardTape<T>> tapes;
  std::vector<ScaleShift<T>> ss;
  std::vector<BasicMatrix<T>> outputs;  // u_k per layer
  BasicMatrix<T> dv, d_scale, d_shift, dy;
};

// Adds one sample's contribution to `grads` (scaled by inv_batch) and returns
// its negative log-likelihood.
template <typename T>
double sample_loss_and_grads(const std::vector<ConditionerParams<T>>& layers, bool flip,
                             const BasicMatrix<T>& x, T inv_batch,
                             std::vector<ConditionerParams<T>>& grads, SampleWork<T>& w) {
  const std::size_t K = layers.size();
  const std::size_t L = x.rows();
  const std::size_t D = x.cols();
  w.tapes.resize(K);
  w.ss.resize(K);
  w.outputs.resize(K);

  BasicMatrix<T> y = final_unflip(flip, K) ? reverse_rows(x) : x;
  double logdet = 0.0;
  for (std::size_t k = K; k-- > 0;) {
    cond_forward_recorded(layers[k], y, 0, w.ss[k], w.tapes[k]);
    const auto& s = w.ss[k].scale;
    const auto& g = w.ss[k].shift;
    BasicMatrix<T>& u = w.outputs[k];
    u = y;
    for (std::size_t l = 1; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) {
        u(l, d) = (y(l, d) - g(l, d)) * std::exp(s(l, d));
        logdet += s(l, d);
      }
    }
    y = (k > 0 && flip) ? reverse_rows(u) : u;
  }
  const double nll = -(static_cast<double>(log_standard_normal(y)) + logdet);

  // d(nll * inv_batch)/dz = z * inv_batch
  w.dv = y;
  for (T& v : w.dv.values()) v *= inv_batch;
  for (std::size_t k = 0; k < K; ++k) {
    const auto& s = w.ss[k].scale;
    const auto& u = w.outputs[k];
    const BasicMatrix<T>& du = w.dv;
    w.d_scale.reshape(L, D);
    w.d_shift.reshape(L, D);
    w.d_scale.fill(T{0});
    w.d_shift.fill(T{0});
    BasicMatrix<T> dy_direct(L, D);
    for (std::size_t d = 0; d < D; ++d) dy_direct(0, d) = du(0, d);
    for (std::size_t l = 1; l < L; ++l) {
      for (std::size_t d = 0; d < D; ++d) {
        const T e = std::exp(s(l, d));
        w.d_scale(l, d) = du(l, d) * u(l, d) - inv_batch;
        w.d_shift(l, d) = -du(l, d) * e;
        dy_direct(l, d) = du(l, d) * e;
      }
    }
    cond_backward_recorded(layers[k], w.tapes[k], w.d_scale, w.d_shift, grads[k], w.dy);
    for (std::size_t i = 0; i < dy_direct.size(); ++i) dy_direct.data()[i] += w.dy.data()[i];
    if (k + 1 < K) w.dv = flip ? reverse_rows(dy_direct) : std::move(dy_direct);
  }
  return nll;
}

}  // namespace

template <typename T>
LossAndGrads<T> nll_loss_and_grads(const std::vector<ConditionerParams<T>>& layers, bool flip,
                                   const std::vector<BasicMatrix<T>>& batch, std::size_t threads) {
  if (layers.empty()) throw ContractError("nll_loss_and_grads: no layers");
  if (batch.empty()) throw ContractError("nll_loss_and_grads: batch must be nonempty");
  const auto& hp = layers.front().hyper;
  for (const auto& x : batch) {
    if (x.rows() != hp.seq_len || x.cols() != hp.patch_dim) {
      throw ContractError("nll_loss_and_grads: sample shape does not match the model");
    }
  }
  const std::size_t n = batch.size();
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  const T inv_batch = T(1) / static_cast<T>(n);

  std::vector<std::vector<ConditionerParams<T>>> chunk_grads(chunks);
  std::vector<double> chunk_loss(chunks, 0.0);
  parallel_for(chunks, resolve_threads(threads), [&](std::size_t c) {
    auto& g = chunk_grads[c];
    g.reserve(layers.size());
    for (const auto& p : layers) g.push_back(ConditionerParams<T>::zeros(p.hyper));
    SampleWork<T> work;
    const std::size_t end = std::min(n, (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      chunk_loss[c] += sample_loss_and_grads(layers, flip, batch[i], inv_batch, g, work);
    }
  });

  LossAndGrads<T> out;
  out.grads = std::move(chunk_grads.front());
  double total = chunk_loss.front();
  for (std::size_t c = 1; c < chunks; ++c) {
    for (std::size_t k = 0; k < layers.size(); ++k) add_into(out.grads[k], chunk_grads[c][k]);
    total += chunk_loss[c];
  }
  out.loss = total / static_cast<double>(n);
  if (!std::isfinite(out.loss)) throw TrainingDivergenceError("non-finite training loss", -1);
  return out;
}

template <typename T>
LossAndGrads<T> nll_loss_and_grads(const FlowModel<T>& model,
                                   const std::vector<BasicMatrix<T>>& batch, std::size_t threads) {
  std::vector<ConditionerParams<T>> layers;
  for (std::size_t k = 0; k < model.num_layers(); ++k) layers.push_back(model.params(k));
  return nll_loss_and_grads(layers, model.flip_between_layers(), batch, threads);
}

double mean_nll(const FlowModel<float>& model, const std::vector<Matrix>& data,
                std::size_t threads) {
  if (data.empty()) throw ContractError("mean_nll: empty data");
  std::vector<double> nll(data.size());
  parallel_for(data.size(), resolve_threads(threads),
               [&](std::size_t i) { nll[i] = -static_cast<double>(log_likelihood(model, data[i])); });
  double total = 0.0;
  for (const double v : nll) total += v;
  return total / static_cast<double>(data.size());
}

double identity_nll(const std::vector<Matrix>& data) {
  if (data.empty()) throw ContractError("identity_nll: empty data");
  double total = 0.0;
  for (const auto& x : data) total -= static_cast<double>(log_standard_normal(x));
  return total / static_cast<double>(data.size());
}

TrainResult train(const TrainConfig& config) {
  TrainConfig cfg = config;
  const Dataset data = make_dataset(cfg.dataset, cfg.seed, cfg.dataset_size);
  cfg.hyper.seq_len = data.seq_len;
  cfg.hyper.patch_dim = data.patch_dim;
  {
    // steps = 0 is accepted here and returns the initialization.
    TrainConfig probe = cfg;
    probe.steps = std::max<std::size_t>(probe.steps, 1);
    probe.validate();
  }
  auto [train_set, held_out] = split_holdout(data);

  Rng init_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<ConditionerParams<float>> layers;
  for (std::size_t k = 0; k < cfg.layers; ++k) layers.push_back(init_params<float>(init_rng, cfg.hyper));

  Rng batch_rng(cfg.seed ^ 0xd1b54a32d192ed03ull);
  OptimizerState<float> state;
  TrainResult result{FlowModel<float>::identity(1, cfg.hyper), {}, 0.0, 0.0, false, 0};
  std::vector<Matrix> batch(cfg.batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& x : batch) x = train_set[batch_rng.below(train_set.size())];
    LossAndGrads<float> lg;
    try {
      lg = nll_loss_and_grads(layers, cfg.flip, batch, cfg.threads);
    } catch (const TrainingDivergenceError&) {
      result.diverged = true;
      result.diverged_at = step;
      break;
    }
    auto grads = tensor_list(lg.grads);
    if (!std::isfinite(global_norm<float>(grads))) {
      result.diverged = true;
      result.diverged_at = step;
      break;
    }
    // Apply on a copy so a non-finite update leaves the last finite weights.
    auto next = layers;
    auto next_params = tensor_list(next);
    OptimizerState<float> next_state = state;
    adam_step<float>(next_params, grads, next_state, cfg.adam);
    bool finite = true;
    for (const auto* p : next_params) finite = finite && all_finite(*p);
    if (!finite) {
      result.diverged = true;
      result.diverged_at = step;
      break;
    }
    layers = std::move(next);
    state = std::move(next_state);
    result.loss_log.push_back({step, lg.loss});
  }

  result.model = FlowModel<float>::from_params(std::move(layers), cfg.flip);
  result.baseline_nll = identity_nll(held_out);
  result.heldout_nll = mean_nll(result.model, held_out, cfg.threads);
  return result;
}

#define SEJD_INSTANTIATE_TRAIN(T)                                                              \
  template std::vector<BasicMatrix<T>*> tensor_list<T>(std::vector<ConditionerParams<T>>&);    \
  template double global_norm<T>(std::span<BasicMatrix<T>* const>);                            \
  template double adam_step<T>(std::span<BasicMatrix<T>* const>,                               \
                               std::span<BasicMatrix<T>* const>, OptimizerState<T>&,           \
                               const AdamConfig&);                                             \
  template LossAndGrads<T> nll_loss_and_grads<T>(const std::vector<ConditionerParams<T>>&,     \
                                                 bool, const std::vector<BasicMatrix<T>>&,     \
                                                 std::size_t);                                 \
  template LossAndGrads<T> nll_loss_and_grads<T>(const FlowModel<T>&,                          \
                                                 const std::vector<BasicMatrix<T>>&, std::size_t);

SEJD_INSTANTIATE_TRAIN(float)
SEJD_INSTANTIATE_TRAIN(double)

#undef SEJD_INSTANTIATE_TRAIN

}  // namespace sejd
