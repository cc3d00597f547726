#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sejd/conditioner.hpp"
#include "sejd/flow.hpp"

namespace sejd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  // Global-norm clipping threshold; <= 0 disables clipping.
  double grad_clip = 1.0;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  AdamConfig adam;
  std::uint64_t seed = 0;
  std::string dataset = "gradient-patches";
  std::size_t dataset_size = 4000;
  ConditionerHyper hyper;
  std::size_t layers = 4;
  bool flip = true;
  std::size_t threads = 0;

  void validate() const;
};

template <typename T>
struct OptimizerState {
  std::vector<BasicMatrix<T>> m;
  std::vector<BasicMatrix<T>> v;
  std::uint64_t step = 0;
};

// Flat views over every tensor of a layer stack, in canonical order.
template <typename T>
std::vector<BasicMatrix<T>*> tensor_list(std::vector<ConditionerParams<T>>& layers);

template <typename T>
double global_norm(std::span<BasicMatrix<T>* const> grads);

// Clips `grads` in place to the configured global norm, then applies one
// bias-corrected Adam update. Returns the pre-clip global gradient norm.
template <typename T>
double adam_step(std::span<BasicMatrix<T>* const> params, std::span<BasicMatrix<T>* const> grads,
                 OptimizerState<T>& state, const AdamConfig& cfg);

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  std::vector<ConditionerParams<T>> grads;  // one per layer
};

// loss = -(1/B) sum_i log p(x_i), gradients through every layer's normalizing
// pass including the log-det term. Samples are processed in fixed-size chunks
// whose partial sums are combined in index order, so the result does not
// depend on `threads`.
template <typename T>
LossAndGrads<T> nll_loss_and_grads(const std::vector<ConditionerParams<T>>& layers, bool flip,
                                   const std::vector<BasicMatrix<T>>& batch,
                                   std::size_t threads = 1);

template <typename T>
LossAndGrads<T> nll_loss_and_grads(const FlowModel<T>& model,
                                   const std::vector<BasicMatrix<T>>& batch,
                                   std::size_t threads = 1);

// Mean negative log-likelihood of `data` under the model.
double mean_nll(const FlowModel<float>& model, const std::vector<Matrix>& data,
                std::size_t threads = 0);
// Same for the identity flow, i.e. the standard-normal density of the data.
double identity_nll(const std::vector<Matrix>& data);

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  FlowModel<float> model;
  std::vector<LossRecord> loss_log;
  double baseline_nll = 0.0;  // identity flow on the held-out split
  double heldout_nll = 0.0;
  bool diverged = false;
  std::size_t diverged_at = 0;
};

// Deterministic for a fixed seed. On a non-finite loss, training stops and
// the result carries the last finite parameters with `diverged` set.
TrainResult train(const TrainConfig& config);

}  // namespace sejd
