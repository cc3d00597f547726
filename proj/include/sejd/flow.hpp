#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "sejd/conditioner.hpp"
#include "sejd/numerics.hpp"

namespace sejd {

// Ordered stack of autoregressive layers. Index 0 is the first layer applied
// during generation (it consumes Gaussian noise). Immutable once built.
template <typename T>
class FlowModel {
 public:
  using LayerPtr = std::shared_ptr<const Conditioner<T>>;

  FlowModel(std::vector<LayerPtr> layers, bool flip_between_layers);

  // Network-backed model; keeps the hyperparameters for serialization.
  static FlowModel from_params(std::vector<ConditionerParams<T>> params, bool flip_between_layers);
  // K layers with s = g = 0.
  static FlowModel identity(std::size_t num_layers, const ConditionerHyper& hyper,
                            bool flip_between_layers = false);

  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t patch_dim() const noexcept { return patch_dim_; }
  bool flip_between_layers() const noexcept { return flip_; }

  const Conditioner<T>& layer(std::size_t k) const { return *layers_.at(k); }
  const LayerPtr& layer_ptr(std::size_t k) const { return layers_.at(k); }

  // Hyperparameters, present for network-backed models.
  const std::optional<ConditionerHyper>& hyper() const noexcept { return hyper_; }
  // Parameters of network layer k; throws ContractError for analytic layers.
  const ConditionerParams<T>& params(std::size_t k) const;

 private:
  std::vector<LayerPtr> layers_;
  bool flip_;
  std::size_t seq_len_ = 0;
  std::size_t patch_dim_ = 0;
  std::optional<ConditionerHyper> hyper_;
};

template <typename T>
struct NormalizeResult {
  BasicMatrix<T> output;
  T logdet = T{0};
};

// Normalizing direction of one layer: u_1 = y_1,
// u_l = (y_l - g(y_{<l-o})) * exp(s(y_{<l-o})). One batched conditioner call.
template <typename T>
NormalizeResult<T> layer_normalize(const Conditioner<T>& layer, const BasicMatrix<T>& y,
                                   std::size_t mask_offset = 0);

// Generative inverse, one position at a time through the incremental
// (KV-cached for network layers) conditioner.
template <typename T>
BasicMatrix<T> layer_generate_sequential(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                         std::size_t mask_offset = 0);

// Maps layer input u to layer output for layer index k.
template <typename T>
using LayerDecoder =
    std::function<BasicMatrix<T>(std::size_t k, const Conditioner<T>&, const BasicMatrix<T>&)>;

template <typename T>
LayerDecoder<T> sequential_decoder();

// x = f_1(f_2(...)) in generation order with optional patch-order flips
// between layers; the output is returned in canonical patch order.
template <typename T>
BasicMatrix<T> model_generate(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                              const LayerDecoder<T>& decoder = sequential_decoder<T>());

template <typename T>
NormalizeResult<T> model_normalize(const FlowModel<T>& model, const BasicMatrix<T>& x);

// log N(v; 0, I) over all entries.
template <typename T>
T log_standard_normal(const BasicMatrix<T>& v);

template <typename T>
T log_likelihood(const FlowModel<T>& model, const BasicMatrix<T>& x);

// Sequential generation where position l only sees positions < l - o.
template <typename T>
BasicMatrix<T> masked_generate(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                               std::size_t mask_offset);

template <typename T>
BasicMatrix<T> reverse_rows(const BasicMatrix<T>& m);

}  // namespace sejd
