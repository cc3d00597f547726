#include "sejd/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace sejd {

template <typename T>
FlowModel<T>::FlowModel(std::vector<LayerPtr> layers, bool flip_between_layers)
    : layers_(std::move(layers)), flip_(flip_between_layers) {
  if (layers_.empty()) throw ContractError("flow model needs at least one layer");
  seq_len_ = layers_.front()->seq_len();
  patch_dim_ = layers_.front()->patch_dim();
  for (const auto& layer : layers_) {
    if (!layer) throw ContractError("flow model: null layer");
    if (layer->seq_len() != seq_len_ || layer->patch_dim() != patch_dim_) {
      throw ContractError("flow model: all layers must share (L, D)");
    }
  }
}

template <typename T>
FlowModel<T> FlowModel<T>::from_params(std::vector<ConditionerParams<T>> params,
                                       bool flip_between_layers) {
  if (params.empty()) throw ContractError("flow model needs at least one layer");
  const ConditionerHyper hyper = params.front().hyper;
  std::vector<LayerPtr> layers;
  layers.reserve(params.size());
  for (auto& p : params) {
    if (!(p.hyper == hyper)) throw ContractError("flow model: layers disagree on hyperparameters");
    layers.push_back(std::make_shared<AttentionConditioner<T>>(std::move(p)));
  }
  FlowModel model(std::move(layers), flip_between_layers);
  model.hyper_ = hyper;
  return model;
}

template <typename T>
FlowModel<T> FlowModel<T>::identity(std::size_t num_layers, const ConditionerHyper& hyper,
                                    bool flip_between_layers) {
  std::vector<LayerPtr> layers;
  for (std::size_t k = 0; k < num_layers; ++k) {
    layers.push_back(std::make_shared<IdentityConditioner<T>>(hyper.seq_len, hyper.patch_dim));
  }
  return FlowModel(std::move(layers), flip_between_layers);
}

template <typename T>
const ConditionerParams<T>& FlowModel<T>::params(std::size_t k) const {
  const auto* net = dynamic_cast<const AttentionConditioner<T>*>(layers_.at(k).get());
  if (net == nullptr) {
    throw ContractError("layer " + std::to_string(k) + " is not a network conditioner");
  }
  return net->params();
}

namespace {

template <typename T>
void check_sequence(const BasicMatrix<T>& y, std::size_t L, std::size_t D, const char* op) {
  if (y.rows() != L || y.cols() != D) {
    throw ContractError(std::string(op) + ": expected " + std::to_string(L) + "x" +
                        std::to_string(D) + " sequence, got " + std::to_string(y.rows()) + "x" +
                        std::to_string(y.cols()));
  }
}

bool final_unflip(bool flip, std::size_t num_layers) { return flip && (num_layers - 1) % 2 == 1; }

}  // namespace

template <typename T>
BasicMatrix<T> reverse_rows(const BasicMatrix<T>& m) {
  BasicMatrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto src = m.row(m.rows() - 1 - i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <typename T>
NormalizeResult<T> layer_normalize(const Conditioner<T>& layer, const BasicMatrix<T>& y,
                                   std::size_t mask_offset) {
  check_sequence(y, layer.seq_len(), layer.patch_dim(), "layer_normalize");
  ScaleShift<T> ss;
  layer.forward(y, mask_offset, ss);
  NormalizeResult<T> out;
  out.output = y;
  for (std::size_t l = 1; l < y.rows(); ++l) {
    for (std::size_t d = 0; d < y.cols(); ++d) {
      out.output(l, d) = (y(l, d) - ss.shift(l, d)) * std::exp(ss.scale(l, d));
      out.logdet += ss.scale(l, d);
    }
  }
  return out;
}

template <typename T>
BasicMatrix<T> layer_generate_sequential(const Conditioner<T>& layer, const BasicMatrix<T>& u,
                                         std::size_t mask_offset) {
  check_sequence(u, layer.seq_len(), layer.patch_dim(), "layer_generate_sequential");
  const std::size_t D = u.cols();
  BasicMatrix<T> y(u.rows(), D);
  std::vector<T> s(D);
  std::vector<T> g(D);
  auto stream = layer.start_incremental(mask_offset);
  for (std::size_t l = 0; l < u.rows(); ++l) {
    stream->next(y, l, s, g);
    if (l == 0) {
      for (std::size_t d = 0; d < D; ++d) y(0, d) = u(0, d);
    } else {
      for (std::size_t d = 0; d < D; ++d) y(l, d) = u(l, d) * std::exp(-s[d]) + g[d];
    }
  }
  return y;
}

template <typename T>
LayerDecoder<T> sequential_decoder() {
  return [](std::size_t, const Conditioner<T>& layer, const BasicMatrix<T>& u) {
    return layer_generate_sequential(layer, u);
  };
}

template <typename T>
BasicMatrix<T> model_generate(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                              const LayerDecoder<T>& decoder) {
  check_sequence(noise, model.seq_len(), model.patch_dim(), "model_generate");
  BasicMatrix<T> z = noise;
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    if (k > 0 && model.flip_between_layers()) z = reverse_rows(z);
    z = decoder(k, model.layer(k), z);
  }
  if (final_unflip(model.flip_between_layers(), model.num_layers())) z = reverse_rows(z);
  return z;
}

template <typename T>
NormalizeResult<T> model_normalize(const FlowModel<T>& model, const BasicMatrix<T>& x) {
  check_sequence(x, model.seq_len(), model.patch_dim(), "model_normalize");
  NormalizeResult<T> out;
  out.output = final_unflip(model.flip_between_layers(), model.num_layers()) ? reverse_rows(x) : x;
  for (std::size_t k = model.num_layers(); k-- > 0;) {
    auto step = layer_normalize(model.layer(k), out.output);
    out.output = std::move(step.output);
    out.logdet += step.logdet;
    if (k > 0 && model.flip_between_layers()) out.output = reverse_rows(out.output);
  }
  return out;
}

template <typename T>
T log_standard_normal(const BasicMatrix<T>& v) {
  const double n = static_cast<double>(v.size());
  double sq = 0.0;
  for (const T x : v.values()) sq += static_cast<double>(x) * static_cast<double>(x);
  return static_cast<T>(-0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * sq);
}

template <typename T>
T log_likelihood(const FlowModel<T>& model, const BasicMatrix<T>& x) {
  const auto z = model_normalize(model, x);
  return log_standard_normal(z.output) + z.logdet;
}

template <typename T>
BasicMatrix<T> masked_generate(const FlowModel<T>& model, const BasicMatrix<T>& noise,
                               std::size_t mask_offset) {
  if (mask_offset >= model.seq_len()) {
    throw ContractError("masked_generate: offset must be < L");
  }
  return model_generate<T>(model, noise,
                           [mask_offset](std::size_t, const Conditioner<T>& layer,
                                         const BasicMatrix<T>& u) {
                             return layer_generate_sequential(layer, u, mask_offset);
                           });
}

#define SEJD_INSTANTIATE_FLOW(T)                                                              \
  template class FlowModel<T>;                                                                \
  template BasicMatrix<T> reverse_rows<T>(const BasicMatrix<T>&);                             \
  template NormalizeResult<T> layer_normalize<T>(const Conditioner<T>&, const BasicMatrix<T>&, \
                                                 std::size_t);                                \
  template BasicMatrix<T> layer_generate_sequential<T>(const Conditioner<T>&,                 \
                                                       const BasicMatrix<T>&, std::size_t);   \
  template LayerDecoder<T> sequential_decoder<T>();                                           \
  template BasicMatrix<T> model_generate<T>(const FlowModel<T>&, const BasicMatrix<T>&,       \
                                            const LayerDecoder<T>&);                          \
  template NormalizeResult<T> model_normalize<T>(const FlowModel<T>&, const BasicMatrix<T>&); \
  template T log_standard_normal<T>(const BasicMatrix<T>&);                                   \
  template T log_likelihood<T>(const FlowModel<T>&, const BasicMatrix<T>&);                   \
  template BasicMatrix<T> masked_generate<T>(const FlowModel<T>&, const BasicMatrix<T>&,      \
                                             std::size_t);

SEJD_INSTANTIATE_FLOW(float)
SEJD_INSTANTIATE_FLOW(double)

#undef SEJD_INSTANTIATE_FLOW

}  // namespace sejd
