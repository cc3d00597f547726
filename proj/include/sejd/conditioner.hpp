#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sejd/numerics.hpp"

namespace sejd {

struct ConditionerHyper {
  std::size_t seq_len = 16;   // L
  std::size_t patch_dim = 4;  // D
  std::size_t channels = 32;  // C
  std::size_t blocks = 2;     // B
  double scale_clamp = 2.0;   // alpha

  void validate() const;
  friend bool operator==(const ConditionerHyper&, const ConditionerHyper&) = default;
};

// Per-position log-scale (S) and shift (G), both L x D.
template <typename T>
struct ScaleShift {
  BasicMatrix<T> scale;
  BasicMatrix<T> shift;
};

// One sequential decode stream. next() is called with prefix_len = 0, 1, 2, ...
// in order; rows [0, prefix_len) of `seq` hold the already generated prefix.
template <typename T>
class IncrementalConditioner {
 public:
  virtual ~IncrementalConditioner() = default;
  virtual void next(const BasicMatrix<T>& seq, std::size_t prefix_len, std::span<T> scale,
                    std::span<T> shift) = 0;
};

// s_k(.), g_k(.) of one flow layer. Row l of the output may depend only on
// rows [0, l - mask_offset) of the input.
template <typename T>
class Conditioner {
 public:
  virtual ~Conditioner() = default;

  virtual std::size_t seq_len() const = 0;
  virtual std::size_t patch_dim() const = 0;

  virtual void forward(const BasicMatrix<T>& y, std::size_t mask_offset,
                       ScaleShift<T>& out) const = 0;

  // The default recomputes a batched forward over the prefix at each step.
  virtual std::unique_ptr<IncrementalConditioner<T>> start_incremental(
      std::size_t mask_offset) const;

  ScaleShift<T> forward(const BasicMatrix<T>& y, std::size_t mask_offset = 0) const {
    ScaleShift<T> out;
    forward(y, mask_offset, out);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Attention network

template <typename T>
struct BlockParams {
  BasicMatrix<T> attn_norm_gain, attn_norm_bias;
  BasicMatrix<T> wq, wk, wv, wo;
  BasicMatrix<T> mlp_norm_gain, mlp_norm_bias;
  BasicMatrix<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct ConditionerParams {
  ConditionerHyper hyper;
  BasicMatrix<T> in_w, in_b;  // D x C, 1 x C
  BasicMatrix<T> pos;         // L x C
  std::vector<BlockParams<T>> blocks;
  BasicMatrix<T> head_w, head_b;  // C x 2D, 1 x 2D

  // All-zero tensors of the right shapes.
  static ConditionerParams zeros(const ConditionerHyper& hyper);

  // Visits every tensor in canonical order as fn(name, matrix).
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t parameter_count() const;

  template <typename U>
  ConditionerParams<U> cast() const;

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("in_proj.weight"), self.in_w);
    fn(std::string("in_proj.bias"), self.in_b);
    fn(std::string("pos_embed"), self.pos);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      auto& blk = self.blocks[b];
      const std::string p = "blocks." + std::to_string(b) + ".";
      fn(p + "attn_norm.gain", blk.attn_norm_gain);
      fn(p + "attn_norm.bias", blk.attn_norm_bias);
      fn(p + "attn.wq", blk.wq);
      fn(p + "attn.wk", blk.wk);
      fn(p + "attn.wv", blk.wv);
      fn(p + "attn.wo", blk.wo);
      fn(p + "mlp_norm.gain", blk.mlp_norm_gain);
      fn(p + "mlp_norm.bias", blk.mlp_norm_bias);
      fn(p + "mlp.w1", blk.mlp_w1);
      fn(p + "mlp.b1", blk.mlp_b1);
      fn(p + "mlp.w2", blk.mlp_w2);
      fn(p + "mlp.b2", blk.mlp_b2);
    }
    fn(std::string("head.weight"), self.head_w);
    fn(std::string("head.bias"), self.head_b);
  }
};

// Weights ~ N(0, 0.02^2), norm gains 1, biases 0, output head exactly zero so
// the fresh layer is the identity transform.
template <typename T>
ConditionerParams<T> init_params(Rng& rng, const ConditionerHyper& hyper);

template <typename T>
class KvCache;

namespace detail {
template <typename T>
void kv_step(const ConditionerParams<T>& params, KvCache<T>& cache, const BasicMatrix<T>& seq,
             std::size_t prefix_len, std::size_t mask_offset, std::span<T> s_out,
             std::span<T> g_out);
}  // namespace detail

// Stored attention keys/values for the positions generated so far, plus the
// residual-stream state of the position whose (s, g) was last produced.
template <typename T>
class KvCache {
 public:
  KvCache() = default;
  explicit KvCache(const ConditionerHyper& hyper);

  // Positions 1..length() have keys/values stored.
  std::size_t length() const noexcept { return length_; }
  // True once (s, g) for position length()+1 has been produced.
  bool has_pending() const noexcept { return has_pending_; }
  const BasicMatrix<T>& keys(std::size_t block) const { return keys_.at(block); }
  const BasicMatrix<T>& values(std::size_t block) const { return values_.at(block); }

 private:
  friend void detail::kv_step<T>(const ConditionerParams<T>&, KvCache<T>&, const BasicMatrix<T>&,
                                 std::size_t, std::size_t, std::span<T>, std::span<T>);

  std::size_t length_ = 0;
  bool has_pending_ = false;
  std::vector<BasicMatrix<T>> keys_;    // per block, L x C
  std::vector<BasicMatrix<T>> values_;  // per block, L x C
  BasicMatrix<T> pending_stream_;       // blocks x C
  // scratch
  BasicMatrix<T> row_a_, row_b_, row_c_, row_hidden_, probs_;
};

// Intermediate activations of a batched forward, kept for the backward pass.
template <typename T>
struct ForwardTape {
  struct Block {
    BasicMatrix<T> h_in, a_hat, a, m_hat, mem, q, k, v, probs, attn, h_mid, n_hat, n, z1, act;
    std::vector<T> a_rstd, m_rstd, n_rstd;
  };
  std::size_t mask_offset = 0;
  BasicMatrix<T> y, embed, h_out, raw;
  std::vector<Block> blocks;
};

template <typename T>
class AttentionConditioner final : public Conditioner<T> {
 public:
  explicit AttentionConditioner(ConditionerParams<T> params);

  const ConditionerParams<T>& params() const noexcept { return params_; }
  const ConditionerHyper& hyper() const noexcept { return params_.hyper; }

  std::size_t seq_len() const override { return params_.hyper.seq_len; }
  std::size_t patch_dim() const override { return params_.hyper.patch_dim; }

  using Conditioner<T>::forward;
  void forward(const BasicMatrix<T>& y, std::size_t mask_offset,
               ScaleShift<T>& out) const override;
  void forward_recorded(const BasicMatrix<T>& y, std::size_t mask_offset, ScaleShift<T>& out,
                        ForwardTape<T>& tape) const;

  // Accumulates parameter gradients into `grads` and writes dL/dy into `dy`.
  void backward(const ForwardTape<T>& tape, const BasicMatrix<T>& d_scale,
                const BasicMatrix<T>& d_shift, ConditionerParams<T>& grads,
                BasicMatrix<T>& dy) const;

  // Appends row prefix_len-1 of `seq` to the cache (when prefix_len > 0) and
  // writes (s, g) for position prefix_len+1.
  void step(KvCache<T>& cache, const BasicMatrix<T>& seq, std::size_t prefix_len,
            std::size_t mask_offset, std::span<T> scale, std::span<T> shift) const;

  std::unique_ptr<IncrementalConditioner<T>> start_incremental(
      std::size_t mask_offset) const override;

 private:
  ConditionerParams<T> params_;
};

// Free-function surface over AttentionConditioner.
template <typename T>
void cond_forward_recorded(const ConditionerParams<T>& params, const BasicMatrix<T>& y,
                           std::size_t mask_offset, ScaleShift<T>& out, ForwardTape<T>& tape);
// Accumulates into `grads`; overwrites `dy`.
template <typename T>
void cond_backward_recorded(const ConditionerParams<T>& params, const ForwardTape<T>& tape,
                            const BasicMatrix<T>& d_scale, const BasicMatrix<T>& d_shift,
                            ConditionerParams<T>& grads, BasicMatrix<T>& dy);

template <typename T>
ScaleShift<T> cond_forward(const ConditionerParams<T>& params, const BasicMatrix<T>& y,
                           std::size_t mask_offset = 0);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> cond_forward_incremental(
    const ConditionerParams<T>& params, KvCache<T>& cache, const BasicMatrix<T>& prefix);

template <typename T>
std::pair<ConditionerParams<T>, BasicMatrix<T>> cond_backward(const ConditionerParams<T>& params,
                                                               const BasicMatrix<T>& y,
                                                               const BasicMatrix<T>& d_scale,
                                                               const BasicMatrix<T>& d_shift);

// ---------------------------------------------------------------------------
// Analytic conditioners with hand-checkable outputs.

// s = 0, g = 0.
template <typename T>
class IdentityConditioner final : public Conditioner<T> {
 public:
  IdentityConditioner(std::size_t seq_len, std::size_t patch_dim)
      : seq_len_(seq_len), patch_dim_(patch_dim) {}
  std::size_t seq_len() const override { return seq_len_; }
  std::size_t patch_dim() const override { return patch_dim_; }
  using Conditioner<T>::forward;
  void forward(const BasicMatrix<T>& y, std::size_t mask_offset,
               ScaleShift<T>& out) const override;

 private:
  std::size_t seq_len_, patch_dim_;
};

// g_l = sum of visible preceding rows; s_l = log_scale for l >= 2 (0 for l = 1).
template <typename T>
class PrefixSumConditioner final : public Conditioner<T> {
 public:
  PrefixSumConditioner(std::size_t seq_len, std::size_t patch_dim, T log_scale = T{0})
      : seq_len_(seq_len), patch_dim_(patch_dim), log_scale_(log_scale) {}
  std::size_t seq_len() const override { return seq_len_; }
  std::size_t patch_dim() const override { return patch_dim_; }
  using Conditioner<T>::forward;
  void forward(const BasicMatrix<T>& y, std::size_t mask_offset,
               ScaleShift<T>& out) const override;

 private:
  std::size_t seq_len_, patch_dim_;
  T log_scale_;
};

}  // namespace sejd
