#include "sejd/conditioner.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sejd {

void ConditionerHyper::validate() const {
  if (seq_len < 1) throw ContractError("hyper: seq_len must be >= 1");
  if (patch_dim < 1) throw ContractError("hyper: patch_dim must be >= 1");
  if (channels < patch_dim) throw ContractError("hyper: channels must be >= patch_dim");
  if (blocks < 1) throw ContractError("hyper: blocks must be >= 1");
  if (!(scale_clamp > 0.0) || !std::isfinite(scale_clamp)) {
    throw ContractError("hyper: scale_clamp must be a positive finite number");
  }
}

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
T gelu(T x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  const T inner = kC * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
  constexpr T kC = T(0.7978845608028654);
  const T inner = kC * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(inner);
  const T d_inner = kC * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * d_inner;
}

// Normalizes one row; returns 1/sqrt(var + eps). `xhat` may be null.
template <typename T>
T norm_row(const T* x, std::size_t n, const T* gain, const T* bias, T* xhat, T* out) {
  T mean = T{0};
  for (std::size_t c = 0; c < n; ++c) mean += x[c];
  mean /= static_cast<T>(n);
  T var = T{0};
  for (std::size_t c = 0; c < n; ++c) {
    const T d = x[c] - mean;
    var += d * d;
  }
  var /= static_cast<T>(n);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
  for (std::size_t c = 0; c < n; ++c) {
    const T h = (x[c] - mean) * rstd;
    if (xhat != nullptr) xhat[c] = h;
    out[c] = h * gain[c] + bias[c];
  }
  return rstd;
}

template <typename T>
void norm_rows(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, const BasicMatrix<T>& bias,
               BasicMatrix<T>& xhat, BasicMatrix<T>& out, std::vector<T>& rstd) {
  xhat.reshape(x.rows(), x.cols());
  out.reshape(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    rstd[i] = norm_row(x.row(i).data(), x.cols(), gain.data(), bias.data(), xhat.row(i).data(),
                       out.row(i).data());
  }
}

// dx for one normalized row; accumulates gain/bias gradients.
template <typename T>
void norm_row_backward(const T* d_out, const T* xhat, T rstd, const T* gain, std::size_t n,
                       T* d_gain, T* d_bias, T* dx, bool accumulate) {
  T mean1 = T{0};
  T mean2 = T{0};
  for (std::size_t c = 0; c < n; ++c) {
    const T dh = d_out[c] * gain[c];
    d_gain[c] += d_out[c] * xhat[c];
    d_bias[c] += d_out[c];
    mean1 += dh;
    mean2 += dh * xhat[c];
  }
  mean1 /= static_cast<T>(n);
  mean2 /= static_cast<T>(n);
  for (std::size_t c = 0; c < n; ++c) {
    const T dh = d_out[c] * gain[c];
    const T v = rstd * (dh - mean1 - xhat[c] * mean2);
    dx[c] = accumulate ? dx[c] + v : v;
  }
}

template <typename T>
void add_row_bias(BasicMatrix<T>& m, const BasicMatrix<T>& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    T* r = m.row(i).data();
    for (std::size_t c = 0; c < m.cols(); ++c) r[c] += bias.data()[c];
  }
}

template <typename T>
void add_col_sums(const BasicMatrix<T>& m, BasicMatrix<T>& acc) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const T* r = m.row(i).data();
    for (std::size_t c = 0; c < m.cols(); ++c) acc.data()[c] += r[c];
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = T{0};
  for (std::size_t c = 0; c < n; ++c) s += a[c] * b[c];
  return s;
}

// Softmax attention of one query over key/value rows [0, count). An empty set
// yields a zero output.
template <typename T>
void attend_row(const T* q, const BasicMatrix<T>& keys, const BasicMatrix<T>& values,
                std::size_t count, T scale, T* probs, T* out) {
  const std::size_t n = keys.cols();
  std::fill(out, out + n, T{0});
  if (count == 0) return;
  T best = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] = dot(q, keys.row(j).data(), n) * scale;
    best = std::max(best, probs[j]);
  }
  T total = T{0};
  for (std::size_t j = 0; j < count; ++j) {
    probs[j] = std::exp(probs[j] - best);
    total += probs[j];
  }
  for (std::size_t j = 0; j < count; ++j) probs[j] /= total;
  for (std::size_t j = 0; j < count; ++j) {
    const T p = probs[j];
    const T* v = values.row(j).data();
    for (std::size_t c = 0; c < n; ++c) out[c] += p * v[c];
  }
}

std::size_t visible_count(std::size_t position, std::size_t mask_offset) {
  return position > mask_offset ? position - mask_offset : 0;
}

template <typename T>
void write_scale_shift(const BasicMatrix<T>& raw, std::size_t patch_dim, T clamp,
                       ScaleShift<T>& out) {
  out.scale.reshape(raw.rows(), patch_dim);
  out.shift.reshape(raw.rows(), patch_dim);
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    for (std::size_t d = 0; d < patch_dim; ++d) {
      out.scale(i, d) = clamp * std::tanh(raw(i, d) / clamp);
      out.shift(i, d) = raw(i, patch_dim + d);
    }
  }
}

template <typename T>
void check_input(const ConditionerHyper& hyper, const BasicMatrix<T>& y, std::size_t mask_offset) {
  if (y.rows() != hyper.seq_len || y.cols() != hyper.patch_dim) {
    throw ContractError("conditioner: expected " + std::to_string(hyper.seq_len) + "x" +
                        std::to_string(hyper.patch_dim) + " input, got " +
                        std::to_string(y.rows()) + "x" + std::to_string(y.cols()));
  }
  if (mask_offset > hyper.seq_len) throw ContractError("conditioner: mask offset exceeds L");
}

template <typename T>
void forward_impl(const ConditionerParams<T>& params, const BasicMatrix<T>& y,
                  std::size_t mask_offset, ScaleShift<T>& out, ForwardTape<T>& tape) {
  const auto& hp = params.hyper;
  check_input(hp, y, mask_offset);
  const std::size_t L = hp.seq_len;
  const T scale = T(1) / std::sqrt(static_cast<T>(hp.channels));

  tape.mask_offset = mask_offset;
  tape.y = y;
  matmul_into(y, params.in_w, tape.embed);
  add_row_bias(tape.embed, params.in_b);

  tape.blocks.resize(params.blocks.size());
  BasicMatrix<T> stream = params.pos;
  BasicMatrix<T> tmp;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto& p = params.blocks[b];
    auto& t = tape.blocks[b];
    t.h_in = stream;
    norm_rows(t.h_in, p.attn_norm_gain, p.attn_norm_bias, t.a_hat, t.a, t.a_rstd);
    tmp.reshape(L, hp.channels);
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      tmp.data()[i] = t.h_in.data()[i] + tape.embed.data()[i];
    }
    norm_rows(tmp, p.attn_norm_gain, p.attn_norm_bias, t.m_hat, t.mem, t.m_rstd);
    matmul_into(t.a, p.wq, t.q);
    matmul_into(t.mem, p.wk, t.k);
    matmul_into(t.mem, p.wv, t.v);

    t.probs.reshape(L, L);
    t.probs.fill(T{0});
    t.attn.reshape(L, hp.channels);
    for (std::size_t i = 0; i < L; ++i) {
      attend_row(t.q.row(i).data(), t.k, t.v, visible_count(i, mask_offset), scale,
                 t.probs.row(i).data(), t.attn.row(i).data());
    }
    matmul_into(t.attn, p.wo, tmp);
    t.h_mid.reshape(L, hp.channels);
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      t.h_mid.data()[i] = t.h_in.data()[i] + tmp.data()[i];
    }

    norm_rows(t.h_mid, p.mlp_norm_gain, p.mlp_norm_bias, t.n_hat, t.n, t.n_rstd);
    matmul_into(t.n, p.mlp_w1, t.z1);
    add_row_bias(t.z1, p.mlp_b1);
    t.act.reshape(t.z1.rows(), t.z1.cols());
    for (std::size_t i = 0; i < t.z1.size(); ++i) t.act.data()[i] = gelu(t.z1.data()[i]);
    matmul_into(t.act, p.mlp_w2, tmp);
    add_row_bias(tmp, p.mlp_b2);
    for (std::size_t i = 0; i < tmp.size(); ++i) {
      stream.data()[i] = t.h_mid.data()[i] + tmp.data()[i];
    }
  }
  tape.h_out = stream;
  matmul_into(tape.h_out, params.head_w, tape.raw);
  add_row_bias(tape.raw, params.head_b);
  write_scale_shift(tape.raw, hp.patch_dim, static_cast<T>(hp.scale_clamp), out);
}

template <typename T>
void backward_impl(const ConditionerParams<T>& params, const ForwardTape<T>& tape,
                   const BasicMatrix<T>& d_scale, const BasicMatrix<T>& d_shift,
                   ConditionerParams<T>& grads, BasicMatrix<T>& dy) {
  const auto& hp = params.hyper;
  const std::size_t L = hp.seq_len;
  const std::size_t D = hp.patch_dim;
  const std::size_t C = hp.channels;
  if (d_scale.rows() != L || d_scale.cols() != D || !d_scale.same_shape(d_shift)) {
    throw ContractError("cond_backward: cotangent shape mismatch");
  }
  if (tape.blocks.size() != params.blocks.size()) {
    throw ContractError("cond_backward: tape does not match params");
  }
  const T clamp = static_cast<T>(hp.scale_clamp);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));

  BasicMatrix<T> d_raw(L, 2 * D);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t d = 0; d < D; ++d) {
      const T th = std::tanh(tape.raw(i, d) / clamp);
      d_raw(i, d) = d_scale(i, d) * (T(1) - th * th);
      d_raw(i, D + d) = d_shift(i, d);
    }
  }
  matmul_tn_acc(tape.h_out, d_raw, grads.head_w);
  add_col_sums(d_raw, grads.head_b);
  BasicMatrix<T> dh;
  matmul_nt_into(d_raw, params.head_w, dh);

  BasicMatrix<T> d_embed(L, C);
  BasicMatrix<T> d_act, d_n, d_hmid, d_attn, dq, dk, dv, d_a, d_mem, d_mem_pre;
  std::vector<T> dp(L);
  for (std::size_t bi = params.blocks.size(); bi-- > 0;) {
    const auto& p = params.blocks[bi];
    auto& g = grads.blocks[bi];
    const auto& t = tape.blocks[bi];

    // MLP residual branch.
    matmul_tn_acc(t.act, dh, g.mlp_w2);
    add_col_sums(dh, g.mlp_b2);
    matmul_nt_into(dh, p.mlp_w2, d_act);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act.data()[i] *= gelu_grad(t.z1.data()[i]);
    matmul_tn_acc(t.n, d_act, g.mlp_w1);
    add_col_sums(d_act, g.mlp_b1);
    matmul_nt_into(d_act, p.mlp_w1, d_n);
    d_hmid = dh;
    for (std::size_t i = 0; i < L; ++i) {
      norm_row_backward(d_n.row(i).data(), t.n_hat.row(i).data(), t.n_rstd[i],
                        p.mlp_norm_gain.data(), C, g.mlp_norm_gain.data(),
                        g.mlp_norm_bias.data(), d_hmid.row(i).data(), true);
    }

    // Attention residual branch.
    matmul_tn_acc(t.attn, d_hmid, g.wo);
    matmul_nt_into(d_hmid, p.wo, d_attn);
    dq.reshape(L, C);
    dq.fill(T{0});
    dk.reshape(L, C);
    dk.fill(T{0});
    dv.reshape(L, C);
    dv.fill(T{0});
    for (std::size_t i = 0; i < L; ++i) {
      const std::size_t count = visible_count(i, tape.mask_offset);
      if (count == 0) continue;
      const T* probs = t.probs.row(i).data();
      const T* da = d_attn.row(i).data();
      T weighted = T{0};
      for (std::size_t j = 0; j < count; ++j) {
        dp[j] = dot(da, t.v.row(j).data(), C);
        weighted += probs[j] * dp[j];
        T* dvj = dv.row(j).data();
        for (std::size_t c = 0; c < C; ++c) dvj[c] += probs[j] * da[c];
      }
      T* dqi = dq.row(i).data();
      const T* qi = t.q.row(i).data();
      for (std::size_t j = 0; j < count; ++j) {
        const T ds = probs[j] * (dp[j] - weighted) * scale;
        const T* kj = t.k.row(j).data();
        T* dkj = dk.row(j).data();
        for (std::size_t c = 0; c < C; ++c) {
          dqi[c] += ds * kj[c];
          dkj[c] += ds * qi[c];
        }
      }
    }
    matmul_tn_acc(t.a, dq, g.wq);
    matmul_tn_acc(t.mem, dk, g.wk);
    matmul_tn_acc(t.mem, dv, g.wv);
    matmul_nt_into(dq, p.wq, d_a);
    matmul_nt_into(dk, p.wk, d_mem);
    matmul_nt_into(dv, p.wv, d_mem, true);

    d_mem_pre.reshape(L, C);
    dh = d_hmid;
    for (std::size_t i = 0; i < L; ++i) {
      norm_row_backward(d_a.row(i).data(), t.a_hat.row(i).data(), t.a_rstd[i],
                        p.attn_norm_gain.data(), C, g.attn_norm_gain.data(),
                        g.attn_norm_bias.data(), dh.row(i).data(), true);
      norm_row_backward(d_mem.row(i).data(), t.m_hat.row(i).data(), t.m_rstd[i],
                        p.attn_norm_gain.data(), C, g.attn_norm_gain.data(),
                        g.attn_norm_bias.data(), d_mem_pre.row(i).data(), false);
    }
    for (std::size_t i = 0; i < dh.size(); ++i) {
      dh.data()[i] += d_mem_pre.data()[i];
      d_embed.data()[i] += d_mem_pre.data()[i];
    }
  }
  for (std::size_t i = 0; i < dh.size(); ++i) grads.pos.data()[i] += dh.data()[i];
  matmul_tn_acc(tape.y, d_embed, grads.in_w);
  add_col_sums(d_embed, grads.in_b);
  matmul_nt_into(d_embed, params.in_w, dy);
}

}  // namespace

namespace detail {

template <typename T>
void kv_step(const ConditionerParams<T>& params, KvCache<T>& cache, const BasicMatrix<T>& seq,
             std::size_t prefix_len, std::size_t mask_offset, std::span<T> s_out,
             std::span<T> g_out) {
  const auto& hp = params.hyper;
  const std::size_t C = hp.channels;
  const std::size_t D = hp.patch_dim;
  if (cache.keys_.size() != params.blocks.size()) {
    throw CacheDesyncError("kv cache was built for a different conditioner");
  }
  const bool consistent = prefix_len == 0
                              ? (cache.length_ == 0 && !cache.has_pending_)
                              : (cache.has_pending_ && cache.length_ + 1 == prefix_len);
  if (!consistent) {
    throw CacheDesyncError("kv cache holds " + std::to_string(cache.length_) +
                           " positions but prefix has " + std::to_string(prefix_len));
  }
  if (prefix_len >= hp.seq_len) throw ContractError("incremental step past the sequence end");
  if (seq.cols() != D || seq.rows() < prefix_len) {
    throw ContractError("incremental step: prefix shape mismatch");
  }
  if (s_out.size() != D || g_out.size() != D) {
    throw ContractError("incremental step: output span size mismatch");
  }

  auto& x = cache.row_a_;
  auto& y = cache.row_b_;
  auto& tmp = cache.row_c_;
  auto& hidden = cache.row_hidden_;
  std::vector<T> unused_hat(C);

  // Keys/values of the row generated since the last call.
  if (prefix_len > 0) {
    const std::size_t p = prefix_len - 1;
    BasicMatrix<T> yrow(1, D);
    std::copy_n(seq.row(p).data(), D, yrow.data());
    BasicMatrix<T> embed;
    matmul_into(yrow, params.in_w, embed);
    add_row_bias(embed, params.in_b);
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
      const auto& blk = params.blocks[b];
      x.reshape(1, C);
      for (std::size_t c = 0; c < C; ++c) x.data()[c] = cache.pending_stream_(b, c) + embed.data()[c];
      y.reshape(1, C);
      norm_row(x.data(), C, blk.attn_norm_gain.data(), blk.attn_norm_bias.data(),
               unused_hat.data(), y.data());
      matmul_into(y, blk.wk, tmp);
      std::copy_n(tmp.data(), C, cache.keys_[b].row(p).data());
      matmul_into(y, blk.wv, tmp);
      std::copy_n(tmp.data(), C, cache.values_[b].row(p).data());
    }
    cache.length_ = prefix_len;
  }

  // Residual stream of position prefix_len.
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  const std::size_t pos = prefix_len;
  BasicMatrix<T> stream(1, C);
  std::copy_n(params.pos.row(pos).data(), C, stream.data());
  cache.probs_.reshape(1, hp.seq_len);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const auto& blk = params.blocks[b];
    std::copy_n(stream.data(), C, cache.pending_stream_.row(b).data());
    x.reshape(1, C);
    norm_row(stream.data(), C, blk.attn_norm_gain.data(), blk.attn_norm_bias.data(),
             unused_hat.data(), x.data());
    matmul_into(x, blk.wq, y);
    tmp.reshape(1, C);
    attend_row(y.data(), cache.keys_[b], cache.values_[b], visible_count(pos, mask_offset), scale,
               cache.probs_.data(), tmp.data());
    matmul_into(tmp, blk.wo, x);
    for (std::size_t c = 0; c < C; ++c) stream.data()[c] = stream.data()[c] + x.data()[c];

    y.reshape(1, C);
    norm_row(stream.data(), C, blk.mlp_norm_gain.data(), blk.mlp_norm_bias.data(),
             unused_hat.data(), y.data());
    matmul_into(y, blk.mlp_w1, hidden);
    add_row_bias(hidden, blk.mlp_b1);
    for (auto& v : hidden.values()) v = gelu(v);
    matmul_into(hidden, blk.mlp_w2, x);
    add_row_bias(x, blk.mlp_b2);
    for (std::size_t c = 0; c < C; ++c) stream.data()[c] = stream.data()[c] + x.data()[c];
  }
  BasicMatrix<T> raw;
  matmul_into(stream, params.head_w, raw);
  add_row_bias(raw, params.head_b);
  const T clamp = static_cast<T>(hp.scale_clamp);
  for (std::size_t d = 0; d < D; ++d) {
    s_out[d] = clamp * std::tanh(raw(0, d) / clamp);
    g_out[d] = raw(0, D + d);
  }
  cache.has_pending_ = true;
}

}  // namespace detail

namespace {

template <typename T>
class RecomputeIncremental final : public IncrementalConditioner<T> {
 public:
  RecomputeIncremental(const Conditioner<T>& cond, std::size_t mask_offset)
      : cond_(cond), mask_offset_(mask_offset), buffer_(cond.seq_len(), cond.patch_dim()) {}

  void next(const BasicMatrix<T>& seq, std::size_t prefix_len, std::span<T> scale,
            std::span<T> shift) override {
    if (prefix_len != expected_) {
      throw CacheDesyncError("incremental conditioner expected prefix " +
                             std::to_string(expected_) + ", got " + std::to_string(prefix_len));
    }
    buffer_.fill(T{0});
    for (std::size_t i = 0; i < prefix_len; ++i) {
      std::copy_n(seq.row(i).data(), seq.cols(), buffer_.row(i).data());
    }
    cond_.forward(buffer_, mask_offset_, out_);
    std::copy_n(out_.scale.row(prefix_len).data(), scale.size(), scale.data());
    std::copy_n(out_.shift.row(prefix_len).data(), shift.size(), shift.data());
    ++expected_;
  }

 private:
  const Conditioner<T>& cond_;
  std::size_t mask_offset_;
  std::size_t expected_ = 0;
  BasicMatrix<T> buffer_;
  ScaleShift<T> out_;
};

template <typename T>
class CachedIncremental final : public IncrementalConditioner<T> {
 public:
  CachedIncremental(const AttentionConditioner<T>& cond, std::size_t mask_offset)
      : cond_(cond), mask_offset_(mask_offset), cache_(cond.hyper()) {}

  void next(const BasicMatrix<T>& seq, std::size_t prefix_len, std::span<T> scale,
            std::span<T> shift) override {
    cond_.step(cache_, seq, prefix_len, mask_offset_, scale, shift);
  }

 private:
  const AttentionConditioner<T>& cond_;
  std::size_t mask_offset_;
  KvCache<T> cache_;
};

}  // namespace

template <typename T>
std::unique_ptr<IncrementalConditioner<T>> Conditioner<T>::start_incremental(
    std::size_t mask_offset) const {
  return std::make_unique<RecomputeIncremental<T>>(*this, mask_offset);
}

// ---------------------------------------------------------------------------
// Params

template <typename T>
ConditionerParams<T> ConditionerParams<T>::zeros(const ConditionerHyper& hyper) {
  hyper.validate();
  const std::size_t L = hyper.seq_len;
  const std::size_t D = hyper.patch_dim;
  const std::size_t C = hyper.channels;
  ConditionerParams p;
  p.hyper = hyper;
  p.in_w = BasicMatrix<T>(D, C);
  p.in_b = BasicMatrix<T>(1, C);
  p.pos = BasicMatrix<T>(L, C);
  p.blocks.resize(hyper.blocks);
  for (auto& b : p.blocks) {
    b.attn_norm_gain = BasicMatrix<T>(1, C);
    b.attn_norm_bias = BasicMatrix<T>(1, C);
    b.wq = BasicMatrix<T>(C, C);
    b.wk = BasicMatrix<T>(C, C);
    b.wv = BasicMatrix<T>(C, C);
    b.wo = BasicMatrix<T>(C, C);
    b.mlp_norm_gain = BasicMatrix<T>(1, C);
    b.mlp_norm_bias = BasicMatrix<T>(1, C);
    b.mlp_w1 = BasicMatrix<T>(C, 4 * C);
    b.mlp_b1 = BasicMatrix<T>(1, 4 * C);
    b.mlp_w2 = BasicMatrix<T>(4 * C, C);
    b.mlp_b2 = BasicMatrix<T>(1, C);
  }
  p.head_w = BasicMatrix<T>(C, 2 * D);
  p.head_b = BasicMatrix<T>(1, 2 * D);
  return p;
}

template <typename T>
std::size_t ConditionerParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const BasicMatrix<T>& m) { n += m.size(); });
  return n;
}

template <typename T>
template <typename U>
ConditionerParams<U> ConditionerParams<T>::cast() const {
  auto out = ConditionerParams<U>::zeros(hyper);
  std::vector<const BasicMatrix<T>*> src;
  for_each([&](const std::string&, const BasicMatrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, BasicMatrix<U>& m) { m = src[i++]->template cast<U>(); });
  return out;
}

template <typename T>
ConditionerParams<T> init_params(Rng& rng, const ConditionerHyper& hyper) {
  auto p = ConditionerParams<T>::zeros(hyper);
  constexpr double kStd = 0.02;
  auto draw = [&](BasicMatrix<T>& m) {
    for (auto& v : m.values()) v = static_cast<T>(kStd * rng.normal());
  };
  draw(p.in_w);
  draw(p.pos);
  for (auto& b : p.blocks) {
    b.attn_norm_gain.fill(T{1});
    draw(b.wq);
    draw(b.wk);
    draw(b.wv);
    draw(b.wo);
    b.mlp_norm_gain.fill(T{1});
    draw(b.mlp_w1);
    draw(b.mlp_w2);
  }
  // head_w / head_b stay zero.
  return p;
}

// ---------------------------------------------------------------------------
// KvCache / AttentionConditioner

template <typename T>
KvCache<T>::KvCache(const ConditionerHyper& hyper)
    : keys_(hyper.blocks, BasicMatrix<T>(hyper.seq_len, hyper.channels)),
      values_(hyper.blocks, BasicMatrix<T>(hyper.seq_len, hyper.channels)),
      pending_stream_(hyper.blocks, hyper.channels) {}

template <typename T>
AttentionConditioner<T>::AttentionConditioner(ConditionerParams<T> params)
    : params_(std::move(params)) {
  params_.hyper.validate();
}

template <typename T>
void AttentionConditioner<T>::forward(const BasicMatrix<T>& y, std::size_t mask_offset,
                                      ScaleShift<T>& out) const {
  thread_local ForwardTape<T> tape;
  forward_impl(params_, y, mask_offset, out, tape);
}

template <typename T>
void AttentionConditioner<T>::forward_recorded(const BasicMatrix<T>& y, std::size_t mask_offset,
                                               ScaleShift<T>& out, ForwardTape<T>& tape) const {
  forward_impl(params_, y, mask_offset, out, tape);
}

template <typename T>
void AttentionConditioner<T>::backward(const ForwardTape<T>& tape, const BasicMatrix<T>& d_scale,
                                       const BasicMatrix<T>& d_shift, ConditionerParams<T>& grads,
                                       BasicMatrix<T>& dy) const {
  backward_impl(params_, tape, d_scale, d_shift, grads, dy);
}

template <typename T>
void AttentionConditioner<T>::step(KvCache<T>& cache, const BasicMatrix<T>& seq,
                                   std::size_t prefix_len, std::size_t mask_offset,
                                   std::span<T> scale, std::span<T> shift) const {
  detail::kv_step(params_, cache, seq, prefix_len, mask_offset, scale, shift);
}

template <typename T>
std::unique_ptr<IncrementalConditioner<T>> AttentionConditioner<T>::start_incremental(
    std::size_t mask_offset) const {
  return std::make_unique<CachedIncremental<T>>(*this, mask_offset);
}

template <typename T>
void cond_forward_recorded(const ConditionerParams<T>& params, const BasicMatrix<T>& y,
                           std::size_t mask_offset, ScaleShift<T>& out, ForwardTape<T>& tape) {
  forward_impl(params, y, mask_offset, out, tape);
}

template <typename T>
void cond_backward_recorded(const ConditionerParams<T>& params, const ForwardTape<T>& tape,
                            const BasicMatrix<T>& d_scale, const BasicMatrix<T>& d_shift,
                            ConditionerParams<T>& grads, BasicMatrix<T>& dy) {
  backward_impl(params, tape, d_scale, d_shift, grads, dy);
}

template <typename T>
ScaleShift<T> cond_forward(const ConditionerParams<T>& params, const BasicMatrix<T>& y,
                           std::size_t mask_offset) {
  ForwardTape<T> tape;
  ScaleShift<T> out;
  forward_impl(params, y, mask_offset, out, tape);
  return out;
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> cond_forward_incremental(
    const ConditionerParams<T>& params, KvCache<T>& cache, const BasicMatrix<T>& prefix) {
  std::vector<T> s(params.hyper.patch_dim);
  std::vector<T> g(params.hyper.patch_dim);
  detail::kv_step(params, cache, prefix, prefix.rows(), 0, std::span<T>(s), std::span<T>(g));
  return {std::move(s), std::move(g)};
}

template <typename T>
std::pair<ConditionerParams<T>, BasicMatrix<T>> cond_backward(const ConditionerParams<T>& params,
                                                               const BasicMatrix<T>& y,
                                                               const BasicMatrix<T>& d_scale,
                                                               const BasicMatrix<T>& d_shift) {
  ForwardTape<T> tape;
  ScaleShift<T> out;
  forward_impl(params, y, 0, out, tape);
  auto grads = ConditionerParams<T>::zeros(params.hyper);
  BasicMatrix<T> dy;
  backward_impl(params, tape, d_scale, d_shift, grads, dy);
  return {std::move(grads), std::move(dy)};
}

// ---------------------------------------------------------------------------
// Analytic conditioners

template <typename T>
void IdentityConditioner<T>::forward(const BasicMatrix<T>& y, std::size_t,
                                     ScaleShift<T>& out) const {
  out.scale = BasicMatrix<T>(y.rows(), y.cols());
  out.shift = BasicMatrix<T>(y.rows(), y.cols());
}

template <typename T>
void PrefixSumConditioner<T>::forward(const BasicMatrix<T>& y, std::size_t mask_offset,
                                      ScaleShift<T>& out) const {
  out.scale = BasicMatrix<T>(y.rows(), y.cols());
  out.shift = BasicMatrix<T>(y.rows(), y.cols());
  for (std::size_t l = 1; l < y.rows(); ++l) {
    for (std::size_t d = 0; d < y.cols(); ++d) out.scale(l, d) = log_scale_;
    const std::size_t count = visible_count(l, mask_offset);
    for (std::size_t j = 0; j < count; ++j) {
      for (std::size_t d = 0; d < y.cols(); ++d) out.shift(l, d) += y(j, d);
    }
  }
}

#define SEJD_INSTANTIATE_CONDITIONER(T)                                                       \
  template class Conditioner<T>;                                                              \
  template struct ConditionerParams<T>;                                                       \
  template class KvCache<T>;                                                                  \
  template class AttentionConditioner<T>;                                                     \
  template class IdentityConditioner<T>;                                                      \
  template class PrefixSumConditioner<T>;                                                     \
  template ConditionerParams<T> init_params<T>(Rng&, const ConditionerHyper&);                \
  template void cond_forward_recorded<T>(const ConditionerParams<T>&, const BasicMatrix<T>&,   \
                                         std::size_t, ScaleShift<T>&, ForwardTape<T>&);       \
  template void cond_backward_recorded<T>(const ConditionerParams<T>&, const ForwardTape<T>&, \
                                          const BasicMatrix<T>&, const BasicMatrix<T>&,       \
                                          ConditionerParams<T>&, BasicMatrix<T>&);            \
  template ScaleShift<T> cond_forward<T>(const ConditionerParams<T>&, const BasicMatrix<T>&,  \
                                         std::size_t);                                        \
  template std::pair<std::vector<T>, std::vector<T>> cond_forward_incremental<T>(             \
      const ConditionerParams<T>&, KvCache<T>&, const BasicMatrix<T>&);                       \
  template std::pair<ConditionerParams<T>, BasicMatrix<T>> cond_backward<T>(                  \
      const ConditionerParams<T>&, const BasicMatrix<T>&, const BasicMatrix<T>&,              \
      const BasicMatrix<T>&);

SEJD_INSTANTIATE_CONDITIONER(float)
SEJD_INSTANTIATE_CONDITIONER(double)

template ConditionerParams<double> ConditionerParams<float>::cast<double>() const;
template ConditionerParams<float> ConditionerParams<double>::cast<float>() const;
template ConditionerParams<float> ConditionerParams<float>::cast<float>() const;
template ConditionerParams<double> ConditionerParams<double>::cast<double>() const;

#undef SEJD_INSTANTIATE_CONDITIONER

}  // namespace sejd
