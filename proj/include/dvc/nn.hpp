#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

// y = x W + b with W [in x out]
class Linear {
public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, int in, int out,
         RngStream rng, bool zero_init = false) {
    float std = zero_init ? 0.0f : 1.0f / std::sqrt(float(in));
    w_ = ps.add(prefix + ".w", Tensor::randn({in, out}, rng, std));
    b_ = ps.add(prefix + ".b", Tensor::zeros({1, out}));
  }
  Tensor forward(const Tensor& x) const {
    return add_rowvec(matmul(x, w_), b_);
  }
  Tensor weight() const { return w_; }
  Tensor bias() const { return b_; }

private:
  Tensor w_, b_;
};

// same-padded 1-d convolution over [T x C_in]
class Conv1d {
public:
  Conv1d() = default;
  Conv1d(ParamStore& ps, const std::string& prefix, int kernel, int in,
         int out, RngStream rng) {
    float std = 1.0f / std::sqrt(float(kernel * in));
    w_ = ps.add(prefix + ".w", Tensor::randn({kernel, in, out}, rng, std));
    b_ = ps.add(prefix + ".b", Tensor::zeros({1, out}));
  }
  Tensor forward(const Tensor& x) const {
    return add_rowvec(conv1d(x, w_), b_);
  }

private:
  Tensor w_, b_;
};

class LayerNorm {
public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& prefix, int dim) {
    gamma_ = ps.add(prefix + ".gamma", Tensor::full({1, dim}, 1.0f));
    beta_ = ps.add(prefix + ".beta", Tensor::zeros({1, dim}));
  }
  Tensor forward(const Tensor& x) const {
    return add_rowvec(mul_rowvec(layer_norm_rows(x), gamma_), beta_);
  }

private:
  Tensor gamma_, beta_;
};

// Bidirectional multi-head self-attention with rotary positions on q and k.
class SelfAttention {
public:
  SelfAttention() = default;
  SelfAttention(ParamStore& ps, const std::string& prefix, int embed,
                int heads, RngStream rng)
      : embed_(embed), heads_(heads), head_dim_(embed / heads) {
    check(embed % heads == 0, "attention: embed must divide by heads");
    check(head_dim_ % 2 == 0, "attention: head dim must be even for rotary");
    qkv_ = Linear(ps, prefix + ".qkv", embed, 3 * embed, rng.child("qkv"));
    out_ = Linear(ps, prefix + ".out", embed, embed, rng.child("out"));
  }

  Tensor forward(const Tensor& x, const std::vector<int>& positions) const {
    Tensor qkv = qkv_.forward(x);
    Tensor q = slice_cols(qkv, 0, embed_);
    Tensor k = slice_cols(qkv, embed_, embed_);
    Tensor v = slice_cols(qkv, 2 * embed_, embed_);
    float scale = 1.0f / std::sqrt(float(head_dim_));
    std::vector<Tensor> head_outs;
    head_outs.reserve(std::size_t(heads_));
    for (int h = 0; h < heads_; ++h) {
      Tensor qh = rope_apply(slice_cols(q, h * head_dim_, head_dim_), positions);
      Tensor kh = rope_apply(slice_cols(k, h * head_dim_, head_dim_), positions);
      Tensor vh = slice_cols(v, h * head_dim_, head_dim_);
      Tensor attn = softmax_rows(mul_scalar(matmul(qh, transpose(kh)), scale));
      head_outs.push_back(matmul(attn, vh));
    }
    return out_.forward(concat_cols(head_outs));
  }

private:
  int embed_ = 0, heads_ = 0, head_dim_ = 0;
  Linear qkv_, out_;
};

class FeedForward {
public:
  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& prefix, int embed, int hidden,
              RngStream rng) {
    in_ = Linear(ps, prefix + ".in", embed, hidden, rng.child("in"));
    out_ = Linear(ps, prefix + ".out", hidden, embed, rng.child("out"));
  }
  Tensor forward(const Tensor& x) const {
    return out_.forward(gelu(in_.forward(x)));
  }

private:
  Linear in_, out_;
};

// Transformer block modulated by a per-utterance conditioning vector:
//   x += gate_a * attn(scale_a * norm(x) + shift_a)
//   x += gate_f * ff(scale_f * norm(x) + shift_f)
// The modulation projection starts at zero weights with scale biases of one
// and zero gates, so every block is the identity map at initialization.
class CondBlock {
public:
  CondBlock() = default;
  CondBlock(ParamStore& ps, const std::string& prefix, int embed, int heads,
            int ff_hidden, RngStream rng)
      : embed_(embed) {
    attn_ = SelfAttention(ps, prefix + ".attn", embed, heads,
                          rng.child("attn"));
    ff_ = FeedForward(ps, prefix + ".ff", embed, ff_hidden, rng.child("ff"));
    mod_ = Linear(ps, prefix + ".mod", embed, 6 * embed, rng.child("mod"),
                  /*zero_init=*/true);
    std::vector<float>& b = mod_.bias().data();
    for (int i = 0; i < embed; ++i) {
      b[std::size_t(kScaleA * embed + i)] = 1.0f;
      b[std::size_t(kScaleF * embed + i)] = 1.0f;
    }
  }

  Tensor forward(const Tensor& x, const Tensor& cond,
                 const std::vector<int>& positions) const {
    Tensor mod = mod_.forward(cond);  // [1 x 6E]
    auto part = [&](int slot) { return slice_cols(mod, slot * embed_, embed_); };
    Tensor h = add_rowvec(mul_rowvec(layer_norm_rows(x), part(kScaleA)),
                          part(kShiftA));
    Tensor x1 = add(x, mul_rowvec(attn_.forward(h, positions), part(kGateA)));
    Tensor h2 = add_rowvec(mul_rowvec(layer_norm_rows(x1), part(kScaleF)),
                           part(kShiftF));
    return add(x1, mul_rowvec(ff_.forward(h2), part(kGateF)));
  }

private:
  static constexpr int kShiftA = 0, kScaleA = 1, kGateA = 2;
  static constexpr int kShiftF = 3, kScaleF = 4, kGateF = 5;
  int embed_ = 0;
  SelfAttention attn_;
  FeedForward ff_;
  Linear mod_;
};

// Pre-norm transformer block without external conditioning.
class PlainBlock {
public:
  PlainBlock() = default;
  PlainBlock(ParamStore& ps, const std::string& prefix, int embed, int heads,
             int ff_hidden, RngStream rng) {
    norm1_ = LayerNorm(ps, prefix + ".norm1", embed);
    norm2_ = LayerNorm(ps, prefix + ".norm2", embed);
    attn_ = SelfAttention(ps, prefix + ".attn", embed, heads,
                          rng.child("attn"));
    ff_ = FeedForward(ps, prefix + ".ff", embed, ff_hidden, rng.child("ff"));
  }
  Tensor forward(const Tensor& x, const std::vector<int>& positions) const {
    Tensor x1 = add(x, attn_.forward(norm1_.forward(x), positions));
    return add(x1, ff_.forward(norm2_.forward(x1)));
  }

private:
  LayerNorm norm1_, norm2_;
  SelfAttention attn_;
  FeedForward ff_;
};

// Sinusoidal embedding of a scalar in [0, 1], diffusion-style: the scalar is
// stretched by 1000 and read at geometrically spaced frequencies.
inline Tensor sinusoidal_embedding(float t, int dim) {
  check(dim % 2 == 0, "sinusoidal_embedding: dim must be even");
  int half = dim / 2;
  std::vector<float> e(std::size_t(dim), 0.0f);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    double arg = double(t) * 1000.0 * freq;
    e[std::size_t(i)] = float(std::cos(arg));
    e[std::size_t(half + i)] = float(std::sin(arg));
  }
  return Tensor::from({1, dim}, std::move(e));
}

inline std::vector<int> iota_positions(int n, int start = 0) {
  std::vector<int> p;
  p.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) p.push_back(start + i);
  return p;
}

}  // namespace dvc
