#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dvc/nn.hpp"
#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

struct FMTConfig {
  int layers = 6;
  int heads = 6;
  int embed = 192;
  int ff = 384;
  int mel_dim = 80;
  int content_vocab = 64;
  int prosody_vocab = 128;
  int token_embed = 64;  // per-stream width of content/prosody embeddings
  float cond_drop = 0.2f;
  int steps = 16;
  float guidance = 1.0f;

  void validate() const {
    check(embed % heads == 0, "fmt: embed must divide into heads");
    check(layers >= 1 && steps >= 1, "fmt: layers and steps must be >= 1");
  }
};

// frame-rate conditioning: token ids expanded to frames, the visible mel
// context with generated rows zeroed, and the generation mask
struct ConditioningBundle {
  std::vector<int> content_ids;
  std::vector<int> prosody_ids;
  Tensor context;            // [T x mel]
  std::vector<float> mask;   // 1 = generate this frame

  int frames() const { return int(mask.size()); }
  void validate() const {
    const int t = frames();
    check(int(content_ids.size()) == t && int(prosody_ids.size()) == t,
          "conditioning: token grids must match the frame count");
    check(context.rows() == t, "conditioning: context grid mismatch");
  }
};

// straight-line bridge between noise and data; the target field is constant
inline std::pair<Tensor, Tensor> ot_interpolate(const Tensor& x0,
                                                const Tensor& x1, float t) {
  check(x0.shape() == x1.shape(), "ot_interpolate: shape mismatch");
  check(t >= 0.0f && t <= 1.0f, "ot_interpolate: t outside [0,1]");
  Tensor x_t = add(mul_scalar(x0, 1.0f - t), mul_scalar(x1, t));
  Tensor u = sub(x1, x0);
  return {x_t, u};
}

inline Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond,
                          float s) {
  check(v_cond.shape() == v_uncond.shape(), "cfg_combine: shape mismatch");
  return add(v_uncond, mul_scalar(sub(v_cond, v_uncond), s));
}

// one contiguous span covering U(0.5, 1.0) of the frames
inline std::vector<float> sample_mask_span(int frames, RngStream rng) {
  check(frames >= 1, "mask span: empty grid");
  float r = rng.uniform(0.5f, 1.0f);
  int len = std::max(1, std::min(frames, int(std::lround(r * float(frames)))));
  int start = int(rng.below(std::uint64_t(frames - len + 1)));
  std::vector<float> mask(std::size_t(frames), 0.0f);
  for (int i = start; i < start + len; ++i) mask[std::size_t(i)] = 1.0f;
  return mask;
}

// Conditional mel infilling network: DiT blocks modulated by the flow time,
// rotary attention, learned null embeddings for guidance dropping.
class FlowTransformer {
public:
  FlowTransformer(ParamStore& ps, const FMTConfig& cfg, RngStream rng)
      : cfg_(cfg) {
    cfg.validate();
    const float emb_std = 1.0f / std::sqrt(float(cfg.token_embed));
    RngStream r1 = rng.child("content_emb");
    content_emb_ = ps.add("fmt.content_emb",
                          Tensor::randn({cfg.content_vocab, cfg.token_embed},
                                        r1, emb_std));
    RngStream r2 = rng.child("prosody_emb");
    prosody_emb_ = ps.add("fmt.prosody_emb",
                          Tensor::randn({cfg.prosody_vocab, cfg.token_embed},
                                        r2, emb_std));
    RngStream r3 = rng.child("null_content");
    null_content_ =
        ps.add("fmt.null_content", Tensor::randn({1, cfg.token_embed}, r3, emb_std));
    RngStream r4 = rng.child("null_prosody");
    null_prosody_ =
        ps.add("fmt.null_prosody", Tensor::randn({1, cfg.token_embed}, r4, emb_std));
    RngStream r5 = rng.child("null_context");
    null_context_ =
        ps.add("fmt.null_context", Tensor::randn({1, cfg.mel_dim}, r5, 0.1f));

    const int in_dim = cfg.mel_dim * 2 + cfg.token_embed * 2 + 1;
    in_proj_.emplace(ps, "fmt.in_proj", in_dim, cfg.embed, rng.child("in"));
    t_fc1_.emplace(ps, "fmt.time.fc1", cfg.embed, cfg.embed, rng.child("t1"));
    t_fc2_.emplace(ps, "fmt.time.fc2", cfg.embed, cfg.embed, rng.child("t2"));
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(ps, "fmt.block" + std::to_string(l), cfg.embed,
                           cfg.heads, cfg.ff, rng.child("block").child(std::uint64_t(l)));
    final_norm_.emplace(ps, "fmt.final_norm", cfg.embed);
    out_proj_.emplace(ps, "fmt.out_proj", cfg.embed, cfg.mel_dim,
                      rng.child("out"), /*zero_init=*/true);
  }

  const FMTConfig& config() const { return cfg_; }

  Tensor forward(const Tensor& x_t, float t, const ConditioningBundle& cond,
                 bool null_content, bool null_prosody,
                 bool null_context) const {
    cond.validate();
    const int frames = x_t.rows();
    check(frames == cond.frames(), "fmt: sample and conditioning grids differ");
    check(x_t.cols() == cfg_.mel_dim, "fmt: bad mel width");

    Tensor content = null_content
                         ? repeat_rows(null_content_, {frames})
                         : gather_rows(content_emb_, cond.content_ids);
    Tensor prosody = null_prosody
                         ? repeat_rows(null_prosody_, {frames})
                         : gather_rows(prosody_emb_, cond.prosody_ids);
    Tensor ctx = null_context ? repeat_rows(null_context_, {frames})
                              : cond.context;
    Tensor mask_col = Tensor::zeros({frames, 1});
    for (int i = 0; i < frames; ++i) mask_col.at(i, 0) = cond.mask[std::size_t(i)];

    Tensor h = in_proj_->forward(
        concat_cols({x_t, ctx, content, prosody, mask_col}));
    Tensor time_vec =
        t_fc2_->forward(silu(t_fc1_->forward(sinusoidal_embedding(t, cfg_.embed))));
    std::vector<int> positions = iota_positions(frames);
    for (const CondBlock& b : blocks_) h = b.forward(h, time_vec, positions);
    return out_proj_->forward(final_norm_->forward(h));
  }

private:
  FMTConfig cfg_;
  Tensor content_emb_, prosody_emb_;
  Tensor null_content_, null_prosody_, null_context_;
  std::optional<Linear> in_proj_, t_fc1_, t_fc2_;
  std::vector<CondBlock> blocks_;
  std::optional<LayerNorm> final_norm_;
  std::optional<Linear> out_proj_;
};

// single-utterance OT-CFM objective with an explicit mask (test hook)
inline Tensor fmt_training_loss_masked(const FlowTransformer& model,
                                       const Tensor& x1,
                                       const ConditioningBundle& base,
                                       const std::vector<float>& mask,
                                       float t, const Tensor& x0,
                                       bool drop_cond) {
  auto [x_t, u] = ot_interpolate(x0, x1, t);
  ConditioningBundle cond = base;
  cond.mask = mask;
  cond.context = Tensor::zeros({x1.rows(), x1.cols()});
  {
    NoGrad ng;
    for (int r = 0; r < x1.rows(); ++r)
      if (mask[std::size_t(r)] == 0.0f)
        for (int c = 0; c < x1.cols(); ++c) cond.context.at(r, c) = x1.at(r, c);
  }
  Tensor v = model.forward(x_t, t, cond, drop_cond, drop_cond, drop_cond);
  return mse_masked_rows(v, u, mask);
}

// draws t, noise, span and guidance drop from named substreams
inline Tensor fmt_training_loss(const FlowTransformer& model, const Tensor& x1,
                                const std::vector<int>& content_ids,
                                const std::vector<int>& prosody_ids,
                                RngStream rng) {
  const int frames = x1.rows();
  ConditioningBundle base;
  base.content_ids = content_ids;
  base.prosody_ids = prosody_ids;
  base.context = x1;
  base.mask.assign(std::size_t(frames), 0.0f);

  float t = rng.child("t").uniform();
  RngStream noise = rng.child("x0");
  Tensor x0 = Tensor::randn({frames, x1.cols()}, noise, 1.0f);
  std::vector<float> mask = sample_mask_span(frames, rng.child("mask"));
  bool drop = rng.child("drop").uniform() < model.config().cond_drop;
  return fmt_training_loss_masked(model, x1, base, mask, t, x0, drop);
}

// Euler integration from noise; context rows are copied back verbatim after
// every step so only masked rows ever move.
inline Tensor fmt_sample(const FlowTransformer& model,
                         const ConditioningBundle& cond, int steps,
                         float guidance, RngStream rng,
                         bool drop_content = false, bool drop_prosody = false) {
  NoGrad ng;
  cond.validate();
  const int frames = cond.frames(), mel = cond.context.cols();
  check(steps >= 1, "fmt_sample: steps must be >= 1");

  RngStream noise = rng.child("x0");
  Tensor x = Tensor::zeros({frames, mel});
  for (int r = 0; r < frames; ++r) {
    bool gen = cond.mask[std::size_t(r)] != 0.0f;
    for (int c = 0; c < mel; ++c)
      x.at(r, c) = gen ? noise.normal() : cond.context.at(r, c);
  }

  for (int i = 0; i < steps; ++i) {
    float t = float(i) / float(steps);
    Tensor v = model.forward(x, t, cond, drop_content, drop_prosody, false);
    if (guidance != 1.0f) {
      Tensor v_u = model.forward(x, t, cond, true, true, true);
      v = cfg_combine(v, v_u, guidance);
    }
    x = add(x, mul_scalar(v, 1.0f / float(steps)));
    for (int r = 0; r < frames; ++r)
      if (cond.mask[std::size_t(r)] == 0.0f)
        for (int c = 0; c < mel; ++c) x.at(r, c) = cond.context.at(r, c);
  }
  return x;
}

}  // namespace dvc
