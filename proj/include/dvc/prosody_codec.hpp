#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dvc/dsp.hpp"
#include "dvc/nn.hpp"
#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

struct ProsodyCodecConfig {
  int in_dim = 82;  // 80 log-mel + normalized F0 + voiced flag
  int hidden = 96;
  int codebook_size = 128;  // V
  int code_dim = 64;        // D
  float lambda_commit = 0.25f;
  bool vanilla_vq = false;  // ablation: trainable codebook, no linear map
};

struct QuantizeResult {
  Tensor z_q;  // straight-through, [N x D]
  std::vector<int> ids;
  Tensor loss;  // scalar
};

// frame features the codec consumes: log-mel, per-utterance z-scored F0
// (zero on unvoiced frames), and the voiced flag
inline Tensor build_prosody_input(const Tensor& mel, const F0Contour& f0) {
  NoGrad ng;
  const int t = mel.rows(), m = mel.cols();
  check(int(f0.size()) == t, "prosody input: F0 grid must match mel grid");
  SpeakerF0Stats utt = speaker_f0_stats({f0});
  Tensor out = Tensor::zeros({t, m + 2});
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < m; ++c) out.at(r, c) = mel.at(r, c);
    bool v = f0.voiced[std::size_t(r)] != 0.0f;
    out.at(r, m) = v ? (f0.hz[std::size_t(r)] - utt.mean) / utt.std_dev : 0.0f;
    out.at(r, m + 1) = v ? 1.0f : 0.0f;
  }
  return out;
}

// Prosody encoder: two conv stacks at frame rate, mean pooling to token
// rate, a frozen-codebook vector quantizer, and a pitch head that reads the
// quantized embeddings back at frame rate.
class ProsodyCodec {
public:
  ProsodyCodec(ParamStore& ps, const ProsodyCodecConfig& cfg, RngStream rng)
      : cfg_(cfg) {
    const std::string p = "prosody_codec.";
    const int h = cfg.hidden;
    conv_.emplace_back(ps, p + "stack1.conv1", 3, cfg.in_dim, h, rng.child("c1"));
    norm_.emplace_back(ps, p + "stack1.norm1", h);
    conv_.emplace_back(ps, p + "stack1.conv2", 3, h, h, rng.child("c2"));
    norm_.emplace_back(ps, p + "stack1.norm2", h);
    conv_.emplace_back(ps, p + "stack2.conv1", 3, h, h, rng.child("c3"));
    norm_.emplace_back(ps, p + "stack2.norm1", h);
    conv_.emplace_back(ps, p + "stack2.conv2", 3, h, h, rng.child("c4"));
    norm_.emplace_back(ps, p + "stack2.norm2", h);
    proj_.emplace(ps, p + "proj", h, cfg.code_dim, rng.child("proj"));

    RngStream cb_rng = rng.child("codebook");
    Tensor q = Tensor::randn({cfg.codebook_size, cfg.code_dim}, cb_rng, 1.0f);
    codebook_ = ps.add(p + "codebook", q, /*trainable=*/cfg.vanilla_vq);
    if (!cfg.vanilla_vq) {
      Tensor w = Tensor::zeros({cfg.code_dim, cfg.code_dim});
      for (int i = 0; i < cfg.code_dim; ++i) w.at(i, i) = 1.0f;
      map_ = ps.add(p + "map", w);
    }
    f0_head_.emplace(ps, p + "f0_head", cfg.code_dim, 1, rng.child("f0"));
  }

  const ProsodyCodecConfig& config() const { return cfg_; }

  // [T x in_dim] -> [T x hidden]; length-preserving
  Tensor conv_stack_encode(const Tensor& x) const {
    check(x.cols() == cfg_.in_dim, "prosody codec: input dim mismatch");
    Tensor h = x;
    for (std::size_t i = 0; i < conv_.size(); ++i)
      h = gelu(norm_[i].forward(conv_[i].forward(h)));
    return h;
  }

  // mean-pool frame embeddings over each token's span
  static Tensor inverse_length_regulate(const Tensor& frames,
                                        const std::vector<int>& durations) {
    return segment_mean(frames, durations);
  }

  // effective codebook rows: QW in the frozen-codebook mode, Q itself in
  // the vanilla ablation
  Tensor effective_codebook() const {
    return cfg_.vanilla_vq ? codebook_ : matmul(codebook_, map_.value());
  }

  QuantizeResult simvq_quantize(const Tensor& z) const {
    for (float v : z.data())
      check(std::isfinite(v), "simvq: non-finite encoder output");
    const int n = z.rows(), d = z.cols();
    check(d == cfg_.code_dim, "simvq: code dim mismatch");

    Tensor rows = effective_codebook();
    std::vector<int> ids(std::size_t(n), 0);
    {
      NoGrad ng;
      for (int i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::max();
        for (int v = 0; v < cfg_.codebook_size; ++v) {
          double dist = 0.0;
          for (int j = 0; j < d; ++j) {
            double diff = double(z.at(i, j)) - double(rows.at(v, j));
            dist += diff * diff;
          }
          if (dist < best) {
            best = dist;
            ids[std::size_t(i)] = v;
          }
        }
      }
    }

    Tensor selected = gather_rows(rows, ids);  // [N x D]
    Tensor code_err = sub(selected, detach(z));
    Tensor commit_err = sub(z, detach(selected));
    Tensor loss = add(
        mul_scalar(sum(mul(code_err, code_err)), cfg_.lambda_commit / float(n)),
        mul_scalar(sum(mul(commit_err, commit_err)), 1.0f / float(n)));

    QuantizeResult r;
    r.z_q = straight_through(z, selected);
    r.ids = std::move(ids);
    r.loss = loss;
    return r;
  }

  // full encode path: frames -> token-rate codes
  QuantizeResult encode(const Tensor& x, const std::vector<int>& durations) const {
    Tensor h = conv_stack_encode(x);
    Tensor z = proj_->forward(inverse_length_regulate(h, durations));
    return simvq_quantize(z);
  }

  Tensor predict_f0(const Tensor& z_q_expanded) const {
    return f0_head_->forward(z_q_expanded);
  }

  // smooth-L1 on voiced frames between predicted and target normalized F0
  Tensor f0_prediction_loss(const Tensor& z_q_expanded,
                            const std::vector<float>& target_zf0,
                            const std::vector<float>& voiced_mask) const {
    check(target_zf0.size() == voiced_mask.size(),
          "f0 loss: target and mask lengths differ");
    check(z_q_expanded.rows() == int(target_zf0.size()),
          "f0 loss: grid mismatch");
    bool any = false;
    for (float v : voiced_mask) any = any || v != 0.0f;
    if (!any) {
      std::fprintf(stderr, "warning: no voiced frames, F0 loss is zero\n");
      return Tensor::scalar(0.0f);
    }
    return smooth_l1_masked(predict_f0(z_q_expanded), target_zf0, voiced_mask);
  }

  Tensor codebook() const { return codebook_; }
  Tensor map() const {
    check(map_.has_value(), "vanilla VQ has no linear map");
    return *map_;
  }

private:
  ProsodyCodecConfig cfg_;
  std::vector<Conv1d> conv_;
  std::vector<LayerNorm> norm_;
  std::optional<Linear> proj_;
  Tensor codebook_;
  std::optional<Tensor> map_;
  std::optional<Linear> f0_head_;
};

struct CodebookStats {
  std::vector<std::int64_t> counts;
  double perplexity = 0.0;
};

inline CodebookStats codebook_stats(const std::vector<std::vector<int>>& ids,
                                    int codebook_size) {
  CodebookStats s;
  s.counts.assign(std::size_t(codebook_size), 0);
  std::int64_t total = 0;
  for (const auto& seq : ids)
    for (int id : seq) {
      check(id >= 0 && id < codebook_size, "codebook stats: id out of range");
      ++s.counts[std::size_t(id)];
      ++total;
    }
  check(total > 0, "codebook stats: no ids");
  double entropy = 0.0;
  for (std::int64_t c : s.counts)
    if (c > 0) {
      double p = double(c) / double(total);
      entropy -= p * std::log(p);
    }
  s.perplexity = std::exp(entropy);
  return s;
}

}  // namespace dvc
