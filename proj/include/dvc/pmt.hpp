#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dvc/fmt.hpp"
#include "dvc/nn.hpp"
#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

struct PMTConfig {
  int layers = 6;
  int heads = 6;
  int embed = 192;
  int ff = 768;
  int prosody_vocab = 128;  // V; the mask token sits at id V
  int content_vocab = 64;
  float cond_drop = 0.2f;
  int decode_steps = 16;
  float guidance = 2.5f;
  int top_k = 40;
  float temp_start = 1.5f;
  float temp_floor = 0.05f;

  int mask_id() const { return prosody_vocab; }
  void validate() const {
    check(embed % heads == 0, "pmt: embed must divide into heads");
    check(decode_steps >= 1, "pmt: decode steps must be >= 1");
  }
};

struct MaskedSequence {
  std::vector<int> prosody_ids;  // mask_id at hidden positions
  std::vector<char> masked;      // 1 = hidden
  std::vector<int> content_ids;

  void validate(int mask_id) const {
    check(prosody_ids.size() == masked.size() &&
              prosody_ids.size() == content_ids.size(),
          "masked sequence: ragged lengths");
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (masked[i]) check(prosody_ids[i] == mask_id,
                           "masked sequence: hidden position must hold mask id");
  }
};

inline float sine_mask_fraction(float u) {
  check(u > 0.0f && u <= 1.0f, "mask schedule: u outside (0,1]");
  return std::sin(float(std::numbers::pi) * u / 2.0f);
}

// remaining masked positions after step i of the decode schedule
inline int remask_count(int target_len, int step, int steps) {
  double phase = std::numbers::pi / 2.0 * (1.0 - double(step) / double(steps));
  return int(std::ceil(double(target_len) * std::sin(phase)));
}

inline MaskedSequence apply_training_mask(const std::vector<int>& prosody_ids,
                                          const std::vector<int>& content_ids,
                                          float u, int mask_id,
                                          RngStream rng) {
  check(!prosody_ids.empty(), "training mask: empty sequence");
  check(prosody_ids.size() == content_ids.size(),
        "training mask: content and prosody lengths differ");
  const int len = int(prosody_ids.size());
  int n = int(std::ceil(sine_mask_fraction(u) * float(len)));
  n = std::min(n, len);

  std::vector<int> order(std::size_t(len), 0);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < n; ++i) {
    int j = i + int(rng.below(std::uint64_t(len - i)));
    std::swap(order[std::size_t(i)], order[std::size_t(j)]);
  }

  MaskedSequence seq;
  seq.prosody_ids = prosody_ids;
  seq.content_ids = content_ids;
  seq.masked.assign(std::size_t(len), 0);
  for (int i = 0; i < n; ++i) {
    seq.masked[std::size_t(order[std::size_t(i)])] = 1;
    seq.prosody_ids[std::size_t(order[std::size_t(i)])] = mask_id;
  }
  return seq;
}

// Masked token predictor over prosody ids: summed token embeddings through a
// rotary transformer stack, logits over the prosody vocabulary.
class ProsodyMaskTransformer {
public:
  ProsodyMaskTransformer(ParamStore& ps, const PMTConfig& cfg, RngStream rng)
      : cfg_(cfg) {
    cfg.validate();
    const float emb_std = 1.0f / std::sqrt(float(cfg.embed));
    RngStream r1 = rng.child("prosody_emb");
    prosody_emb_ = ps.add(
        "pmt.prosody_emb",
        Tensor::randn({cfg.prosody_vocab + 1, cfg.embed}, r1, emb_std));
    RngStream r2 = rng.child("content_emb");
    content_emb_ = ps.add(
        "pmt.content_emb",
        Tensor::randn({cfg.content_vocab, cfg.embed}, r2, emb_std));
    RngStream r3 = rng.child("null_content");
    null_content_ =
        ps.add("pmt.null_content", Tensor::randn({1, cfg.embed}, r3, emb_std));
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(ps, "pmt.block" + std::to_string(l), cfg.embed,
                           cfg.heads, cfg.ff,
                           rng.child("block").child(std::uint64_t(l)));
    final_norm_.emplace(ps, "pmt.final_norm", cfg.embed);
    head_.emplace(ps, "pmt.head", cfg.embed, cfg.prosody_vocab,
                  rng.child("head"), /*zero_init=*/true);
  }

  const PMTConfig& config() const { return cfg_; }

  // [L x V] logits; position_offset shifts the rotary phase only
  Tensor forward(const MaskedSequence& seq, bool null_content,
                 int position_offset = 0) const {
    seq.validate(cfg_.mask_id());
    const int len = int(seq.prosody_ids.size());
    check(len >= 1, "pmt: empty sequence");
    for (int id : seq.prosody_ids)
      check(id >= 0 && id <= cfg_.prosody_vocab, "pmt: prosody id out of range");

    Tensor h = gather_rows(prosody_emb_, seq.prosody_ids);
    Tensor c = null_content ? repeat_rows(null_content_, {len})
                            : gather_rows(content_emb_, seq.content_ids);
    h = add(h, c);
    std::vector<int> positions = iota_positions(len, position_offset);
    for (const PlainBlock& b : blocks_) h = b.forward(h, positions);
    return head_->forward(final_norm_->forward(h));
  }

private:
  PMTConfig cfg_;
  Tensor prosody_emb_, content_emb_, null_content_;
  std::vector<PlainBlock> blocks_;
  std::optional<LayerNorm> final_norm_;
  std::optional<Linear> head_;
};

// cross-entropy on hidden positions; draws mask level, positions and the
// condition drop from named substreams
inline Tensor pmt_training_loss(const ProsodyMaskTransformer& model,
                                const std::vector<int>& prosody_ids,
                                const std::vector<int>& content_ids,
                                RngStream rng) {
  float u = float(rng.child("u").open_unit());
  MaskedSequence seq =
      apply_training_mask(prosody_ids, content_ids, u,
                          model.config().mask_id(), rng.child("mask"));
  bool drop = rng.child("drop").uniform() < model.config().cond_drop;
  Tensor logits = model.forward(seq, drop);
  return cross_entropy_masked(logits, prosody_ids, seq.masked);
}

struct PMTDecodeParams {
  int steps = 16;
  float guidance = 2.5f;
  int top_k = 40;
  float temp_start = 1.5f;
  float temp_floor = 0.05f;
};

inline PMTDecodeParams decode_params(const PMTConfig& cfg) {
  PMTDecodeParams p;
  p.steps = cfg.decode_steps;
  p.guidance = cfg.guidance;
  p.top_k = cfg.top_k;
  p.temp_start = cfg.temp_start;
  p.temp_floor = cfg.temp_floor;
  return p;
}

struct PMTDecodeResult {
  std::vector<int> ids;            // target region only
  std::vector<int> full;           // prompt ++ target
  std::vector<int> masked_counts;  // after each step's remasking
};

// Confidence-ordered parallel decoding: every still-hidden position samples
// a token, the least confident ones are hidden again on the sine schedule,
// survivors freeze. Prompt positions are fixed from the start.
inline PMTDecodeResult iterative_decode(const ProsodyMaskTransformer& model,
                                        const std::vector<int>& content_full,
                                        const std::vector<int>& prompt_prosody,
                                        int target_len,
                                        const PMTDecodeParams& params,
                                        RngStream rng) {
  NoGrad ng;
  const PMTConfig& cfg = model.config();
  const int prompt_len = int(prompt_prosody.size());
  const int total = prompt_len + target_len;
  check(int(content_full.size()) == total,
        "decode: content length must equal prompt plus target");
  check(target_len >= 0, "decode: negative target length");
  for (int id : prompt_prosody)
    check(id >= 0 && id < cfg.prosody_vocab, "decode: bad prompt id");

  PMTDecodeResult result;
  result.full = prompt_prosody;
  if (target_len == 0) return result;
  check(total >= 1, "decode: empty grid");

  MaskedSequence seq;
  seq.content_ids = content_full;
  seq.prosody_ids = prompt_prosody;
  seq.prosody_ids.resize(std::size_t(total), cfg.mask_id());
  seq.masked.assign(std::size_t(total), 0);
  for (int i = prompt_len; i < total; ++i) seq.masked[std::size_t(i)] = 1;

  const int k = std::min(params.top_k, cfg.prosody_vocab);
  for (int step = 1; step <= params.steps; ++step) {
    float frac = float(step) / float(params.steps);
    float tau_raw = params.temp_start * (1.0f - frac);
    float tau_sample = std::max(tau_raw, params.temp_floor);

    Tensor logits = model.forward(seq, false);
    if (params.guidance != 1.0f) {
      Tensor uncond = model.forward(seq, true);
      logits = cfg_combine(logits, uncond, params.guidance);
    }

    struct Draw {
      int pos;
      int id;
      double confidence;
    };
    std::vector<Draw> draws;
    RngStream step_rng = rng.child("step").child(std::uint64_t(step));
    for (int p = 0; p < total; ++p) {
      if (!seq.masked[std::size_t(p)]) continue;
      // top-k floor on the guided row
      std::vector<int> idx(std::size_t(cfg.prosody_vocab), 0);
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                        [&](int a, int b) {
                          float la = logits.at(p, a), lb = logits.at(p, b);
                          return la > lb || (la == lb && a < b);
                        });
      double max_l = double(logits.at(p, idx[0]));
      std::vector<double> w(std::size_t(k), 0.0);
      double z = 0.0;
      for (int j = 0; j < k; ++j) {
        w[std::size_t(j)] = std::exp(
            (double(logits.at(p, idx[std::size_t(j)])) - max_l) / tau_sample);
        z += w[std::size_t(j)];
      }
      double r = step_rng.uniform() * z, acc = 0.0;
      int chosen = idx[std::size_t(k - 1)];
      for (int j = 0; j < k; ++j) {
        acc += w[std::size_t(j)];
        if (acc >= r) {
          chosen = idx[std::size_t(j)];
          break;
        }
      }
      // confidence: temperature-1 log-probability plus annealed Gumbel noise
      double lse = 0.0;
      for (int v = 0; v < cfg.prosody_vocab; ++v)
        lse += std::exp(double(logits.at(p, v)) - max_l);
      double log_prob = double(logits.at(p, chosen)) - max_l - std::log(lse);
      double conf = log_prob + double(tau_raw) * step_rng.gumbel();
      draws.push_back({p, chosen, conf});
    }

    int keep_masked = std::min(remask_count(target_len, step, params.steps),
                               int(draws.size()));
    std::sort(draws.begin(), draws.end(), [](const Draw& a, const Draw& b) {
      return a.confidence < b.confidence || (a.confidence == b.confidence &&
                                             a.pos < b.pos);
    });
    // lowest-confidence draws stay hidden, the rest freeze
    for (std::size_t j = 0; j < draws.size(); ++j) {
      const Draw& d = draws[j];
      if (int(j) < keep_masked) {
        seq.prosody_ids[std::size_t(d.pos)] = cfg.mask_id();
        seq.masked[std::size_t(d.pos)] = 1;
      } else {
        seq.prosody_ids[std::size_t(d.pos)] = d.id;
        seq.masked[std::size_t(d.pos)] = 0;
      }
    }
    result.masked_counts.push_back(keep_masked);
  }

  int leftover = 0;
  for (int i = prompt_len; i < total; ++i)
    leftover += seq.masked[std::size_t(i)] ? 1 : 0;
  check(leftover == 0, "decode: schedule left masked positions");

  result.full = seq.prosody_ids;
  result.ids.assign(seq.prosody_ids.begin() + prompt_len,
                    seq.prosody_ids.end());
  for (int id : result.ids)
    check(id >= 0 && id < cfg.prosody_vocab, "decode: mask id leaked");
  return result;
}

}  // namespace dvc
