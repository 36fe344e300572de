#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dvc/nn.hpp"
#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

struct DurationPredictorConfig {
  int embed_dim = 64;
  int hidden = 96;
  float dropout = 0.5f;
};

// FastSpeech-style duration predictor: two conv layers with norm, ReLU and
// dropout, then a scalar head. Works in the log(1 + frames) domain.
class DurationPredictor {
public:
  DurationPredictor(ParamStore& ps, const DurationPredictorConfig& cfg,
                    RngStream rng)
      : cfg_(cfg),
        conv1_(ps, "duration.conv1", 3, cfg.embed_dim, cfg.hidden, rng.child("c1")),
        norm1_(ps, "duration.norm1", cfg.hidden),
        conv2_(ps, "duration.conv2", 3, cfg.hidden, cfg.hidden, rng.child("c2")),
        norm2_(ps, "duration.norm2", cfg.hidden),
        head_(ps, "duration.head", cfg.hidden, 1, rng.child("head")) {}

  // [N x E] -> [N x 1] predicted log(1 + duration)
  Tensor predict_log_durations(const Tensor& token_embeddings, bool training,
                               RngStream rng = RngStream(0)) const {
    check(token_embeddings.rows() >= 1, "duration: empty token sequence");
    Tensor h = norm1_.forward(relu(conv1_.forward(token_embeddings)));
    h = dropout(h, cfg_.dropout, rng.child("d1"), training);
    h = norm2_.forward(relu(conv2_.forward(h)));
    h = dropout(h, cfg_.dropout, rng.child("d2"), training);
    return head_.forward(h);
  }

  // inference: frames = max(1, round(exp(y) - 1))
  std::vector<int> predict_durations(const Tensor& token_embeddings) const {
    NoGrad ng;
    Tensor y = predict_log_durations(token_embeddings, /*training=*/false);
    std::vector<int> out;
    out.reserve(std::size_t(y.rows()));
    for (int i = 0; i < y.rows(); ++i) {
      float d = std::exp(y.at(i, 0)) - 1.0f;
      out.push_back(std::max(1, int(std::lround(d))));
    }
    return out;
  }

private:
  DurationPredictorConfig cfg_;
  Conv1d conv1_;
  LayerNorm norm1_;
  Conv1d conv2_;
  LayerNorm norm2_;
  Linear head_;
};

inline Tensor log1p_durations(const std::vector<int>& durations) {
  Tensor t = Tensor::zeros({int(durations.size()), 1});
  for (std::size_t i = 0; i < durations.size(); ++i) {
    check(durations[i] >= 1, "duration target must be >= 1");
    t.data()[i] = std::log1p(float(durations[i]));
  }
  return t;
}

// MSE in the log(1 + d) domain
inline Tensor duration_loss(const Tensor& pred_logdur,
                            const std::vector<int>& true_durations) {
  check(pred_logdur.rows() == int(true_durations.size()) &&
            pred_logdur.cols() == 1,
        "duration loss: length mismatch");
  Tensor target = log1p_durations(true_durations);
  Tensor diff = sub(pred_logdur, target);
  return mul_scalar(sum(mul(diff, diff)), 1.0f / float(true_durations.size()));
}

// each row repeated durations[i] times; rejects non-positive durations
inline Tensor length_regulate(const Tensor& tokens,
                              const std::vector<int>& durations) {
  check(tokens.rows() == int(durations.size()),
        "length regulate: one duration per row required");
  for (int d : durations) check(d >= 1, "length regulate: durations must be >= 1");
  return repeat_rows(tokens, durations);
}

inline std::vector<int> length_regulate_ids(const std::vector<int>& ids,
                                            const std::vector<int>& durations) {
  check(ids.size() == durations.size(),
        "length regulate: one duration per id required");
  std::vector<int> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(durations[i] >= 1, "length regulate: durations must be >= 1");
    for (int r = 0; r < durations[i]; ++r) out.push_back(ids[i]);
  }
  return out;
}

}  // namespace dvc
