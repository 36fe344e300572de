#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dvc/pipeline.hpp"

namespace dvc {

// --------------------------------------------------------------------------
// pitch correlation

struct F0CorrResult {
  double r = 0.0;
  bool defined = false;
};

// Pearson correlation between the voiced tracks, with the second track
// linearly resampled onto the first track's length.
inline F0CorrResult f0_pearson(const F0Contour& a, const F0Contour& b) {
  check(a.size() > 0 && b.size() > 0, "f0_pearson: empty contour");
  std::vector<double> va, vb;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.voiced[i] != 0.0f) va.push_back(double(a.hz[i]));
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b.voiced[i] != 0.0f) vb.push_back(double(b.hz[i]));
  if (va.empty() || vb.empty()) return {};

  const std::size_t n = va.size();
  std::vector<double> rb(n, 0.0);
  if (vb.size() == 1 || n == 1) {
    for (double& v : rb) v = vb[0];
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double pos = double(i) * double(vb.size() - 1) / double(n - 1);
      std::size_t lo = std::size_t(pos);
      std::size_t hi = std::min(lo + 1, vb.size() - 1);
      double w = pos - double(lo);
      rb[i] = (1.0 - w) * vb[lo] + w * vb[hi];
    }
  }

  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += va[i];
    mb += rb[i];
  }
  ma /= double(n);
  mb /= double(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (va[i] - ma) * (rb[i] - mb);
    saa += (va[i] - ma) * (va[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa <= 1e-12 || sbb <= 1e-12) return {};
  return {sab / std::sqrt(saa * sbb), true};
}

// --------------------------------------------------------------------------
// token-level content agreement

inline int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = int(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = int(i);
    for (std::size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline double content_token_similarity(const std::vector<int>& a,
                                       const std::vector<int>& b) {
  std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 1.0;
  return 1.0 - double(levenshtein(a, b)) / double(longest);
}

// edit-distance agreement between the deduplicated token strings of two files
inline double content_accuracy(const MelProcessor& mp, const ContentCodebook& cb,
                               const std::filesystem::path& wav_a,
                               const std::filesystem::path& wav_b) {
  auto ids = [&](const std::filesystem::path& p) {
    std::vector<float> w = read_wav(p, mp.config().sample_rate);
    return dedup(tokenize(frame_features(mp.mel(w)), cb)).ids;
  };
  return content_token_similarity(ids(wav_a), ids(wav_b));
}

// --------------------------------------------------------------------------
// speaker similarity probe

struct SpeakerClassifierConfig {
  int mel_dim = 80;
  int hidden = 64;
  int n_speakers = 0;  // label count, fixed at training time

  void validate() const {
    check(mel_dim >= 1 && hidden >= 1 && n_speakers >= 2,
          "speaker classifier: degenerate sizes");
  }
};

// Two conv layers over log-mel frames, mean pooling, and a linear label
// head. The pooled activations serve as the utterance embedding.
class SpeakerClassifier {
public:
  SpeakerClassifier(ParamStore& ps, const SpeakerClassifierConfig& cfg,
                    RngStream rng)
      : cfg_(cfg),
        conv1_(ps, "speaker_clf.conv1", 3, cfg.mel_dim, cfg.hidden,
               rng.child("c1")),
        norm1_(ps, "speaker_clf.norm1", cfg.hidden),
        conv2_(ps, "speaker_clf.conv2", 3, cfg.hidden, cfg.hidden,
               rng.child("c2")),
        norm2_(ps, "speaker_clf.norm2", cfg.hidden),
        head_(ps, "speaker_clf.head", cfg.hidden, cfg.n_speakers,
              rng.child("head")) {
    cfg.validate();
    trained_ = ps.add("speaker_clf.trained_flag", Tensor::zeros({1, 1}),
                      /*trainable=*/false);
  }

  const SpeakerClassifierConfig& config() const { return cfg_; }
  bool trained() const { return trained_.at(0, 0) >= 0.5f; }
  void mark_trained() { trained_.at(0, 0) = 1.0f; }

  // [1 x hidden] mean-pooled utterance embedding from a raw log-mel matrix
  Tensor embed(const Tensor& mel_raw) const {
    check(mel_raw.cols() == cfg_.mel_dim, "speaker clf: mel width mismatch");
    Tensor h = norm1_.forward(relu(conv1_.forward(mel_raw)));
    h = norm2_.forward(relu(conv2_.forward(h)));
    return segment_mean(h, {mel_raw.rows()});
  }

  Tensor logits(const Tensor& mel_raw) const {
    return head_.forward(embed(mel_raw));
  }

private:
  SpeakerClassifierConfig cfg_;
  Conv1d conv1_;
  LayerNorm norm1_;
  Conv1d conv2_;
  LayerNorm norm2_;
  Linear head_;
  Tensor trained_;
};

// training speakers in manifest order; the label set for the classifier
inline std::vector<std::string> train_speaker_labels(const Corpus& corpus) {
  std::vector<std::string> labels;
  for (const SpeakerSpec& s : corpus.speakers)
    if (!s.held_out) labels.push_back(s.id);
  return labels;
}

struct SpeakerClassifierTrainResult {
  double train_accuracy = 0.0;
  std::int64_t steps = 0;
};

inline SpeakerClassifierTrainResult train_speaker_classifier(
    SpeakerClassifier& clf, ParamStore& ps, const Corpus& corpus,
    const std::filesystem::path& root, std::uint64_t seed,
    std::int64_t steps = 600, int batch = 8) {
  std::vector<std::string> labels = train_speaker_labels(corpus);
  check(int(labels.size()) == clf.config().n_speakers,
        "speaker classifier: label count mismatch");
  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < labels.size(); ++i) label_of[labels[i]] = int(i);

  MelProcessor mp(corpus.cfg.mel);
  std::vector<Tensor> mels;
  std::vector<int> targets;
  for (const UtteranceRecord& rec : corpus.utterances) {
    if (corpus.speaker(rec.speaker).held_out) continue;
    mels.push_back(mp.mel(read_wav(root / rec.wav_path,
                                   corpus.cfg.mel.sample_rate)));
    targets.push_back(label_of.at(rec.speaker));
  }
  check(!mels.empty(), "speaker classifier: no training utterances");

  AdamWConfig ocfg;
  ocfg.lr_start = 1e-3f;
  ocfg.lr_end = 1e-3f;
  ocfg.weight_decay = 0.0f;
  AdamW opt(ps, ocfg);
  RngStream rng = RngStream::from_seed(seed, "speaker_clf");
  for (std::int64_t step = 0; step < steps; ++step) {
    RngStream srng = rng.child("step").child(std::uint64_t(step));
    ps.zero_grad();
    for (int b = 0; b < batch; ++b) {
      std::size_t i = std::size_t(srng.below(std::uint64_t(mels.size())));
      Tensor loss = cross_entropy_masked(clf.logits(mels[i]), {targets[i]}, {1});
      backward(mul_scalar(loss, 1.0f / float(batch)));
    }
    opt.step(step);
  }

  SpeakerClassifierTrainResult r;
  r.steps = steps;
  NoGrad ng;
  int correct = 0;
  for (std::size_t i = 0; i < mels.size(); ++i) {
    Tensor l = clf.logits(mels[i]);
    int arg = 0;
    for (int c = 1; c < l.cols(); ++c)
      if (l.at(0, c) > l.at(0, arg)) arg = c;
    correct += arg == targets[i] ? 1 : 0;
  }
  r.train_accuracy = double(correct) / double(mels.size());
  clf.mark_trained();
  return r;
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
  check(a.numel() == b.numel(), "cosine: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    double x = double(a.data()[std::size_t(i)]);
    double y = double(b.data()[std::size_t(i)]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na <= 1e-20 || nb <= 1e-20) return 0.0;
  return dot / std::sqrt(na * nb);
}

inline double speaker_similarity(const SpeakerClassifier& clf,
                                 const MelProcessor& mp,
                                 const std::filesystem::path& wav_a,
                                 const std::filesystem::path& wav_b) {
  check(clf.trained(), "speaker classifier has not been trained");
  NoGrad ng;
  Tensor ea = clf.embed(mp.mel(read_wav(wav_a, mp.config().sample_rate)));
  Tensor eb = clf.embed(mp.mel(read_wav(wav_b, mp.config().sample_rate)));
  return cosine_similarity(ea, eb);
}

// --------------------------------------------------------------------------
// contour shape probe

// Least-squares slope of the mean-normalized voiced pitch against normalized
// time. The corpus contour family puts rises near +0.3 and falls near -0.3.
inline double contour_slope(const F0Contour& f0) {
  std::vector<double> xs, ys;
  double mean = 0.0;
  for (std::size_t i = 0; i < f0.size(); ++i)
    if (f0.voiced[i] != 0.0f) {
      xs.push_back(f0.size() > 1 ? double(i) / double(f0.size() - 1) : 0.0);
      ys.push_back(double(f0.hz[i]));
      mean += double(f0.hz[i]);
    }
  if (xs.size() < 2) return 0.0;
  mean /= double(xs.size());
  if (mean <= 1e-9) return 0.0;
  double mx = 0.0;
  for (double x : xs) mx += x;
  mx /= double(xs.size());
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    num += (xs[i] - mx) * (ys[i] / mean - 1.0);
    den += (xs[i] - mx) * (xs[i] - mx);
  }
  if (den <= 1e-12) return 0.0;
  return num / den;
}

inline ContourTag classify_contour(const F0Contour& f0,
                                   double threshold = 0.12) {
  double s = contour_slope(f0);
  if (s >= threshold) return ContourTag::rise;
  if (s <= -threshold) return ContourTag::fall;
  return ContourTag::flat;
}

// --------------------------------------------------------------------------
// condition ablation

// Conversion with one condition stream nulled, dumped as CSV and PGM for
// inspection alongside the waveform.
inline ConversionArtifacts ablation_dump(const VoicePipeline& vp,
                                         const ContentCodebook& cb,
                                         const ConversionRequest& req,
                                         const std::filesystem::path& out_base) {
  ConversionArtifacts art = convert(vp, cb, req);
  write_mel_csv(out_base.string() + ".csv", art.mel);
  write_mel_pgm(out_base.string() + ".pgm", art.mel);
  return art;
}

// --------------------------------------------------------------------------
// report assembly

struct PairMetrics {
  std::string source, reference, output;
  std::string mode;
  double f0_corr = 0.0;
  bool f0_defined = false;
  double content_acc = 0.0;
  double sim_reference = 0.0;
  double sim_source = 0.0;
  bool prefers_reference = false;
  double mel_distance = 0.0;
  std::string contour_output = "flat";
};

// mean absolute log-mel difference against the source, both tracks cropped
// to the shorter length; a crude spectral-change indicator
inline double mel_distance(const Tensor& a, const Tensor& b) {
  int rows = std::min(a.rows(), b.rows());
  check(a.cols() == b.cols() && rows > 0, "mel distance: shape mismatch");
  double acc = 0.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < a.cols(); ++c)
      acc += std::abs(double(a.at(r, c)) - double(b.at(r, c)));
  return acc / (double(rows) * double(a.cols()));
}

inline PairMetrics evaluate_pair(const VoicePipeline& vp,
                                 const ContentCodebook& cb,
                                 const SpeakerClassifier& clf,
                                 const ConversionRequest& req) {
  check(!req.output_wav.empty(), "evaluate_pair: output path required");
  ConversionArtifacts art = convert(vp, cb, req);

  PairMetrics m;
  m.source = req.source_wav;
  m.reference = req.reference_wav;
  m.output = req.output_wav;
  m.mode = mode_name(req.mode);

  const MelProcessor& mp = vp.mel();
  std::vector<float> src = read_wav(req.source_wav, mp.config().sample_rate);
  F0Contour src_f0 = estimate_f0(src, mp.config());
  F0Contour out_f0 = estimate_f0(art.wav, mp.config());
  F0CorrResult corr = f0_pearson(src_f0, out_f0);
  m.f0_corr = corr.r;
  m.f0_defined = corr.defined;
  m.content_acc = content_accuracy(mp, cb, req.source_wav, req.output_wav);
  m.sim_reference = speaker_similarity(clf, mp, req.output_wav,
                                       req.reference_wav);
  m.sim_source = speaker_similarity(clf, mp, req.output_wav, req.source_wav);
  m.prefers_reference = m.sim_reference > m.sim_source;
  m.mel_distance = mel_distance(mp.mel(src), art.mel);
  m.contour_output = contour_name(classify_contour(out_f0));
  return m;
}

struct EvalReport {
  std::vector<PairMetrics> pairs;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["checkpoint_dir"] = checkpoint_dir;
    j["metrics_note"] =
        "token- and classifier-based proxies, not perceptual scores";
    auto agg = [&](auto get) {
      double mean = 0.0, var = 0.0;
      for (const PairMetrics& p : pairs) mean += get(p);
      if (!pairs.empty()) mean /= double(pairs.size());
      for (const PairMetrics& p : pairs)
        var += (get(p) - mean) * (get(p) - mean);
      if (pairs.size() > 1) var /= double(pairs.size() - 1);
      return nlohmann::ordered_json{{"mean", mean}, {"std", std::sqrt(var)}};
    };
    j["aggregate"]["f0_corr"] =
        agg([](const PairMetrics& p) { return p.f0_corr; });
    j["aggregate"]["content_accuracy"] =
        agg([](const PairMetrics& p) { return p.content_acc; });
    j["aggregate"]["speaker_similarity"] =
        agg([](const PairMetrics& p) { return p.sim_reference; });
    j["aggregate"]["mel_distance"] =
        agg([](const PairMetrics& p) { return p.mel_distance; });
    double pref = 0.0;
    for (const PairMetrics& p : pairs) pref += p.prefers_reference ? 1.0 : 0.0;
    j["aggregate"]["reference_preference"] =
        pairs.empty() ? 0.0 : pref / double(pairs.size());
    j["pairs"] = nlohmann::ordered_json::array();
    for (const PairMetrics& p : pairs) {
      nlohmann::ordered_json e;
      e["source"] = p.source;
      e["reference"] = p.reference;
      e["output"] = p.output;
      e["mode"] = p.mode;
      e["f0_corr"] = p.f0_corr;
      e["f0_defined"] = p.f0_defined;
      e["content_accuracy"] = p.content_acc;
      e["speaker_similarity"] = {{"reference", p.sim_reference},
                                 {"source", p.sim_source},
                                 {"prefers_reference", p.prefers_reference}};
      e["mel_distance"] = p.mel_distance;
      e["contour_output"] = p.contour_output;
      j["pairs"].push_back(e);
    }
    return j;
  }
};

}  // namespace dvc
