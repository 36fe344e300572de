#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dvc/audio.hpp"
#include "dvc/checkpoint.hpp"
#include "dvc/corpus.hpp"
#include "dvc/dsp.hpp"
#include "dvc/duration.hpp"
#include "dvc/fmt.hpp"
#include "dvc/optim.hpp"
#include "dvc/pmt.hpp"
#include "dvc/prosody_codec.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"
#include "dvc/tokenizer.hpp"

namespace dvc {

// checkpoint directory layout
inline constexpr const char* kTokenizerFile = "tokenizer.ckpt";
inline constexpr const char* kStage1File = "stage1.ckpt";
inline constexpr const char* kStage1OptFile = "stage1.opt";
inline constexpr const char* kStage2File = "stage2.ckpt";
inline constexpr const char* kStage2OptFile = "stage2.opt";
inline constexpr const char* kSpeakerClfFile = "speaker_clf.ckpt";
inline constexpr const char* kMetaFile = "meta.json";

struct TokenizerTrainConfig {
  int k = 64;
  int iters = 40;
  int max_frames = 120000;  // deterministic subsample cap for the fit

  void validate() const {
    check(k >= 2 && iters >= 1 && max_frames >= k,
          "tokenizer config: degenerate sizes");
  }
};

struct Stage1Config {
  std::int64_t steps = 20000;
  int batch_frames = 2000;
  float w_dur = 1.0f, w_simvq = 1.0f, w_fmt = 1.0f, w_f0 = 1.0f;
  std::int64_t checkpoint_every = 2000;
  std::int64_t log_every = 1;
  AdamWConfig optimizer;

  void validate() const {
    check(steps > 0, "stage1: steps must be positive");
    check(batch_frames > 0, "stage1: batch frames must be positive");
  }
};

struct Stage2Config {
  std::int64_t steps = 8000;
  int batch_tokens = 400;
  std::int64_t checkpoint_every = 2000;
  std::int64_t log_every = 1;
  AdamWConfig optimizer;

  void validate() const {
    check(steps > 0, "stage2: steps must be positive");
    check(batch_tokens > 0, "stage2: batch tokens must be positive");
  }
};

struct ConvertConfig {
  int griffin_lim_iters = 48;
  int prompt_cap_frames = 400;  // longest reference prefix used as context

  void validate() const {
    check(griffin_lim_iters >= 1 && prompt_cap_frames >= 1,
          "convert config: degenerate sizes");
  }
};

struct PipelineConfig {
  MelConfig mel;
  TokenizerTrainConfig tokenizer;
  ProsodyCodecConfig codec;
  DurationPredictorConfig duration;
  FMTConfig fmt;
  PMTConfig pmt;
  Stage1Config stage1;
  Stage2Config stage2;
  ConvertConfig convert;

  void validate() const {
    mel.validate();
    tokenizer.validate();
    fmt.validate();
    pmt.validate();
    stage1.validate();
    stage2.validate();
    convert.validate();
    check(duration.embed_dim == fmt.token_embed,
          "pipeline: duration predictor reads the flow model's token embeddings");
    check(tokenizer.k == fmt.content_vocab && tokenizer.k == pmt.content_vocab,
          "pipeline: content vocabulary mismatch");
    check(codec.codebook_size == fmt.prosody_vocab &&
              codec.codebook_size == pmt.prosody_vocab,
          "pipeline: prosody vocabulary mismatch");
  }
};

// --------------------------------------------------------------------------
// mel standardization

inline Tensor standardize_mel(const Tensor& mel, const Tensor& mean,
                              const Tensor& stdv) {
  NoGrad ng;
  check(mean.cols() == mel.cols() && stdv.cols() == mel.cols(),
        "mel stats: bin count mismatch");
  Tensor out = Tensor::zeros({mel.rows(), mel.cols()});
  for (int r = 0; r < mel.rows(); ++r)
    for (int c = 0; c < mel.cols(); ++c)
      out.at(r, c) = (mel.at(r, c) - mean.at(0, c)) / stdv.at(0, c);
  return out;
}

inline Tensor destandardize_mel(const Tensor& mel, const Tensor& mean,
                                const Tensor& stdv) {
  NoGrad ng;
  check(mean.cols() == mel.cols() && stdv.cols() == mel.cols(),
        "mel stats: bin count mismatch");
  Tensor out = Tensor::zeros({mel.rows(), mel.cols()});
  for (int r = 0; r < mel.rows(); ++r)
    for (int c = 0; c < mel.cols(); ++c)
      out.at(r, c) = mel.at(r, c) * stdv.at(0, c) + mean.at(0, c);
  return out;
}

// --------------------------------------------------------------------------
// model bundle

// Owns every trainable module plus the grids they share. Stage-1 parameters
// (codec, duration predictor, flow model, mel stats) live in one store, the
// masked prosody predictor in a second one so stage 2 cannot touch stage 1.
class VoicePipeline {
public:
  VoicePipeline(const PipelineConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), mel_proc_(cfg.mel) {
    cfg.validate();
    RngStream root = RngStream::from_seed(seed, "models");
    codec_.emplace(stage1_ps_, cfg.codec, root.child("codec"));
    duration_.emplace(stage1_ps_, cfg.duration, root.child("duration"));
    fmt_.emplace(stage1_ps_, cfg.fmt, root.child("fmt"));
    mel_mean_ = stage1_ps_.add("mel_stats.mean",
                               Tensor::zeros({1, cfg.mel.n_mels}),
                               /*trainable=*/false);
    Tensor ones = Tensor::zeros({1, cfg.mel.n_mels});
    for (float& v : ones.data()) v = 1.0f;
    mel_std_ = stage1_ps_.add("mel_stats.std", ones, /*trainable=*/false);
    pmt_.emplace(pmt_ps_, cfg.pmt, root.child("pmt"));
  }

  const PipelineConfig& config() const { return cfg_; }
  const MelProcessor& mel() const { return mel_proc_; }
  ParamStore& stage1_params() { return stage1_ps_; }
  const ParamStore& stage1_params() const { return stage1_ps_; }
  ParamStore& pmt_params() { return pmt_ps_; }
  const ParamStore& pmt_params() const { return pmt_ps_; }
  const ProsodyCodec& codec() const { return *codec_; }
  const DurationPredictor& duration_predictor() const { return *duration_; }
  const FlowTransformer& fmt() const { return *fmt_; }
  const ProsodyMaskTransformer& pmt() const { return *pmt_; }

  // duration predictor and flow model read the same token embedding table
  Tensor content_embedding() const { return stage1_ps_.get("fmt.content_emb"); }

  void set_mel_stats(const Tensor& mean, const Tensor& stdv) {
    check(mean.cols() == cfg_.mel.n_mels && stdv.cols() == cfg_.mel.n_mels,
          "mel stats: bin count mismatch");
    mel_mean_.data() = mean.data();
    mel_std_.data() = stdv.data();
  }
  Tensor mel_mean() const { return mel_mean_; }
  Tensor mel_stdev() const { return mel_std_; }
  Tensor standardize(const Tensor& mel_raw) const {
    return standardize_mel(mel_raw, mel_mean_, mel_std_);
  }
  Tensor destandardize(const Tensor& mel_std) const {
    return destandardize_mel(mel_std, mel_mean_, mel_std_);
  }

private:
  PipelineConfig cfg_;
  MelProcessor mel_proc_;
  ParamStore stage1_ps_, pmt_ps_;
  std::optional<ProsodyCodec> codec_;
  std::optional<DurationPredictor> duration_;
  std::optional<FlowTransformer> fmt_;
  std::optional<ProsodyMaskTransformer> pmt_;
  Tensor mel_mean_, mel_std_;
};

// --------------------------------------------------------------------------
// corpus preparation

struct PreparedUtterance {
  std::string speaker;
  Tensor mel_raw;     // [T x n_mels] log-mel
  Tensor mel_std;     // standardized, filled by finalize_training_set
  Tensor prosody_in;  // [T x n_mels+2], from the standardized mel
  std::vector<int> frame_ids;  // content token per frame
  TokenSequence tokens;
  F0Contour f0;
  std::vector<float> f0_norm;  // speaker-normalized target, 0 unvoiced
  std::vector<float> voiced;

  int frames() const { return mel_raw.rows(); }
};

// analysis passes that need no trained weights beyond the content codebook
inline std::vector<PreparedUtterance> prepare_training_set(
    const Corpus& corpus, const std::filesystem::path& root,
    const ContentCodebook& cb, const MelProcessor& mp) {
  std::map<std::string, SpeakerF0Stats> stats =
      compute_speaker_stats(corpus, root, /*train_only=*/true);
  std::vector<PreparedUtterance> out;
  for (const UtteranceRecord& rec : corpus.utterances) {
    if (corpus.speaker(rec.speaker).held_out) continue;
    auto it = stats.find(rec.speaker);
    if (it == stats.end()) continue;  // no voiced material for this speaker
    PreparedUtterance u;
    u.speaker = rec.speaker;
    std::vector<float> wave = read_wav(root / rec.wav_path,
                                       corpus.cfg.mel.sample_rate);
    u.mel_raw = mp.mel(wave);
    u.frame_ids = tokenize(frame_features(u.mel_raw), cb);
    u.tokens = dedup(u.frame_ids);
    u.f0 = estimate_f0(wave, corpus.cfg.mel);
    check(int(u.f0.size()) == u.mel_raw.rows(), "prepare: grid mismatch");
    u.f0_norm = normalize_f0(u.f0, it->second);
    u.voiced = u.f0.voiced;
    out.push_back(std::move(u));
  }
  check(!out.empty(), "prepare: no usable training utterances");
  return out;
}

// per-bin moments over all training frames
inline void compute_mel_stats(const std::vector<PreparedUtterance>& data,
                              Tensor& mean, Tensor& stdv) {
  check(!data.empty(), "mel stats: empty training set");
  const int bins = data.front().mel_raw.cols();
  std::vector<double> sum(std::size_t(bins), 0.0), sq(std::size_t(bins), 0.0);
  std::int64_t n = 0;
  for (const PreparedUtterance& u : data) {
    for (int r = 0; r < u.mel_raw.rows(); ++r)
      for (int c = 0; c < bins; ++c) {
        double v = double(u.mel_raw.at(r, c));
        sum[std::size_t(c)] += v;
        sq[std::size_t(c)] += v * v;
      }
    n += u.mel_raw.rows();
  }
  mean = Tensor::zeros({1, bins});
  stdv = Tensor::zeros({1, bins});
  for (int c = 0; c < bins; ++c) {
    double m = sum[std::size_t(c)] / double(n);
    double var = std::max(sq[std::size_t(c)] / double(n) - m * m, 0.0);
    mean.at(0, c) = float(m);
    stdv.at(0, c) = std::max(float(std::sqrt(var)), 1e-3f);
  }
}

inline void finalize_training_set(std::vector<PreparedUtterance>& data,
                                  const VoicePipeline& vp) {
  for (PreparedUtterance& u : data) {
    u.mel_std = vp.standardize(u.mel_raw);
    u.prosody_in = build_prosody_input(u.mel_std, u.f0);
  }
}

// --------------------------------------------------------------------------
// tokenizer fitting

inline ContentCodebook fit_tokenizer(const Corpus& corpus,
                                     const std::filesystem::path& root,
                                     const TokenizerTrainConfig& cfg,
                                     std::uint64_t seed) {
  cfg.validate();
  MelProcessor mp(corpus.cfg.mel);
  std::vector<Tensor> feats;
  std::int64_t total = 0;
  for (const UtteranceRecord& rec : corpus.utterances) {
    if (corpus.speaker(rec.speaker).held_out) continue;
    std::vector<float> wave = read_wav(root / rec.wav_path,
                                       corpus.cfg.mel.sample_rate);
    feats.push_back(frame_features(mp.mel(wave)));
    total += feats.back().rows();
  }
  check(total >= cfg.k, "fit tokenizer: not enough frames");

  Tensor pool = concat_rows(feats);
  RngStream rng = RngStream::from_seed(seed, "tokenizer");
  if (total > cfg.max_frames) {
    // deterministic subsample: stride the pool, jitter inside each stride
    std::vector<int> keep;
    keep.reserve(std::size_t(cfg.max_frames));
    RngStream pick = rng.child("sample");
    double stride = double(total) / double(cfg.max_frames);
    for (int i = 0; i < cfg.max_frames; ++i) {
      auto lo = std::int64_t(stride * i);
      auto hi = std::int64_t(stride * (i + 1));
      hi = std::max(hi, lo + 1);
      keep.push_back(int(lo + std::int64_t(pick.below(std::uint64_t(hi - lo)))));
    }
    pool = gather_rows(pool, keep);
  }
  return kmeans_fit(pool, cfg.k, cfg.iters, rng.child("kmeans"));
}

inline void save_tokenizer(const std::filesystem::path& dir,
                           const ContentCodebook& cb) {
  ParamStore ps;
  codebook_to_params(cb, ps);
  save_params(dir / kTokenizerFile, ps);
}

inline ContentCodebook load_tokenizer(const std::filesystem::path& dir,
                                      int k, int dim) {
  ParamStore ps;
  Tensor c = Tensor::zeros({k, dim});
  ps.add("content_km.centroids", c);
  load_params(dir / kTokenizerFile, ps);
  return codebook_from_params(ps);
}

// --------------------------------------------------------------------------
// run metadata

inline nlohmann::ordered_json load_meta(const std::filesystem::path& dir) {
  std::ifstream is(dir / kMetaFile);
  if (!is) return nlohmann::ordered_json::object();
  nlohmann::ordered_json j;
  is >> j;
  return j;
}

inline void save_meta(const std::filesystem::path& dir,
                      const nlohmann::ordered_json& j) {
  std::ofstream os(dir / kMetaFile);
  check(bool(os), "cannot write " + (dir / kMetaFile).string());
  os << j.dump(2) << "\n";
}

// --------------------------------------------------------------------------
// training

struct TrainResult {
  std::int64_t steps_completed = 0;
  double last_total = 0.0;
  std::map<std::string, double> last_components;
};

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void log_line(std::ostream* log, const nlohmann::ordered_json& j) {
  if (log) *log << j.dump() << "\n" << std::flush;
}

inline double now_ms() {
  return double(std::chrono::duration_cast<std::chrono::microseconds>(
                    std::chrono::steady_clock::now().time_since_epoch())
                    .count()) /
         1000.0;
}

}  // namespace detail

// Joint stage-1 objective: duration regression, codec quantization, flow
// matching and pitch prediction, unit-weighted, averaged over the batch.
inline TrainResult train_stage1(VoicePipeline& vp,
                                const std::vector<PreparedUtterance>& data,
                                const std::filesystem::path& out_dir,
                                std::uint64_t seed, bool resume = false,
                                std::ostream* log = nullptr) {
  const Stage1Config& tcfg = vp.config().stage1;
  tcfg.validate();
  check(!data.empty(), "stage1: empty training set");
  std::filesystem::create_directories(out_dir);

  ParamStore& ps = vp.stage1_params();
  AdamW opt(ps, tcfg.optimizer);
  std::int64_t start = 0;
  if (resume && std::filesystem::exists(out_dir / kStage1File)) {
    load_params(out_dir / kStage1File, ps);
    start = load_optimizer(out_dir / kStage1OptFile, opt, ps);
  } else {
    Tensor mean, stdv;
    compute_mel_stats(data, mean, stdv);
    vp.set_mel_stats(mean, stdv);
  }
  // standardized views depend on the stats that are now in place
  std::vector<PreparedUtterance> prepared = data;
  finalize_training_set(prepared, vp);

  auto save_all = [&](std::int64_t completed) {
    save_params(out_dir / kStage1File, ps);
    save_optimizer(out_dir / kStage1OptFile, opt, ps, completed);
    nlohmann::ordered_json meta = load_meta(out_dir);
    meta["seed"] = seed;
    meta["stage1_steps"] = completed;
    save_meta(out_dir, meta);
  };

  RngStream root = RngStream::from_seed(seed, "stage1");
  TrainResult result;
  result.steps_completed = start;
  for (std::int64_t step = start; step < tcfg.steps; ++step) {
    double t0 = detail::now_ms();
    RngStream sched = root.child("sched").child(std::uint64_t(step));
    std::vector<std::size_t> batch;
    int frames = 0;
    while (frames < tcfg.batch_frames) {
      std::size_t i = std::size_t(sched.below(std::uint64_t(data.size())));
      batch.push_back(i);
      frames += prepared[i].frames();
    }

    ps.zero_grad();
    double c_dur = 0.0, c_simvq = 0.0, c_fmt = 0.0, c_f0 = 0.0;
    const float inv_b = 1.0f / float(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const PreparedUtterance& u = prepared[batch[b]];
      RngStream urng = root.child("draws").child(std::uint64_t(step))
                           .child(std::uint64_t(b));

      Tensor tok_emb = gather_rows(vp.content_embedding(), u.tokens.ids);
      Tensor l_dur = duration_loss(
          vp.duration_predictor().predict_log_durations(tok_emb, true,
                                                        urng.child("dur")),
          u.tokens.durations);

      QuantizeResult q = vp.codec().encode(u.prosody_in, u.tokens.durations);
      Tensor z_frames = length_regulate(q.z_q, u.tokens.durations);
      Tensor l_f0 = vp.codec().f0_prediction_loss(z_frames, u.f0_norm, u.voiced);

      std::vector<int> pros_frames =
          length_regulate_ids(q.ids, u.tokens.durations);
      Tensor l_fmt = fmt_training_loss(vp.fmt(), u.mel_std, u.frame_ids,
                                       pros_frames, urng.child("fmt"));

      c_dur += double(l_dur.item()) * inv_b;
      c_simvq += double(q.loss.item()) * inv_b;
      c_fmt += double(l_fmt.item()) * inv_b;
      c_f0 += double(l_f0.item()) * inv_b;

      Tensor total = add(add(mul_scalar(l_dur, tcfg.w_dur),
                             mul_scalar(q.loss, tcfg.w_simvq)),
                         add(mul_scalar(l_fmt, tcfg.w_fmt),
                             mul_scalar(l_f0, tcfg.w_f0)));
      backward(mul_scalar(total, inv_b));
    }

    double total = c_dur + c_simvq + c_fmt + c_f0;
    if (!std::isfinite(total)) {
      std::fprintf(stderr,
                   "stage1 aborted at step %lld: non-finite loss "
                   "(dur %.6g simvq %.6g fmt %.6g f0 %.6g); batch:",
                   (long long)step, c_dur, c_simvq, c_fmt, c_f0);
      for (std::size_t i : batch) std::fprintf(stderr, " %zu", i);
      std::fprintf(stderr, "\n");
      throw PipelineError("stage1: non-finite loss at step " +
                          std::to_string(step));
    }
    float lr = opt.step(step);

    if (tcfg.log_every > 0 && (step % tcfg.log_every == 0 ||
                               step + 1 == tcfg.steps)) {
      nlohmann::ordered_json j;
      j["step"] = step;
      j["dur"] = c_dur;
      j["simvq"] = c_simvq;
      j["fmt"] = c_fmt;
      j["f0"] = c_f0;
      j["total"] = total;
      j["lr"] = lr;
      j["wall_ms"] = detail::now_ms() - t0;
      detail::log_line(log, j);
    }
    if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 &&
        step + 1 < tcfg.steps)
      save_all(step + 1);

    result.steps_completed = step + 1;
    result.last_total = total;
    result.last_components = {
        {"dur", c_dur}, {"simvq", c_simvq}, {"fmt", c_fmt}, {"f0", c_f0}};
  }
  save_all(result.steps_completed);
  return result;
}

// Stage 2: the frozen codec labels every training utterance once, then the
// masked prosody predictor trains on those labels alone.
inline TrainResult train_stage2(VoicePipeline& vp,
                                const std::vector<PreparedUtterance>& data,
                                const std::filesystem::path& out_dir,
                                std::uint64_t seed, bool resume = false,
                                std::ostream* log = nullptr) {
  const Stage2Config& tcfg = vp.config().stage2;
  tcfg.validate();
  check(!data.empty(), "stage2: empty training set");
  std::filesystem::create_directories(out_dir);

  std::vector<PreparedUtterance> prepared = data;
  finalize_training_set(prepared, vp);

  struct TokenizedUtterance {
    std::vector<int> prosody_ids, content_ids;
  };
  std::vector<TokenizedUtterance> seqs;
  seqs.reserve(prepared.size());
  {
    NoGrad ng;
    for (const PreparedUtterance& u : prepared) {
      TokenizedUtterance t;
      t.prosody_ids = vp.codec().encode(u.prosody_in, u.tokens.durations).ids;
      t.content_ids = u.tokens.ids;
      seqs.push_back(std::move(t));
    }
  }

  ParamStore& ps = vp.pmt_params();
  AdamW opt(ps, tcfg.optimizer);
  std::int64_t start = 0;
  if (resume && std::filesystem::exists(out_dir / kStage2File)) {
    load_params(out_dir / kStage2File, ps);
    start = load_optimizer(out_dir / kStage2OptFile, opt, ps);
  }

  auto save_all = [&](std::int64_t completed) {
    save_params(out_dir / kStage2File, ps);
    save_optimizer(out_dir / kStage2OptFile, opt, ps, completed);
    nlohmann::ordered_json meta = load_meta(out_dir);
    meta["seed"] = seed;
    meta["stage2_steps"] = completed;
    save_meta(out_dir, meta);
  };

  RngStream root = RngStream::from_seed(seed, "stage2");
  TrainResult result;
  result.steps_completed = start;
  for (std::int64_t step = start; step < tcfg.steps; ++step) {
    double t0 = detail::now_ms();
    RngStream sched = root.child("sched").child(std::uint64_t(step));
    std::vector<std::size_t> batch;
    int tokens = 0;
    while (tokens < tcfg.batch_tokens) {
      std::size_t i = std::size_t(sched.below(std::uint64_t(seqs.size())));
      batch.push_back(i);
      tokens += int(seqs[i].prosody_ids.size());
    }

    ps.zero_grad();
    double ce = 0.0;
    const float inv_b = 1.0f / float(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const TokenizedUtterance& t = seqs[batch[b]];
      Tensor loss = pmt_training_loss(
          vp.pmt(), t.prosody_ids, t.content_ids,
          root.child("draws").child(std::uint64_t(step))
              .child(std::uint64_t(b)));
      ce += double(loss.item()) * inv_b;
      backward(mul_scalar(loss, inv_b));
    }
    if (!std::isfinite(ce)) {
      std::fprintf(stderr, "stage2 aborted at step %lld: non-finite loss\n",
                   (long long)step);
      throw PipelineError("stage2: non-finite loss at step " +
                          std::to_string(step));
    }
    float lr = opt.step(step);

    if (tcfg.log_every > 0 && (step % tcfg.log_every == 0 ||
                               step + 1 == tcfg.steps)) {
      nlohmann::ordered_json j;
      j["step"] = step;
      j["pmt"] = ce;
      j["lr"] = lr;
      j["wall_ms"] = detail::now_ms() - t0;
      detail::log_line(log, j);
    }
    if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 &&
        step + 1 < tcfg.steps)
      save_all(step + 1);

    result.steps_completed = step + 1;
    result.last_total = ce;
    result.last_components = {{"pmt", ce}};
  }
  save_all(result.steps_completed);
  return result;
}

// --------------------------------------------------------------------------
// conversion

enum class ConvertMode { zero_shot_vc, prosody_preserved, prosody_converted };
enum class AblationDrop { none, content, prosody };

inline std::string mode_name(ConvertMode m) {
  switch (m) {
    case ConvertMode::zero_shot_vc: return "zero_shot_vc";
    case ConvertMode::prosody_preserved: return "prosody_preserved";
    default: return "prosody_converted";
  }
}

inline ConvertMode mode_from_name(const std::string& s) {
  if (s == "zero_shot_vc") return ConvertMode::zero_shot_vc;
  if (s == "prosody_preserved") return ConvertMode::prosody_preserved;
  check(s == "prosody_converted", "unknown conversion mode: " + s);
  return ConvertMode::prosody_converted;
}

inline std::string drop_name(AblationDrop d) {
  switch (d) {
    case AblationDrop::none: return "none";
    case AblationDrop::content: return "content";
    default: return "prosody";
  }
}

inline AblationDrop drop_from_name(const std::string& s) {
  if (s == "none") return AblationDrop::none;
  if (s == "content") return AblationDrop::content;
  check(s == "prosody", "unknown ablation condition: " + s);
  return AblationDrop::prosody;
}

struct ConversionRequest {
  ConvertMode mode = ConvertMode::prosody_preserved;
  std::string source_wav;
  std::string reference_wav;
  std::string output_wav;  // empty: keep the result in memory only
  std::uint64_t seed = 1;
  AblationDrop drop = AblationDrop::none;
};

struct AnalyzedUtterance {
  std::vector<float> wav;
  Tensor mel_raw, mel_std, prosody_in;
  std::vector<int> frame_ids;
  TokenSequence tokens;
  F0Contour f0;

  int frames() const { return mel_raw.rows(); }
};

inline AnalyzedUtterance analyze_wav(const VoicePipeline& vp,
                                     const ContentCodebook& cb,
                                     const std::filesystem::path& path) {
  AnalyzedUtterance a;
  a.wav = read_wav(path, vp.config().mel.sample_rate);
  a.mel_raw = vp.mel().mel(a.wav);
  a.mel_std = vp.standardize(a.mel_raw);
  a.frame_ids = tokenize(frame_features(a.mel_raw), cb);
  a.tokens = dedup(a.frame_ids);
  a.f0 = estimate_f0(a.wav, vp.config().mel);
  a.prosody_in = build_prosody_input(a.mel_std, a.f0);
  return a;
}

struct ConversionArtifacts {
  std::vector<int> content_tokens;
  std::vector<int> durations;
  std::vector<int> prosody_tokens;
  int prompt_frames = 0;
  int generated_frames = 0;
  Tensor mel;  // generated region, log-mel domain
  std::vector<float> wav;
  nlohmann::ordered_json sidecar;
};

// Full conversion: source content and prosody analysis, duration
// re-prediction, optional masked-prosody rewrite, flow infilling behind a
// reference prompt, and phase recovery back to a waveform.
inline ConversionArtifacts convert(const VoicePipeline& vp,
                                   const ContentCodebook& cb,
                                   const ConversionRequest& req) {
  NoGrad ng;
  const PipelineConfig& cfg = vp.config();
  check(std::filesystem::exists(req.source_wav),
        "convert: missing source wav " + req.source_wav);
  check(std::filesystem::exists(req.reference_wav),
        "convert: missing reference wav " + req.reference_wav);

  AnalyzedUtterance src = analyze_wav(vp, cb, req.source_wav);
  AnalyzedUtterance ref = analyze_wav(vp, cb, req.reference_wav);

  QuantizeResult src_q = vp.codec().encode(src.prosody_in, src.tokens.durations);
  QuantizeResult ref_q = vp.codec().encode(ref.prosody_in, ref.tokens.durations);

  ConversionArtifacts art;
  art.content_tokens = src.tokens.ids;

  if (req.mode == ConvertMode::prosody_converted) {
    std::vector<int> content_full = ref.tokens.ids;
    content_full.insert(content_full.end(), src.tokens.ids.begin(),
                        src.tokens.ids.end());
    art.prosody_tokens =
        iterative_decode(vp.pmt(), content_full, ref_q.ids,
                         int(src.tokens.ids.size()), decode_params(cfg.pmt),
                         RngStream::from_seed(req.seed, "pmt"))
            .ids;
  } else {
    art.prosody_tokens = src_q.ids;
  }

  Tensor tok_emb = gather_rows(vp.content_embedding(), src.tokens.ids);
  art.durations = vp.duration_predictor().predict_durations(tok_emb);

  std::vector<int> gen_content =
      length_regulate_ids(src.tokens.ids, art.durations);
  std::vector<int> gen_prosody =
      length_regulate_ids(art.prosody_tokens, art.durations);
  const int gen_frames = int(gen_content.size());

  const int cap = std::min(ref.frames(), cfg.convert.prompt_cap_frames);
  std::vector<int> ref_pros_frames =
      length_regulate_ids(ref_q.ids, ref.tokens.durations);

  ConditioningBundle bundle;
  bundle.content_ids.assign(ref.frame_ids.begin(), ref.frame_ids.begin() + cap);
  bundle.content_ids.insert(bundle.content_ids.end(), gen_content.begin(),
                            gen_content.end());
  bundle.prosody_ids.assign(ref_pros_frames.begin(),
                            ref_pros_frames.begin() + cap);
  bundle.prosody_ids.insert(bundle.prosody_ids.end(), gen_prosody.begin(),
                            gen_prosody.end());
  bundle.context = concat_rows({slice_rows(ref.mel_std, 0, cap),
                                Tensor::zeros({gen_frames, cfg.mel.n_mels})});
  bundle.mask.assign(std::size_t(cap), 0.0f);
  bundle.mask.resize(std::size_t(cap + gen_frames), 1.0f);

  Tensor sampled = fmt_sample(vp.fmt(), bundle, cfg.fmt.steps,
                              cfg.fmt.guidance,
                              RngStream::from_seed(req.seed, "fmt"),
                              req.drop == AblationDrop::content,
                              req.drop == AblationDrop::prosody);

  art.prompt_frames = cap;
  art.generated_frames = gen_frames;
  art.mel = vp.destandardize(slice_rows(sampled, cap, gen_frames));
  art.wav = vp.mel().griffin_lim(
      art.mel, cfg.convert.griffin_lim_iters,
      RngStream::from_seed(req.seed, "griffin_lim").next_u64());

  if (!req.output_wav.empty())
    write_wav(req.output_wav, art.wav, cfg.mel.sample_rate);

  F0Contour out_f0 = estimate_f0(art.wav, cfg.mel);
  double f0_sum = 0.0;
  int f0_n = 0;
  for (std::size_t i = 0; i < out_f0.size(); ++i)
    if (out_f0.voiced[i] != 0.0f) {
      f0_sum += double(out_f0.hz[i]);
      ++f0_n;
    }

  nlohmann::ordered_json& j = art.sidecar;
  j["mode"] = mode_name(req.mode);
  j["seed"] = req.seed;
  j["source"] = req.source_wav;
  j["reference"] = req.reference_wav;
  j["drop"] = drop_name(req.drop);
  j["content_tokens"] = art.content_tokens;
  j["durations"] = art.durations;
  j["prosody_tokens"] = art.prosody_tokens;
  j["prompt_frames"] = art.prompt_frames;
  j["generated_frames"] = art.generated_frames;
  j["output_f0"] = {
      {"mean_hz", f0_n > 0 ? f0_sum / f0_n : 0.0},
      {"voiced_fraction",
       out_f0.size() > 0 ? double(f0_n) / double(out_f0.size()) : 0.0}};
  return art;
}

}  // namespace dvc
