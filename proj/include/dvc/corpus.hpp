#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "dvc/audio.hpp"
#include "dvc/dsp.hpp"
#include "dvc/rng.hpp"

namespace dvc {

enum class ContourTag { flat = 0, rise = 1, fall = 2 };

inline const char* contour_name(ContourTag t) {
  switch (t) {
    case ContourTag::flat: return "flat";
    case ContourTag::rise: return "rise";
    case ContourTag::fall: return "fall";
  }
  return "flat";
}

inline ContourTag contour_from_name(const std::string& s) {
  if (s == "rise") return ContourTag::rise;
  if (s == "fall") return ContourTag::fall;
  check(s == "flat", "manifest: unknown contour tag " + s);
  return ContourTag::flat;
}

// Timbre factor: pitch register, spectral tilt and formant shifts.
struct SpeakerSpec {
  std::string id;
  float base_f0 = 150.0f;
  float f0_range = 30.0f;
  float tilt_db_oct = -6.0f;
  std::array<float, 3> formant_scale{1.0f, 1.0f, 1.0f};
  bool held_out = false;
};

// Content factor: a pseudo-phone with a fixed formant pattern.
struct UnitSpec {
  int id = 0;
  std::array<float, 3> formants{500.0f, 1500.0f, 2500.0f};
  bool voiced = true;
};

// Prosody factor for one utterance.
struct ProsodyPlan {
  ContourTag tag = ContourTag::flat;
  std::vector<float> unit_jitter;  // multiplicative, one per unit in sequence
};

struct UtteranceRecord {
  std::string wav_path;  // relative to the manifest directory
  std::string speaker;
  std::vector<int> units;
  std::vector<int> durations;        // frames per unit
  std::vector<float> f0_hz;          // ground truth per frame, 0 unvoiced
  std::vector<float> unit_f0_target; // mean F0 per unit, 0 for noise units
  ContourTag tag = ContourTag::flat;

  int total_frames() const {
    int n = 0;
    for (int d : durations) n += d;
    return n;
  }
};

struct CorpusConfig {
  int n_speakers = 12;
  int utts_per_speaker = 80;
  int held_out_speakers = 2;
  int n_units = 12;
  float min_seconds = 1.0f;
  float max_seconds = 4.0f;
  MelConfig mel;

  void validate() const {
    mel.validate();
    check(n_speakers >= 1 && utts_per_speaker >= 1, "corpus: sizes >= 1");
    check(held_out_speakers >= 0 && held_out_speakers < n_speakers,
          "corpus: held-out speakers must leave at least one training speaker");
    check(n_units >= 2, "corpus: at least two units");
    check(min_seconds > 0.0f && min_seconds <= max_seconds,
          "corpus: bad length range");
  }
};

struct Corpus {
  CorpusConfig cfg;
  std::uint64_t seed = 0;
  std::vector<UnitSpec> units;
  std::vector<SpeakerSpec> speakers;
  std::vector<UtteranceRecord> utterances;

  const SpeakerSpec& speaker(const std::string& id) const {
    for (const SpeakerSpec& s : speakers)
      if (s.id == id) return s;
    throw std::runtime_error("corpus: unknown speaker " + id);
  }
};

// --------------------------------------------------------------------------
// synthesis

namespace synth {

constexpr float kMaxFormantHz = 7600.0f;
constexpr int kCrossfade = 80;  // samples, 5 ms at 16 kHz
constexpr int kFirTaps = 128;

inline float formant_envelope(float f, const UnitSpec& unit,
                              const SpeakerSpec& spk) {
  static constexpr float bw[3] = {90.0f, 130.0f, 180.0f};
  static constexpr float peak[3] = {1.0f, 0.7f, 0.5f};
  float e = 0.02f;
  for (int j = 0; j < 3; ++j) {
    float fc = unit.formants[std::size_t(j)] * spk.formant_scale[std::size_t(j)];
    float d = (f - fc) / bw[j];
    e += peak[j] * std::exp(-0.5f * d * d);
  }
  float octaves = std::log2(std::max(f, 60.0f) / 300.0f);
  return e * std::pow(10.0f, spk.tilt_db_oct * octaves / 20.0f);
}

// linear-phase FIR matched to the unit's envelope, for noise units
inline std::vector<float> design_noise_fir(const UnitSpec& unit,
                                           const SpeakerSpec& spk,
                                           int sample_rate) {
  const int m = kFirTaps, half = m / 2;
  std::vector<float> h(std::size_t(m), 0.0f);
  for (int n = 0; n < m; ++n) {
    double center = double(n) - double(m - 1) / 2.0;
    double acc = double(formant_envelope(0.0f, unit, spk));
    for (int k = 1; k <= half; ++k) {
      float fk = float(k) * float(sample_rate) / float(m);
      double sym = k == half ? 1.0 : 2.0;
      acc += sym * double(formant_envelope(fk, unit, spk)) *
             std::cos(2.0 * std::numbers::pi * k * center / m);
    }
    double win = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / (m - 1)));
    h[std::size_t(n)] = float(acc / m * win);
  }
  return h;
}

// per-frame harmonic amplitudes, normalized to unit sum
inline std::vector<float> harmonic_table(float f0, const UnitSpec& unit,
                                         const SpeakerSpec& spk) {
  std::vector<float> a;
  if (f0 <= 0.0f || !unit.voiced) return a;
  int count = std::min(64, int(kMaxFormantHz / f0));
  a.reserve(std::size_t(count));
  float sum = 0.0f;
  for (int h = 1; h <= count; ++h) {
    float v = formant_envelope(float(h) * f0, unit, spk) / float(h);
    a.push_back(v);
    sum += v;
  }
  if (sum > 0.0f)
    for (float& v : a) v /= sum;
  return a;
}

}  // namespace synth

// Renders one utterance. Voiced units are a phase-continuous harmonic stack
// shaped by unit formants, speaker offsets and tilt; noise units are FIR
// filtered white noise; unit boundaries blend over 5 ms at shared phase.
inline std::pair<std::vector<float>, UtteranceRecord> synthesize_utterance(
    const std::vector<UnitSpec>& inventory, const std::vector<int>& units,
    const std::vector<int>& durations, const ProsodyPlan& plan,
    const SpeakerSpec& spk, const MelConfig& mel, RngStream noise_rng) {
  check(!units.empty(), "synthesize: empty unit sequence");
  check(units.size() == durations.size(),
        "synthesize: one duration per unit required");
  check(plan.unit_jitter.size() == units.size(),
        "synthesize: one jitter per unit required");
  for (int d : durations) check(d >= 2, "synthesize: durations must be >= 2");
  for (int u : units)
    check(u >= 0 && u < int(inventory.size()), "synthesize: unknown unit id");

  const int hop = mel.hop, sr = mel.sample_rate;
  int total = 0;
  for (int d : durations) total += d;
  const int len = total * hop;

  // frame-level structure
  std::vector<int> seg_of_frame(std::size_t(total), 0);
  {
    int t = 0;
    for (std::size_t s = 0; s < units.size(); ++s)
      for (int k = 0; k < durations[s]; ++k) seg_of_frame[std::size_t(t++)] = int(s);
  }
  auto contour_mult = [&](int t) {
    float x = total > 1 ? float(t) / float(total - 1) : 0.0f;
    switch (plan.tag) {
      case ContourTag::rise: return 0.85f + 0.30f * x;
      case ContourTag::fall: return 1.15f - 0.30f * x;
      default: return 1.0f;
    }
  };
  std::vector<float> f0(std::size_t(total), 0.0f);
  for (int t = 0; t < total; ++t) {
    int s = seg_of_frame[std::size_t(t)];
    if (inventory[std::size_t(units[std::size_t(s)])].voiced)
      f0[std::size_t(t)] =
          spk.base_f0 * contour_mult(t) * plan.unit_jitter[std::size_t(s)];
  }

  // per-frame harmonic tables: own unit, plus the neighbor unit's table on
  // frames adjacent to a boundary (evaluated at this frame's pitch)
  std::vector<std::vector<float>> amp, amp_prev, amp_next;
  amp.resize(std::size_t(total));
  amp_prev.resize(std::size_t(total));
  amp_next.resize(std::size_t(total));
  for (int t = 0; t < total; ++t) {
    int s = seg_of_frame[std::size_t(t)];
    const UnitSpec& u = inventory[std::size_t(units[std::size_t(s)])];
    float pitch = f0[std::size_t(t)] > 0.0f
                      ? f0[std::size_t(t)]
                      : spk.base_f0 * contour_mult(t) *
                            plan.unit_jitter[std::size_t(s)];
    amp[std::size_t(t)] = synth::harmonic_table(f0[std::size_t(t)], u, spk);
    if (t > 0 && seg_of_frame[std::size_t(t - 1)] != s)
      amp_prev[std::size_t(t)] = synth::harmonic_table(
          pitch, inventory[std::size_t(units[std::size_t(s - 1)])], spk);
    if (t + 1 < total && seg_of_frame[std::size_t(t + 1)] != s)
      amp_next[std::size_t(t)] = synth::harmonic_table(
          pitch, inventory[std::size_t(units[std::size_t(s + 1)])], spk);
  }

  std::vector<float> x(std::size_t(len), 0.0f);

  // harmonic component with shared phase across unit boundaries
  {
    double phase = 0.0;
    float last_pitch = spk.base_f0;
    for (int n = 0; n < len; ++n) {
      int t = n / hop;
      int s = seg_of_frame[std::size_t(t)];
      float pitch = f0[std::size_t(t)] > 0.0f ? f0[std::size_t(t)] : last_pitch;
      last_pitch = pitch;
      phase += 2.0 * std::numbers::pi * double(pitch) / double(sr);
      if (phase > 2.0 * std::numbers::pi * 1e6) phase -= 2.0 * std::numbers::pi * 1e6;

      auto render = [&](const std::vector<float>& a) {
        float v = 0.0f;
        for (std::size_t h = 0; h < a.size(); ++h)
          v += a[h] * float(std::sin(double(h + 1) * phase));
        return v;
      };

      int seg_start_frame = 0;
      for (int k = 0; k < s; ++k) seg_start_frame += durations[std::size_t(k)];
      int seg_begin = seg_start_frame * hop;
      int seg_end = (seg_start_frame + durations[std::size_t(s)]) * hop;

      float v = render(amp[std::size_t(t)]);
      int into = n - seg_begin, left = seg_end - n;
      if (into < synth::kCrossfade / 2 && s > 0) {
        float w = 0.5f + float(into) / float(synth::kCrossfade);
        v = w * v + (1.0f - w) * render(amp_prev[std::size_t(t)]);
      } else if (left <= synth::kCrossfade / 2 && s + 1 < int(units.size())) {
        float w = 0.5f + float(left - 1) / float(synth::kCrossfade);
        v = w * v + (1.0f - w) * render(amp_next[std::size_t(t)]);
      }
      x[std::size_t(n)] = v;
    }
  }

  // noise component per noise unit
  {
    int frame_cursor = 0;
    for (std::size_t s = 0; s < units.size(); ++s) {
      int seg_frames = durations[s];
      const UnitSpec& u = inventory[std::size_t(units[s])];
      if (!u.voiced) {
        int begin = frame_cursor * hop - synth::kCrossfade / 2;
        int end = (frame_cursor + seg_frames) * hop + synth::kCrossfade / 2;
        begin = std::max(begin, 0);
        end = std::min(end, len);
        int seg_len = end - begin;
        std::vector<float> white(std::size_t(seg_len) + synth::kFirTaps, 0.0f);
        for (float& w : white) w = noise_rng.normal();
        std::vector<float> fir = synth::design_noise_fir(u, spk, sr);
        double sum_sq = 0.0;
        std::vector<float> filtered(std::size_t(seg_len), 0.0f);
        for (int i = 0; i < seg_len; ++i) {
          double acc = 0.0;
          for (int k = 0; k < synth::kFirTaps; ++k)
            acc += double(fir[std::size_t(k)]) * white[std::size_t(i + k)];
          filtered[std::size_t(i)] = float(acc);
          sum_sq += acc * acc;
        }
        float rms = float(std::sqrt(sum_sq / std::max(1, seg_len)));
        float gain = rms > 1e-9f ? 0.25f / rms : 0.0f;
        for (int i = 0; i < seg_len; ++i) {
          float w = 1.0f;
          if (i < synth::kCrossfade) w = float(i) / float(synth::kCrossfade);
          int from_end = seg_len - 1 - i;
          if (from_end < synth::kCrossfade)
            w = std::min(w, float(from_end) / float(synth::kCrossfade));
          x[std::size_t(begin + i)] += gain * w * filtered[std::size_t(i)];
        }
      }
      frame_cursor += seg_frames;
    }
  }

  // edge fades and peak normalization
  for (int i = 0; i < synth::kCrossfade / 2 && i < len; ++i) {
    float w = float(i) / float(synth::kCrossfade / 2);
    x[std::size_t(i)] *= w;
    x[std::size_t(len - 1 - i)] *= w;
  }
  float peak = 0.0f;
  for (float v : x) peak = std::max(peak, std::fabs(v));
  if (peak > 1e-9f) {
    float g = 0.5f / peak;
    for (float& v : x) v *= g;
  }

  UtteranceRecord rec;
  rec.speaker = spk.id;
  rec.units = units;
  rec.durations = durations;
  rec.f0_hz = f0;
  rec.tag = plan.tag;
  rec.unit_f0_target.assign(units.size(), 0.0f);
  {
    int t = 0;
    for (std::size_t s = 0; s < units.size(); ++s) {
      float acc = 0.0f;
      int voiced_frames = 0;
      for (int k = 0; k < durations[s]; ++k, ++t)
        if (f0[std::size_t(t)] > 0.0f) {
          acc += f0[std::size_t(t)];
          ++voiced_frames;
        }
      if (voiced_frames > 0) rec.unit_f0_target[s] = acc / float(voiced_frames);
    }
  }
  return {std::move(x), std::move(rec)};
}

// --------------------------------------------------------------------------
// corpus sampling

namespace detail {

inline std::vector<UnitSpec> sample_units(const CorpusConfig& cfg,
                                          RngStream rng) {
  const int n_noise = std::max(1, cfg.n_units / 6);
  std::vector<UnitSpec> units;
  for (int i = 0; i < cfg.n_units; ++i) {
    UnitSpec u;
    u.id = i;
    u.voiced = i < cfg.n_units - n_noise;
    for (int attempt = 0; attempt < 100; ++attempt) {
      u.formants[0] = rng.uniform(300.0f, 900.0f);
      u.formants[1] = u.formants[0] + rng.uniform(400.0f, 1600.0f);
      u.formants[2] = u.formants[1] + rng.uniform(500.0f, 1200.0f);
      if (u.formants[2] >= synth::kMaxFormantHz) continue;
      bool distinct = true;
      for (const UnitSpec& prev : units) {
        if (prev.voiced != u.voiced) continue;
        float d = std::fabs(prev.formants[0] - u.formants[0]) +
                  std::fabs(prev.formants[1] - u.formants[1]);
        if (d < 300.0f) {
          distinct = false;
          break;
        }
      }
      if (distinct) break;
    }
    units.push_back(u);
  }
  return units;
}

inline SpeakerSpec sample_speaker(int index, bool held_out, RngStream rng) {
  SpeakerSpec s;
  char buf[16];
  std::snprintf(buf, sizeof buf, "spk%02d", index);
  s.id = buf;
  s.base_f0 = rng.uniform(110.0f, 260.0f);
  s.f0_range = 0.2f * s.base_f0;
  s.tilt_db_oct = rng.uniform(-9.0f, -3.0f);
  for (int j = 0; j < 3; ++j)
    s.formant_scale[std::size_t(j)] = rng.uniform(0.88f, 1.12f);
  s.held_out = held_out;
  return s;
}

}  // namespace detail

// Samples content, prosody and speaker factors independently, then renders.
// Held-out speakers are the trailing ones; deterministic for a fixed seed.
inline Corpus generate_corpus(const CorpusConfig& cfg, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "wav");

  Corpus corpus;
  corpus.cfg = cfg;
  corpus.seed = seed;
  RngStream root = RngStream::from_seed(seed, "corpus");
  corpus.units = detail::sample_units(cfg, root.child("units"));
  RngStream spk_rng = root.child("speakers");
  for (int i = 0; i < cfg.n_speakers; ++i)
    corpus.speakers.push_back(detail::sample_speaker(
        i, i >= cfg.n_speakers - cfg.held_out_speakers, spk_rng.child(std::uint64_t(i))));

  const float fps = float(cfg.mel.sample_rate) / float(cfg.mel.hop);
  for (int i = 0; i < cfg.n_speakers; ++i) {
    for (int j = 0; j < cfg.utts_per_speaker; ++j) {
      RngStream utt_rng =
          root.child("utt").child(std::uint64_t(i)).child(std::uint64_t(j));
      int target =
          int(std::lround(utt_rng.uniform(cfg.min_seconds, cfg.max_seconds) * fps));
      target = std::max(target, 6);

      std::vector<int> units, durs;
      int total = 0, prev = -1;
      while (total < target) {
        int u = int(utt_rng.below(std::uint64_t(cfg.n_units)));
        if (u == prev) u = (u + 1) % cfg.n_units;
        int d = 4 + int(utt_rng.below(13));
        if (total + d > target) d = target - total;
        if (d < 2) {
          durs.back() += d;
          total += d;
          break;
        }
        units.push_back(u);
        durs.push_back(d);
        total += d;
        prev = u;
      }

      ProsodyPlan plan;
      plan.tag = ContourTag(utt_rng.below(3));
      plan.unit_jitter.resize(units.size());
      for (float& jit : plan.unit_jitter) jit = utt_rng.uniform(0.98f, 1.02f);

      auto [wave, rec] =
          synthesize_utterance(corpus.units, units, durs, plan,
                               corpus.speakers[std::size_t(i)], cfg.mel,
                               utt_rng.child("noise"));
      char name[48];
      std::snprintf(name, sizeof name, "wav/spk%02d_utt%03d.wav", i, j);
      rec.wav_path = name;
      write_wav(out_dir / name, wave, cfg.mel.sample_rate);
      corpus.utterances.push_back(std::move(rec));
    }
  }
  return corpus;
}

// --------------------------------------------------------------------------
// manifest io

inline nlohmann::ordered_json manifest_json(const Corpus& corpus) {
  nlohmann::ordered_json j;
  j["seed"] = corpus.seed;
  j["config"] = {{"n_speakers", corpus.cfg.n_speakers},
                 {"utts_per_speaker", corpus.cfg.utts_per_speaker},
                 {"held_out_speakers", corpus.cfg.held_out_speakers},
                 {"n_units", corpus.cfg.n_units},
                 {"min_seconds", corpus.cfg.min_seconds},
                 {"max_seconds", corpus.cfg.max_seconds},
                 {"sample_rate", corpus.cfg.mel.sample_rate},
                 {"hop", corpus.cfg.mel.hop}};
  j["units"] = nlohmann::ordered_json::array();
  for (const UnitSpec& u : corpus.units)
    j["units"].push_back({{"id", u.id},
                          {"formants", u.formants},
                          {"voiced", u.voiced}});
  j["speakers"] = nlohmann::ordered_json::array();
  for (const SpeakerSpec& s : corpus.speakers)
    j["speakers"].push_back({{"id", s.id},
                             {"base_f0", s.base_f0},
                             {"f0_range", s.f0_range},
                             {"tilt_db_oct", s.tilt_db_oct},
                             {"formant_scale", s.formant_scale},
                             {"held_out", s.held_out}});
  j["utterances"] = nlohmann::ordered_json::array();
  for (const UtteranceRecord& r : corpus.utterances)
    j["utterances"].push_back({{"wav", r.wav_path},
                               {"speaker", r.speaker},
                               {"units", r.units},
                               {"durations", r.durations},
                               {"f0_hz", r.f0_hz},
                               {"unit_f0_target", r.unit_f0_target},
                               {"contour", contour_name(r.tag)}});
  return j;
}

inline void save_manifest(const std::filesystem::path& path,
                          const Corpus& corpus) {
  std::ofstream os(path);
  check(bool(os), "manifest: cannot open for writing: " + path.string());
  os << manifest_json(corpus).dump() << "\n";
  check(bool(os), "manifest: write failed: " + path.string());
}

inline Corpus load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  check(bool(is), "manifest: cannot open: " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: parse error in " + path.string() +
                             ": " + e.what());
  }
  Corpus corpus;
  corpus.seed = j.at("seed").get<std::uint64_t>();
  const auto& c = j.at("config");
  corpus.cfg.n_speakers = c.at("n_speakers").get<int>();
  corpus.cfg.utts_per_speaker = c.at("utts_per_speaker").get<int>();
  corpus.cfg.held_out_speakers = c.at("held_out_speakers").get<int>();
  corpus.cfg.n_units = c.at("n_units").get<int>();
  corpus.cfg.min_seconds = c.at("min_seconds").get<float>();
  corpus.cfg.max_seconds = c.at("max_seconds").get<float>();
  corpus.cfg.mel.sample_rate = c.at("sample_rate").get<int>();
  corpus.cfg.mel.hop = c.at("hop").get<int>();
  for (const auto& u : j.at("units")) {
    UnitSpec spec;
    spec.id = u.at("id").get<int>();
    auto f = u.at("formants");
    for (int k = 0; k < 3; ++k) spec.formants[std::size_t(k)] = f.at(k).get<float>();
    spec.voiced = u.at("voiced").get<bool>();
    corpus.units.push_back(spec);
  }
  for (const auto& s : j.at("speakers")) {
    SpeakerSpec spec;
    spec.id = s.at("id").get<std::string>();
    spec.base_f0 = s.at("base_f0").get<float>();
    spec.f0_range = s.at("f0_range").get<float>();
    spec.tilt_db_oct = s.at("tilt_db_oct").get<float>();
    auto fsc = s.at("formant_scale");
    for (int k = 0; k < 3; ++k)
      spec.formant_scale[std::size_t(k)] = fsc.at(k).get<float>();
    spec.held_out = s.at("held_out").get<bool>();
    corpus.speakers.push_back(spec);
  }
  for (const auto& r : j.at("utterances")) {
    UtteranceRecord rec;
    rec.wav_path = r.at("wav").get<std::string>();
    rec.speaker = r.at("speaker").get<std::string>();
    rec.units = r.at("units").get<std::vector<int>>();
    rec.durations = r.at("durations").get<std::vector<int>>();
    rec.f0_hz = r.at("f0_hz").get<std::vector<float>>();
    rec.unit_f0_target = r.at("unit_f0_target").get<std::vector<float>>();
    rec.tag = contour_from_name(r.at("contour").get<std::string>());
    corpus.utterances.push_back(std::move(rec));
  }
  return corpus;
}

// Per-speaker pitch statistics over estimated contours of training
// utterances. Speakers with no voiced frames are skipped with a warning.
inline std::map<std::string, SpeakerF0Stats> compute_speaker_stats(
    const Corpus& corpus, const std::filesystem::path& root,
    bool train_only = true) {
  std::map<std::string, std::vector<F0Contour>> per_speaker;
  for (const UtteranceRecord& r : corpus.utterances) {
    if (train_only && corpus.speaker(r.speaker).held_out) continue;
    auto wave = read_wav(root / r.wav_path, corpus.cfg.mel.sample_rate);
    per_speaker[r.speaker].push_back(estimate_f0(wave, corpus.cfg.mel));
  }
  std::map<std::string, SpeakerF0Stats> stats;
  for (auto& [id, contours] : per_speaker) {
    bool any_voiced = false;
    for (const F0Contour& c : contours)
      for (float v : c.voiced) any_voiced = any_voiced || v != 0.0f;
    if (!any_voiced) {
      std::fprintf(stderr, "warning: speaker %s has no voiced frames, skipped\n",
                   id.c_str());
      continue;
    }
    stats[id] = speaker_f0_stats(contours);
  }
  return stats;
}

}  // namespace dvc
