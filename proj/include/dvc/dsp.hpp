#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

struct MelConfig {
  int sample_rate = 16000;
  int n_fft = 1280;  // also the analysis window length
  int hop = 320;
  int n_mels = 80;
  float fmin = 0.0f;
  float fmax = 8000.0f;
  float log_floor = 1e-5f;

  int bins() const { return n_fft / 2 + 1; }
  void validate() const {
    check(sample_rate > 0 && n_fft > 0 && hop > 0, "mel: positive sizes");
    check(n_fft % hop == 0, "mel: hop must divide window");
    check(n_mels >= 1, "mel: n_mels >= 1");
    check(fmax <= float(sample_rate) / 2.0f, "mel: fmax above Nyquist");
    check(fmin >= 0.0f && fmin < fmax, "mel: bad band edges");
  }
};

// Frame grid shared by mel, F0 and all frame-level conditioning.
inline int frame_count(std::size_t samples, const MelConfig& cfg) {
  check(samples >= 1, "framing: empty signal");
  return int((samples + std::size_t(cfg.hop) - 1) / std::size_t(cfg.hop));
}

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  int period = 2 * (n - 1);
  int k = i % period;
  if (k < 0) k += period;
  return k < n ? k : period - k;
}

struct F0Contour {
  std::vector<float> hz;      // 0 on unvoiced frames
  std::vector<float> voiced;  // 1.0 voiced, 0.0 unvoiced
  std::size_t size() const { return hz.size(); }
};

struct SpeakerF0Stats {
  float mean = 0.0f;
  float std_dev = 1.0f;  // clamped at 1e-3
};

inline float hz_to_mel(float hz) {
  return 2595.0f * std::log10(1.0f + hz / 700.0f);
}
inline float mel_to_hz(float mel) {
  return 700.0f * (std::pow(10.0f, mel / 2595.0f) - 1.0f);
}

// Triangular filterbank on the HTK mel scale, peak weight 1.
inline Tensor mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const int bins = cfg.bins();
  std::vector<float> pts(std::size_t(cfg.n_mels) + 2);
  float mel_lo = hz_to_mel(cfg.fmin), mel_hi = hz_to_mel(cfg.fmax);
  for (int m = 0; m < cfg.n_mels + 2; ++m)
    pts[std::size_t(m)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * float(m) / float(cfg.n_mels + 1));
  Tensor fb = Tensor::zeros({cfg.n_mels, bins});
  for (int m = 0; m < cfg.n_mels; ++m) {
    float left = pts[std::size_t(m)], center = pts[std::size_t(m) + 1],
          right = pts[std::size_t(m) + 2];
    for (int k = 0; k < bins; ++k) {
      float f = float(k) * float(cfg.sample_rate) / float(cfg.n_fft);
      float w = 0.0f;
      if (f > left && f < center)
        w = (f - left) / (center - left);
      else if (f == center)
        w = 1.0f;
      else if (f > center && f < right)
        w = (right - f) / (right - center);
      fb.at(m, k) = w;
    }
  }
  return fb;
}

// STFT/mel/inversion engine for one configuration. The DFT runs as a matrix
// product against precomputed bases; n_fft here is not a power of two.
class MelProcessor {
public:
  explicit MelProcessor(const MelConfig& cfg = MelConfig{}) : cfg_(cfg) {
    cfg_.validate();
    const int n = cfg_.n_fft, bins = cfg_.bins();
    window_.resize(std::size_t(n));
    for (int i = 0; i < n; ++i)
      window_[std::size_t(i)] = float(
          0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * i / double(n))));

    cos_basis_ = Tensor::zeros({n, bins});
    sin_basis_ = Tensor::zeros({n, bins});
    icos_ = Tensor::zeros({bins, n});
    isin_ = Tensor::zeros({bins, n});
    for (int k = 0; k < bins; ++k) {
      double sym = (k == 0 || k == n / 2) ? 1.0 : 2.0;
      for (int i = 0; i < n; ++i) {
        double ang = 2.0 * std::numbers::pi * double(k) * double(i) / double(n);
        cos_basis_.at(i, k) = float(std::cos(ang));
        sin_basis_.at(i, k) = float(-std::sin(ang));
        icos_.at(k, i) = float(sym * std::cos(ang) / double(n));
        isin_.at(k, i) = float(-sym * std::sin(ang) / double(n));
      }
    }

    mel_fb_ = mel_filterbank(cfg_);
    // ridge-regularized transpose solve: P = Mᵀ (M Mᵀ + εI)⁻¹
    {
      using DMat = Eigen::MatrixXd;
      DMat m(cfg_.n_mels, bins);
      for (int i = 0; i < cfg_.n_mels; ++i)
        for (int k = 0; k < bins; ++k) m(i, k) = double(mel_fb_.at(i, k));
      DMat gram = m * m.transpose();
      gram.diagonal().array() += 1e-6;
      DMat p = gram.ldlt().solve(m).transpose();  // [bins x n_mels]
      mel_pinv_ = Tensor::zeros({bins, cfg_.n_mels});
      for (int k = 0; k < bins; ++k)
        for (int i = 0; i < cfg_.n_mels; ++i)
          mel_pinv_.at(k, i) = float(p(k, i));
    }
  }

  const MelConfig& config() const { return cfg_; }

  std::vector<float> pad(const std::vector<float>& x) const {
    const int p = cfg_.n_fft / 2, len = int(x.size());
    std::vector<float> out(x.size() + std::size_t(2 * p));
    for (int i = 0; i < int(out.size()); ++i)
      out[std::size_t(i)] = x[std::size_t(reflect_index(i - p, len))];
    return out;
  }

  // [T x n_fft] windowed frames, frame t centered at sample t*hop
  Tensor frames(const std::vector<float>& x) const {
    const int t_count = frame_count(x.size(), cfg_);
    std::vector<float> padded = pad(x);
    Tensor f = Tensor::zeros({t_count, cfg_.n_fft});
    for (int t = 0; t < t_count; ++t) {
      const float* src = padded.data() + std::size_t(t) * cfg_.hop;
      float* dst = f.data().data() + std::size_t(t) * cfg_.n_fft;
      for (int i = 0; i < cfg_.n_fft; ++i) dst[i] = src[i] * window_[std::size_t(i)];
    }
    return f;
  }

  void stft(const std::vector<float>& x, Tensor& re, Tensor& im) const {
    NoGrad ng;
    Tensor f = frames(x);
    re = matmul(f, cos_basis_);
    im = matmul(f, sin_basis_);
  }

  // natural-log mel magnitudes, floored
  Tensor mel(const std::vector<float>& x) const {
    NoGrad ng;
    Tensor re, im;
    stft(x, re, im);
    const int t = re.rows(), bins = re.cols();
    Tensor mag = Tensor::zeros({t, bins});
    for (std::size_t i = 0; i < mag.data().size(); ++i)
      mag.data()[i] = std::sqrt(re.data()[i] * re.data()[i] +
                                im.data()[i] * im.data()[i]);
    Tensor e = matmul(mag, transpose(mel_fb_));
    for (float& v : e.data()) v = std::log(std::max(v, cfg_.log_floor));
    return e;
  }

  // overlap-add inverse; output length = frames * hop
  std::vector<float> istft(const Tensor& re, const Tensor& im) const {
    NoGrad ng;
    const int t_count = re.rows(), n = cfg_.n_fft, p = n / 2;
    Tensor tf = add(matmul(re, icos_), matmul(im, isin_));  // [T x n]
    const int padded_len = (t_count - 1) * cfg_.hop + n;
    std::vector<double> acc(std::size_t(padded_len), 0.0);
    std::vector<double> norm(std::size_t(padded_len), 0.0);
    for (int t = 0; t < t_count; ++t) {
      const float* g = tf.data().data() + std::size_t(t) * n;
      const int off = t * cfg_.hop;
      for (int i = 0; i < n; ++i) {
        double w = double(window_[std::size_t(i)]);
        acc[std::size_t(off + i)] += w * double(g[i]);
        norm[std::size_t(off + i)] += w * w;
      }
    }
    std::vector<float> out(std::size_t(t_count) * cfg_.hop, 0.0f);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::size_t j = i + std::size_t(p);
      if (j < acc.size() && norm[j] > 1e-8)
        out[i] = float(acc[j] / norm[j]);
    }
    return out;
  }

  // Phase recovery from a log-mel matrix. Residuals, when requested, hold the
  // spectral-convergence value per iteration.
  std::vector<float> griffin_lim(const Tensor& logmel, int iters,
                                 std::uint64_t seed,
                                 std::vector<float>* residuals = nullptr) const {
    NoGrad ng;
    check(logmel.rank() == 2 && logmel.cols() == cfg_.n_mels,
          "griffin_lim: [T x n_mels] input required");
    const int t = logmel.rows(), bins = cfg_.bins();
    Tensor energy = Tensor::zeros({t, cfg_.n_mels});
    for (std::size_t i = 0; i < energy.data().size(); ++i)
      energy.data()[i] = std::exp(logmel.data()[i]);
    Tensor mag = matmul(energy, transpose(mel_pinv_));
    for (float& v : mag.data()) v = std::max(v, 0.0f);

    RngStream rng(seed);
    Tensor re = Tensor::zeros({t, bins}), im = Tensor::zeros({t, bins});
    for (std::size_t i = 0; i < mag.data().size(); ++i) {
      float ang = rng.uniform(-float(std::numbers::pi), float(std::numbers::pi));
      re.data()[i] = mag.data()[i] * std::cos(ang);
      im.data()[i] = mag.data()[i] * std::sin(ang);
    }
    double mag_norm = 0.0;
    for (float v : mag.data()) mag_norm += double(v) * double(v);
    mag_norm = std::sqrt(std::max(mag_norm, 1e-30));

    for (int it = 0; it < iters; ++it) {
      std::vector<float> x = istft(re, im);
      Tensor re2, im2;
      stft(x, re2, im2);
      if (residuals) {
        double err = 0.0;
        for (std::size_t i = 0; i < mag.data().size(); ++i) {
          double m2 = std::sqrt(double(re2.data()[i]) * re2.data()[i] +
                                double(im2.data()[i]) * im2.data()[i]);
          double d = m2 - double(mag.data()[i]);
          err += d * d;
        }
        residuals->push_back(float(std::sqrt(err) / mag_norm));
      }
      for (std::size_t i = 0; i < mag.data().size(); ++i) {
        float a = std::sqrt(re2.data()[i] * re2.data()[i] +
                            im2.data()[i] * im2.data()[i]);
        if (a > 1e-12f) {
          float s = mag.data()[i] / a;
          re.data()[i] = re2.data()[i] * s;
          im.data()[i] = im2.data()[i] * s;
        } else {
          re.data()[i] = mag.data()[i];
          im.data()[i] = 0.0f;
        }
      }
    }
    std::vector<float> x = istft(re, im);
    float peak = 0.0f;
    for (float v : x) peak = std::max(peak, std::fabs(v));
    // silence guard: an all-floor mel must stay silent instead of being
    // amplified to full scale
    if (peak > 1e-2f) {
      float s = 0.95f / peak;
      for (float& v : x) v *= s;
    }
    return x;
  }

private:
  MelConfig cfg_;
  std::vector<float> window_;
  Tensor cos_basis_, sin_basis_;  // [n_fft x bins]
  Tensor icos_, isin_;            // [bins x n_fft]
  Tensor mel_fb_;                 // [n_mels x bins]
  Tensor mel_pinv_;               // [bins x n_mels]
};

// Normalized-autocorrelation pitch tracker on the shared frame grid.
// A frame is voiced when the autocorrelation peak is strong and the frame
// carries energy; lag is refined by parabolic interpolation.
inline F0Contour estimate_f0(const std::vector<float>& x, const MelConfig& cfg,
                             float f0_min = 60.0f, float f0_max = 500.0f) {
  cfg.validate();
  check(f0_min < f0_max, "f0: f0_min must be below f0_max");
  check(f0_min > 0.0f, "f0: f0_min must be positive");
  const int t_count = frame_count(x.size(), cfg);
  const int n = cfg.n_fft, p = n / 2, len = int(x.size());
  const int lag_min = std::max(1, int(std::ceil(float(cfg.sample_rate) / f0_max)));
  const int lag_max = std::min(n - 2, int(std::floor(float(cfg.sample_rate) / f0_min)));
  check(lag_min < lag_max, "f0: lag range empty for this window");

  std::vector<float> padded(std::size_t(len + 2 * p));
  for (int i = 0; i < int(padded.size()); ++i)
    padded[std::size_t(i)] = x[std::size_t(reflect_index(i - p, len))];

  F0Contour out;
  out.hz.assign(std::size_t(t_count), 0.0f);
  out.voiced.assign(std::size_t(t_count), 0.0f);

  std::vector<double> frame(std::size_t(n), 0.0);
  std::vector<double> sq_prefix(std::size_t(n) + 1);
  for (int t = 0; t < t_count; ++t) {
    const float* src = padded.data() + std::size_t(t) * cfg.hop;
    double energy = 0.0;
    for (int i = 0; i < n; ++i) {
      frame[std::size_t(i)] = double(src[i]);
      energy += frame[std::size_t(i)] * frame[std::size_t(i)];
    }
    double rms = std::sqrt(energy / double(n));
    if (rms < 1e-3) continue;

    sq_prefix[0] = 0.0;
    for (int i = 0; i < n; ++i)
      sq_prefix[std::size_t(i) + 1] =
          sq_prefix[std::size_t(i)] + frame[std::size_t(i)] * frame[std::size_t(i)];

    auto corr = [&](int lag) {
      double num = 0.0;
      const int m = n - lag;
      for (int i = 0; i < m; ++i)
        num += frame[std::size_t(i)] * frame[std::size_t(i + lag)];
      double d1 = sq_prefix[std::size_t(m)];
      double d2 = sq_prefix[std::size_t(n)] - sq_prefix[std::size_t(lag)];
      double den = std::sqrt(d1 * d2);
      return den > 1e-12 ? num / den : 0.0;
    };

    std::vector<double> r_at(std::size_t(lag_max - lag_min) + 1, 0.0);
    double best_r = -2.0;
    for (int lag = lag_min; lag <= lag_max; ++lag) {
      double r = corr(lag);
      r_at[std::size_t(lag - lag_min)] = r;
      best_r = std::max(best_r, r);
    }
    if (best_r < 0.5) continue;
    // Smallest lag among near-ties, so periodic signals whose period
    // multiples correlate equally well resolve to the fundamental. The
    // tolerance absorbs grid quantization when the true period is not an
    // integer number of samples; a local hill-climb then lands on the
    // discrete peak before interpolation.
    int best_lag = lag_min;
    for (int lag = lag_min; lag <= lag_max; ++lag)
      if (r_at[std::size_t(lag - lag_min)] >= best_r - 0.01) {
        best_lag = lag;
        break;
      }
    while (best_lag + 1 <= lag_max &&
           r_at[std::size_t(best_lag + 1 - lag_min)] >
               r_at[std::size_t(best_lag - lag_min)])
      ++best_lag;
    while (best_lag - 1 >= lag_min &&
           r_at[std::size_t(best_lag - 1 - lag_min)] >
               r_at[std::size_t(best_lag - lag_min)])
      --best_lag;
    best_r = r_at[std::size_t(best_lag - lag_min)];

    double refined = double(best_lag);
    double rl = corr(best_lag - 1), rr = corr(best_lag + 1);
    double denom = rl - 2.0 * best_r + rr;
    if (std::fabs(denom) > 1e-12) {
      double delta = 0.5 * (rl - rr) / denom;
      refined += std::clamp(delta, -0.5, 0.5);
    }
    out.hz[std::size_t(t)] = float(double(cfg.sample_rate) / refined);
    out.voiced[std::size_t(t)] = 1.0f;
  }
  return out;
}

inline SpeakerF0Stats speaker_f0_stats(const std::vector<F0Contour>& contours) {
  double sum = 0.0, sum_sq = 0.0;
  std::int64_t n = 0;
  for (const F0Contour& c : contours)
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c.voiced[i] != 0.0f) {
        sum += double(c.hz[i]);
        sum_sq += double(c.hz[i]) * double(c.hz[i]);
        ++n;
      }
  SpeakerF0Stats s;
  if (n > 0) {
    s.mean = float(sum / double(n));
    double var = sum_sq / double(n) - double(s.mean) * double(s.mean);
    s.std_dev = float(std::sqrt(std::max(var, 0.0)));
  }
  s.std_dev = std::max(s.std_dev, 1e-3f);
  return s;
}

// voiced frames to z-scores, unvoiced to exactly 0
inline std::vector<float> normalize_f0(const F0Contour& c,
                                       const SpeakerF0Stats& s) {
  std::vector<float> z(c.size(), 0.0f);
  float inv = 1.0f / std::max(s.std_dev, 1e-3f);
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c.voiced[i] != 0.0f) z[i] = (c.hz[i] - s.mean) * inv;
  return z;
}

inline std::vector<float> denormalize_f0(const std::vector<float>& z,
                                         const std::vector<float>& voiced,
                                         const SpeakerF0Stats& s) {
  check(z.size() == voiced.size(), "denormalize_f0: length mismatch");
  std::vector<float> hz(z.size(), 0.0f);
  for (std::size_t i = 0; i < z.size(); ++i)
    if (voiced[i] != 0.0f) hz[i] = z[i] * std::max(s.std_dev, 1e-3f) + s.mean;
  return hz;
}

inline void write_mel_csv(const std::filesystem::path& path,
                          const Tensor& mel) {
  check(mel.rank() == 2, "mel csv: matrix required");
  std::ofstream os(path);
  check(bool(os), "mel csv: cannot open " + path.string());
  char buf[32];
  for (int t = 0; t < mel.rows(); ++t) {
    for (int m = 0; m < mel.cols(); ++m) {
      std::snprintf(buf, sizeof buf, "%.6f", double(mel.at(t, m)));
      os << (m ? "," : "") << buf;
    }
    os << "\n";
  }
  check(bool(os), "mel csv: write failed: " + path.string());
}

// 8-bit grayscale, time on x, low mel bins at the bottom
inline void write_mel_pgm(const std::filesystem::path& path, const Tensor& mel,
                          float floor_log = std::log(1e-5f)) {
  check(mel.rank() == 2, "mel pgm: matrix required");
  const int t = mel.rows(), m = mel.cols();
  float hi = floor_log;
  for (float v : mel.data()) hi = std::max(hi, v);
  float scale = hi > floor_log ? 255.0f / (hi - floor_log) : 0.0f;
  std::ofstream os(path, std::ios::binary);
  check(bool(os), "mel pgm: cannot open " + path.string());
  os << "P5\n" << t << " " << m << "\n255\n";
  for (int row = 0; row < m; ++row) {
    int bin = m - 1 - row;
    for (int col = 0; col < t; ++col) {
      float v = (mel.at(col, bin) - floor_log) * scale;
      unsigned char px =
          (unsigned char)(std::clamp(v, 0.0f, 255.0f));
      os.write(reinterpret_cast<const char*>(&px), 1);
    }
  }
  check(bool(os), "mel pgm: write failed: " + path.string());
}

}  // namespace dvc
