#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"

namespace dvc {

constexpr int kMfccCount = 13;  // cepstral coefficients c1..c13

struct ContentCodebook {
  int k = 0;
  int dim = 0;
  std::vector<float> centroids;  // k * dim, row major
  std::string recipe = "mfcc13";

  const float* row(int i) const { return centroids.data() + std::size_t(i) * std::size_t(dim); }
  void validate() const {
    check(k >= 2, "codebook: need at least two centroids");
    check(int(centroids.size()) == k * dim, "codebook: centroid size mismatch");
    for (float v : centroids)
      check(std::isfinite(v), "codebook: centroids must be finite");
  }
};

struct TokenSequence {
  std::vector<int> ids;        // no two adjacent equal
  std::vector<int> durations;  // frames per token, >= 1

  int total_frames() const {
    int n = 0;
    for (int d : durations) n += d;
    return n;
  }
};

// Cepstral content features: DCT-II of each log-mel frame, coefficients 1..13
// (c0 carries energy, higher ones mostly pitch texture), z-scored per
// utterance so register and loudness wash out.
inline Tensor frame_features(const Tensor& mel) {
  NoGrad ng;
  const int t = mel.rows(), m = mel.cols();
  check(t >= 1 && m >= kMfccCount + 1, "frame_features: bad mel shape");
  Tensor out = Tensor::zeros({t, kMfccCount});
  for (int r = 0; r < t; ++r)
    for (int kcoef = 1; kcoef <= kMfccCount; ++kcoef) {
      double acc = 0.0;
      for (int n = 0; n < m; ++n)
        acc += double(mel.at(r, n)) *
               std::cos(std::numbers::pi * kcoef * (n + 0.5) / m);
      out.at(r, kcoef - 1) = float(acc);
    }
  for (int c = 0; c < kMfccCount; ++c) {
    double mean = 0.0;
    for (int r = 0; r < t; ++r) mean += double(out.at(r, c));
    mean /= t;
    double var = 0.0;
    for (int r = 0; r < t; ++r) {
      double d = double(out.at(r, c)) - mean;
      var += d * d;
    }
    float sd = float(std::sqrt(var / t));
    float inv = sd > 1e-6f ? 1.0f / sd : 0.0f;
    for (int r = 0; r < t; ++r)
      out.at(r, c) = (out.at(r, c) - float(mean)) * inv;
  }
  return out;
}

namespace detail {

inline double sq_dist(const float* a, const float* b, int dim) {
  double d = 0.0;
  for (int i = 0; i < dim; ++i) {
    double v = double(a[i]) - double(b[i]);
    d += v * v;
  }
  return d;
}

}  // namespace detail

inline double kmeans_inertia(const Tensor& features,
                             const ContentCodebook& cb) {
  const int n = features.rows(), dim = features.cols();
  check(dim == cb.dim, "kmeans: feature dim mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* x = features.data().data() + std::size_t(i) * std::size_t(dim);
    double best = std::numeric_limits<double>::max();
    for (int c = 0; c < cb.k; ++c)
      best = std::min(best, detail::sq_dist(x, cb.row(c), dim));
    total += best;
  }
  return total;
}

// k-means++ seeding followed by Lloyd iterations; empty clusters are
// re-seeded to the point farthest from its current centroid.
inline ContentCodebook kmeans_fit(const Tensor& features, int k, int iters,
                                  RngStream rng,
                                  std::vector<double>* inertia_log = nullptr) {
  const int n = features.rows(), dim = features.cols();
  check(k >= 2, "kmeans: k must be >= 2");
  check(n >= k, "kmeans: fewer points than clusters");
  auto point = [&](int i) {
    return features.data().data() + std::size_t(i) * std::size_t(dim);
  };

  ContentCodebook cb;
  cb.k = k;
  cb.dim = dim;
  cb.centroids.assign(std::size_t(k) * std::size_t(dim), 0.0f);

  // k-means++: squared-distance weighted seeding
  std::vector<double> d2(std::size_t(n), 0.0);
  int first = int(rng.below(std::uint64_t(n)));
  std::copy(point(first), point(first) + dim, cb.centroids.begin());
  for (int i = 0; i < n; ++i) d2[std::size_t(i)] = detail::sq_dist(point(i), cb.row(0), dim);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    int pick;
    if (total <= 0.0) {
      pick = int(rng.below(std::uint64_t(n)));
    } else {
      double r = rng.uniform() * total, acc = 0.0;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        acc += d2[std::size_t(i)];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    }
    float* dst = cb.centroids.data() + std::size_t(c) * std::size_t(dim);
    std::copy(point(pick), point(pick) + dim, dst);
    for (int i = 0; i < n; ++i)
      d2[std::size_t(i)] =
          std::min(d2[std::size_t(i)], detail::sq_dist(point(i), cb.row(c), dim));
  }

  std::vector<int> assign(std::size_t(n), 0);
  for (int it = 0; it < iters; ++it) {
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      int best_c = 0;
      for (int c = 0; c < k; ++c) {
        double d = detail::sq_dist(point(i), cb.row(c), dim);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      assign[std::size_t(i)] = best_c;
      inertia += best;
    }
    if (inertia_log) inertia_log->push_back(inertia);

    std::vector<double> sums(std::size_t(k) * std::size_t(dim), 0.0);
    std::vector<int> counts(std::size_t(k), 0);
    for (int i = 0; i < n; ++i) {
      int c = assign[std::size_t(i)];
      ++counts[std::size_t(c)];
      const float* x = point(i);
      double* dst = sums.data() + std::size_t(c) * std::size_t(dim);
      for (int j = 0; j < dim; ++j) dst[j] += double(x[j]);
    }
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] == 0) continue;
      float* dst = cb.centroids.data() + std::size_t(c) * std::size_t(dim);
      const double* src = sums.data() + std::size_t(c) * std::size_t(dim);
      for (int j = 0; j < dim; ++j)
        dst[j] = float(src[j] / counts[std::size_t(c)]);
    }
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] > 0) continue;
      double far = -1.0;
      int far_i = 0;
      for (int i = 0; i < n; ++i) {
        double d = detail::sq_dist(
            point(i), cb.row(assign[std::size_t(i)]), dim);
        if (d > far) {
          far = d;
          far_i = i;
        }
      }
      float* dst = cb.centroids.data() + std::size_t(c) * std::size_t(dim);
      std::copy(point(far_i), point(far_i) + dim, dst);
      assign[std::size_t(far_i)] = c;
    }
  }
  cb.validate();
  return cb;
}

// nearest centroid per frame, ties resolved to the lowest id
inline std::vector<int> tokenize(const Tensor& features,
                                 const ContentCodebook& cb) {
  const int n = features.rows(), dim = features.cols();
  check(dim == cb.dim, "tokenize: feature dim mismatch");
  std::vector<int> ids(std::size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    const float* x = features.data().data() + std::size_t(i) * std::size_t(dim);
    double best = std::numeric_limits<double>::max();
    int best_c = 0;
    for (int c = 0; c < cb.k; ++c) {
      double d = detail::sq_dist(x, cb.row(c), dim);
      if (d < best) {
        best = d;
        best_c = c;
      }
    }
    ids[std::size_t(i)] = best_c;
  }
  return ids;
}

inline TokenSequence dedup(const std::vector<int>& raw_ids) {
  check(!raw_ids.empty(), "dedup: empty input");
  TokenSequence seq;
  for (int id : raw_ids) {
    if (!seq.ids.empty() && seq.ids.back() == id) {
      ++seq.durations.back();
    } else {
      seq.ids.push_back(id);
      seq.durations.push_back(1);
    }
  }
  return seq;
}

inline std::vector<int> expand(const TokenSequence& seq) {
  check(seq.ids.size() == seq.durations.size(), "expand: ragged sequence");
  std::vector<int> out;
  out.reserve(std::size_t(seq.total_frames()));
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    check(seq.durations[i] >= 1, "expand: durations must be >= 1");
    for (int r = 0; r < seq.durations[i]; ++r) out.push_back(seq.ids[i]);
  }
  return out;
}

inline void codebook_to_params(const ContentCodebook& cb, ParamStore& ps) {
  Tensor c = Tensor::zeros({cb.k, cb.dim});
  c.data() = cb.centroids;
  ps.add("content_km.centroids", c);
}

inline ContentCodebook codebook_from_params(const ParamStore& ps) {
  const Tensor& c = ps.get("content_km.centroids");
  ContentCodebook cb;
  cb.k = c.rows();
  cb.dim = c.cols();
  cb.centroids = c.data();
  cb.validate();
  return cb;
}

}  // namespace dvc
