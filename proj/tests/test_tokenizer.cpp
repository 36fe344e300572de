#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "dvc/corpus.hpp"
#include "dvc/dsp.hpp"
#include "dvc/tokenizer.hpp"

using namespace dvc;
namespace fs = std::filesystem;

namespace {

float cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  return float(dot / (std::sqrt(na * nb) + 1e-12));
}

std::vector<float> segment_mean_feature(const Tensor& feats, int begin,
                                        int end) {
  std::vector<float> m(std::size_t(feats.cols()), 0.0f);
  for (int t = begin; t < end; ++t)
    for (int c = 0; c < feats.cols(); ++c)
      m[std::size_t(c)] += feats.at(t, c) / float(end - begin);
  return m;
}

}  // namespace

TEST_CASE("cepstral features track unit identity, not pitch") {
  MelConfig cfg;
  MelProcessor proc(cfg);

  UnitSpec a, b, c;
  a.id = 0;
  a.formants = {350.0f, 1100.0f, 2300.0f};
  b.id = 1;
  b.formants = {650.0f, 1900.0f, 3200.0f};
  c.id = 2;
  c.formants = {500.0f, 2400.0f, 4100.0f};
  SpeakerSpec spk;
  spk.id = "t";
  spk.base_f0 = 170.0f;
  spk.f0_range = 34.0f;

  ProsodyPlan plan;
  plan.tag = ContourTag::rise;  // the repeated unit recurs at a higher pitch
  plan.unit_jitter = {1.0f, 1.0f, 1.0f, 1.0f};
  auto [wave, rec] = synthesize_utterance({a, b, c}, {0, 1, 0, 2},
                                          {14, 14, 14, 14}, plan, spk, cfg,
                                          RngStream::from_seed(2, "noise"));
  Tensor feats = frame_features(proc.mel(wave));
  REQUIRE(feats.cols() == 13);
  REQUIRE(feats.rows() == 56);

  auto a1 = segment_mean_feature(feats, 3, 11);
  auto b1 = segment_mean_feature(feats, 17, 25);
  auto a2 = segment_mean_feature(feats, 31, 39);
  auto c1 = segment_mean_feature(feats, 45, 53);
  float same = cosine(a1, a2);
  REQUIRE(same > cosine(a1, b1));
  REQUIRE(same > cosine(a1, c1));
  REQUIRE(same > cosine(a2, b1));
  REQUIRE(same > cosine(a2, c1));
}

TEST_CASE("constant mel turns into all-zero features") {
  Tensor mel = Tensor::full({20, 80}, -3.0f);
  Tensor feats = frame_features(mel);
  for (float v : feats.data()) REQUIRE(v == 0.0f);
}

TEST_CASE("two well-separated 1-d blobs split at their means") {
  Tensor pts = Tensor::from({4, 1}, {0.0f, 1.0f, 10.0f, 11.0f});
  ContentCodebook cb = kmeans_fit(pts, 2, 10, RngStream::from_seed(3, "km"));
  std::vector<float> c = cb.centroids;
  std::sort(c.begin(), c.end());
  REQUIRE(c[0] == Catch::Approx(0.5f));
  REQUIRE(c[1] == Catch::Approx(10.5f));
  REQUIRE(kmeans_inertia(pts, cb) == Catch::Approx(1.0));
}

TEST_CASE("one cluster per point drives inertia to zero") {
  Tensor pts = Tensor::from({4, 2}, {0, 0, 3, 0, 0, 3, 5, 5});
  ContentCodebook cb = kmeans_fit(pts, 4, 10, RngStream::from_seed(4, "km"));
  REQUIRE(kmeans_inertia(pts, cb) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("lloyd iterations never increase inertia") {
  RngStream rng = RngStream::from_seed(5, "pts");
  Tensor pts = Tensor::randn({200, 5}, rng, 1.0f);
  std::vector<double> log;
  kmeans_fit(pts, 8, 25, RngStream::from_seed(6, "km"), &log);
  REQUIRE(log.size() == 25);
  for (std::size_t i = 1; i < log.size(); ++i)
    REQUIRE(log[i] <= log[i - 1] + 1e-9);
}

TEST_CASE("k-means rejects fewer points than clusters") {
  Tensor pts = Tensor::from({3, 1}, {0.0f, 1.0f, 2.0f});
  REQUIRE_THROWS(kmeans_fit(pts, 4, 5, RngStream::from_seed(1, "km")));
}

TEST_CASE("tokenize picks the nearest centroid, lowest id on ties") {
  ContentCodebook cb;
  cb.k = 8;
  cb.dim = 1;
  cb.centroids = {-4, -3, -2, -1, 1, 2, 3, 7};
  Tensor at7 = Tensor::from({1, 1}, {7.0f});
  REQUIRE(tokenize(at7, cb)[0] == 7);
  Tensor mid = Tensor::from({1, 1}, {0.0f});  // tie between -1 (id 3) and 1 (id 4)
  REQUIRE(tokenize(mid, cb)[0] == 3);
  Tensor wrong_dim = Tensor::from({1, 2}, {0.0f, 0.0f});
  REQUIRE_THROWS(tokenize(wrong_dim, cb));
}

TEST_CASE("permuting centroids only relabels assignments") {
  RngStream rng = RngStream::from_seed(7, "perm");
  Tensor pts = Tensor::randn({60, 4}, rng, 1.0f);
  ContentCodebook cb = kmeans_fit(pts, 5, 20, RngStream::from_seed(8, "km"));
  std::vector<int> base = tokenize(pts, cb);

  ContentCodebook rev = cb;
  for (int c = 0; c < cb.k; ++c)
    for (int j = 0; j < cb.dim; ++j)
      rev.centroids[std::size_t((cb.k - 1 - c) * cb.dim + j)] =
          cb.centroids[std::size_t(c * cb.dim + j)];
  std::vector<int> mapped = tokenize(pts, rev);
  for (std::size_t i = 0; i < base.size(); ++i)
    REQUIRE(mapped[i] == cb.k - 1 - base[i]);
}

TEST_CASE("adjacent duplicates collapse into run lengths") {
  TokenSequence seq = dedup({5, 5, 7, 7, 7, 5});
  REQUIRE(seq.ids == std::vector<int>{5, 7, 5});
  REQUIRE(seq.durations == std::vector<int>{2, 3, 1});

  TokenSequence distinct = dedup({1, 2, 3});
  REQUIRE(distinct.ids == std::vector<int>{1, 2, 3});
  REQUIRE(distinct.durations == std::vector<int>{1, 1, 1});

  REQUIRE_THROWS(dedup({}));
}

TEST_CASE("run-length coding round-trips both ways") {
  RngStream rng = RngStream::from_seed(9, "rle");
  for (int trial = 0; trial < 200; ++trial) {
    int len = 1 + int(rng.below(50));
    std::vector<int> raw;
    for (int i = 0; i < len; ++i) raw.push_back(int(rng.below(6)));
    REQUIRE(expand(dedup(raw)) == raw);

    TokenSequence seq;
    int prev = -1;
    int n_tokens = 1 + int(rng.below(12));
    for (int i = 0; i < n_tokens; ++i) {
      int id = int(rng.below(6));
      if (id == prev) id = (id + 1) % 6;
      seq.ids.push_back(id);
      seq.durations.push_back(1 + int(rng.below(4)));
      prev = id;
    }
    TokenSequence rt = dedup(expand(seq));
    REQUIRE(rt.ids == seq.ids);
    REQUIRE(rt.durations == seq.durations);
  }
}

TEST_CASE("tokens carry unit identity and little speaker identity") {
  CorpusConfig cfg;
  cfg.n_speakers = 6;
  cfg.utts_per_speaker = 8;
  cfg.held_out_speakers = 1;
  cfg.min_seconds = 1.0f;
  cfg.max_seconds = 2.0f;
  fs::path dir = fs::temp_directory_path() / "dvc_tok_purity";
  fs::remove_all(dir);
  Corpus corpus = generate_corpus(cfg, 2024, dir);

  MelProcessor proc(cfg.mel);
  std::vector<Tensor> utt_feats;
  std::vector<std::vector<int>> utt_units;  // per-frame ground truth unit
  std::vector<int> utt_speaker;
  std::map<std::string, int> spk_index;
  for (std::size_t i = 0; i < corpus.speakers.size(); ++i)
    spk_index[corpus.speakers[i].id] = int(i);

  int total_frames = 0;
  for (const UtteranceRecord& r : corpus.utterances) {
    auto wave = read_wav(dir / r.wav_path, cfg.mel.sample_rate);
    Tensor feats = frame_features(proc.mel(wave));
    REQUIRE(feats.rows() == r.total_frames());
    std::vector<int> frame_unit;
    for (std::size_t s = 0; s < r.units.size(); ++s)
      for (int kf = 0; kf < r.durations[s]; ++kf)
        frame_unit.push_back(r.units[s]);
    total_frames += feats.rows();
    utt_feats.push_back(feats);
    utt_units.push_back(std::move(frame_unit));
    utt_speaker.push_back(spk_index[r.speaker]);
  }

  Tensor pooled = Tensor::zeros({total_frames, kMfccCount});
  {
    int row = 0;
    for (const Tensor& f : utt_feats) {
      std::copy(f.data().begin(), f.data().end(),
                pooled.data().begin() + std::size_t(row) * kMfccCount);
      row += f.rows();
    }
  }
  ContentCodebook cb =
      kmeans_fit(pooled, 64, 50, RngStream::from_seed(2024, "kmeans"));

  // best constant prediction per token: the strongest probe a one-hot
  // input admits
  std::map<int, std::map<int, int>> token_unit, token_speaker;
  std::vector<std::pair<int, int>> frame_tokens;  // (token, utt index)
  for (std::size_t u = 0; u < utt_feats.size(); ++u) {
    std::vector<int> ids = tokenize(utt_feats[u], cb);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      ++token_unit[ids[t]][utt_units[u][t]];
      ++token_speaker[ids[t]][utt_speaker[u]];
    }
  }
  auto probe_accuracy = [&](const std::map<int, std::map<int, int>>& table) {
    long correct = 0, total = 0;
    for (const auto& [tok, hist] : table) {
      int best = 0, sum = 0;
      for (const auto& [label, count] : hist) {
        best = std::max(best, count);
        sum += count;
      }
      correct += best;
      total += sum;
    }
    return double(correct) / double(total);
  };

  double unit_acc = probe_accuracy(token_unit);
  double speaker_acc = probe_accuracy(token_speaker);
  double speaker_chance = 1.0 / cfg.n_speakers;
  INFO("unit probe " << unit_acc << ", speaker probe " << speaker_acc);
  REQUIRE(unit_acc >= 0.75);
  REQUIRE(speaker_acc <= speaker_chance + 0.5);
}
