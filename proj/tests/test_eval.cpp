#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dvc/eval.hpp"

using namespace dvc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(bool(is));
  return std::string(std::istreambuf_iterator<char>(is), {});
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

F0Contour voiced_contour(std::vector<float> hz) {
  F0Contour f;
  f.voiced.assign(hz.size(), 1.0f);
  f.hz = std::move(hz);
  return f;
}

struct Fixture {
  fs::path dir;
  Corpus corpus;
  ContentCodebook cb;
};

const Fixture& fixture() {
  static Fixture f = [] {
    Fixture x;
    x.dir = fresh_dir("dvc_eval_fixture");
    CorpusConfig cc;
    cc.n_speakers = 4;
    cc.utts_per_speaker = 6;
    cc.held_out_speakers = 1;
    cc.n_units = 6;
    cc.min_seconds = 1.0f;
    cc.max_seconds = 1.5f;
    x.corpus = generate_corpus(cc, 31, x.dir);
    TokenizerTrainConfig tc;
    tc.k = 16;
    tc.iters = 12;
    tc.max_frames = 4000;
    x.cb = fit_tokenizer(x.corpus, x.dir, tc, 31);
    return x;
  }();
  return f;
}

fs::path wav_of(const Corpus& c, const fs::path& root, const std::string& spk,
                int nth = 0) {
  int seen = 0;
  for (const UtteranceRecord& r : c.utterances)
    if (r.speaker == spk && seen++ == nth) return root / r.wav_path;
  throw std::runtime_error("no such utterance");
}

}  // namespace

TEST_CASE("pitch correlation matches a hand-computed Pearson value") {
  F0Contour a = voiced_contour({100.0f, 150.0f, 200.0f});
  F0Contour b = voiced_contour({110.0f, 160.0f, 230.0f});
  F0CorrResult r = f0_pearson(a, b);
  REQUIRE(r.defined);
  // frozen against an independent direct computation of Pearson r
  REQUIRE(std::abs(r.r - 0.9954022745) < 1e-6);
}

TEST_CASE("pitch correlation endpoints") {
  F0Contour up = voiced_contour({100.0f, 120.0f, 140.0f, 160.0f});
  REQUIRE(f0_pearson(up, up).r == Catch::Approx(1.0));

  F0Contour down = voiced_contour({160.0f, 140.0f, 120.0f, 100.0f});
  REQUIRE(f0_pearson(up, down).r == Catch::Approx(-1.0));
}

TEST_CASE("pitch correlation resamples and stays near-symmetric") {
  std::vector<float> shape_a, shape_b;
  for (int i = 0; i < 40; ++i)
    shape_a.push_back(150.0f + 30.0f * std::sin(0.3f * float(i)));
  for (int i = 0; i < 61; ++i)
    shape_b.push_back(120.0f + 25.0f * std::sin(0.3f * float(i) * 39.0f / 60.0f));
  F0Contour a = voiced_contour(shape_a);
  F0Contour b = voiced_contour(shape_b);

  F0CorrResult ab = f0_pearson(a, b);
  F0CorrResult ba = f0_pearson(b, a);
  REQUIRE(ab.defined);
  REQUIRE(ab.r > 0.95);
  REQUIRE(std::abs(ab.r - ba.r) < 0.02);
}

TEST_CASE("pitch correlation flags degenerate tracks instead of guessing") {
  F0Contour flat = voiced_contour({150.0f, 150.0f, 150.0f});
  F0Contour moving = voiced_contour({100.0f, 150.0f, 200.0f});
  F0CorrResult r = f0_pearson(flat, moving);
  REQUIRE_FALSE(r.defined);
  REQUIRE(r.r == 0.0);

  F0Contour unvoiced;
  unvoiced.hz = {0.0f, 0.0f};
  unvoiced.voiced = {0.0f, 0.0f};
  REQUIRE_FALSE(f0_pearson(unvoiced, moving).defined);
  REQUIRE_FALSE(f0_pearson(moving, unvoiced).defined);
  REQUIRE_THROWS_AS(f0_pearson(F0Contour{}, moving), std::runtime_error);
}

TEST_CASE("token agreement is a normalized edit distance") {
  REQUIRE(levenshtein({1, 2, 3}, {1, 9, 3}) == 1);
  REQUIRE(levenshtein({}, {4, 5}) == 2);
  REQUIRE(levenshtein({1, 2, 3, 4}, {1, 2, 3, 4}) == 0);

  REQUIRE(content_token_similarity({1, 2, 3}, {1, 9, 3}) ==
          Catch::Approx(2.0 / 3.0));
  REQUIRE(content_token_similarity({1, 2, 3}, {4, 5, 6}) == 0.0);
  REQUIRE(content_token_similarity({}, {}) == 1.0);
  REQUIRE(content_token_similarity({7, 7}, {7, 7}) == 1.0);
}

TEST_CASE("content accuracy of a file against itself is exactly one") {
  const Fixture& f = fixture();
  MelProcessor mp(f.corpus.cfg.mel);
  fs::path wav = wav_of(f.corpus, f.dir, f.corpus.speakers.front().id);
  REQUIRE(content_accuracy(mp, f.cb, wav, wav) == 1.0);
}

TEST_CASE("speaker classifier separates the training speakers") {
  const Fixture& f = fixture();
  MelProcessor mp(f.corpus.cfg.mel);

  SpeakerClassifierConfig cc;
  cc.n_speakers = int(train_speaker_labels(f.corpus).size());
  REQUIRE(cc.n_speakers == 3);

  ParamStore ps;
  SpeakerClassifier clf(ps, cc, RngStream::from_seed(19, "clf"));

  SECTION("an untrained probe refuses to score") {
    fs::path wav = wav_of(f.corpus, f.dir, f.corpus.speakers.front().id);
    REQUIRE_THROWS_AS(speaker_similarity(clf, mp, wav, wav),
                      std::runtime_error);
  }

  SECTION("training, margins and silence invariance") {
    SpeakerClassifierTrainResult r =
        train_speaker_classifier(clf, ps, f.corpus, f.dir, 19);
    CAPTURE(r.train_accuracy);
    REQUIRE(r.train_accuracy >= 0.95);
    REQUIRE(clf.trained());

    fs::path a0 = wav_of(f.corpus, f.dir, f.corpus.speakers[0].id, 0);
    REQUIRE(speaker_similarity(clf, mp, a0, a0) == Catch::Approx(1.0));

    // same-speaker pairs sit above cross-speaker pairs on average
    double same = 0.0, cross = 0.0;
    int n_same = 0, n_cross = 0;
    std::vector<std::string> spk = train_speaker_labels(f.corpus);
    for (const std::string& s : spk)
      for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) {
          same += speaker_similarity(clf, mp, wav_of(f.corpus, f.dir, s, i),
                                     wav_of(f.corpus, f.dir, s, j));
          ++n_same;
        }
    for (std::size_t x = 0; x < spk.size(); ++x)
      for (std::size_t y = x + 1; y < spk.size(); ++y)
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) {
            cross += speaker_similarity(clf, mp,
                                        wav_of(f.corpus, f.dir, spk[x], i),
                                        wav_of(f.corpus, f.dir, spk[y], j));
            ++n_cross;
          }
    same /= double(n_same);
    cross /= double(n_cross);
    CAPTURE(same, cross);
    REQUIRE(same - cross >= 0.15);

    // trailing silence must not move the utterance embedding
    fs::path b0 = wav_of(f.corpus, f.dir, f.corpus.speakers[1].id, 0);
    std::vector<float> wave = read_wav(a0, f.corpus.cfg.mel.sample_rate);
    wave.resize(wave.size() + wave.size() / 10, 0.0f);
    fs::path padded = fs::temp_directory_path() / "dvc_eval_padded.wav";
    write_wav(padded, wave, f.corpus.cfg.mel.sample_rate);
    REQUIRE(speaker_similarity(clf, mp, a0, padded) >= 0.98);
    REQUIRE(std::abs(speaker_similarity(clf, mp, a0, b0) -
                     speaker_similarity(clf, mp, padded, b0)) <= 0.02);
  }
}

TEST_CASE("contour slopes recover the corpus prosody tags") {
  const Fixture& f = fixture();
  int agree = 0, total = 0;
  for (const UtteranceRecord& rec : f.corpus.utterances) {
    F0Contour f0;
    f0.hz = rec.f0_hz;
    for (float v : rec.f0_hz) f0.voiced.push_back(v > 0.0f ? 1.0f : 0.0f);
    ContourTag got = classify_contour(f0);
    agree += got == rec.tag ? 1 : 0;
    ++total;
  }
  CAPTURE(agree, total);
  REQUIRE(double(agree) / double(total) >= 0.8);
}

TEST_CASE("contour classification handles sparse voicing") {
  F0Contour one;
  one.hz = {0.0f, 150.0f, 0.0f};
  one.voiced = {0.0f, 1.0f, 0.0f};
  REQUIRE(classify_contour(one) == ContourTag::flat);

  F0Contour rising;
  for (int i = 0; i < 50; ++i) {
    rising.hz.push_back(150.0f * (0.85f + 0.30f * float(i) / 49.0f));
    rising.voiced.push_back(1.0f);
  }
  REQUIRE(classify_contour(rising) == ContourTag::rise);

  F0Contour falling;
  for (int i = 0; i < 50; ++i) {
    falling.hz.push_back(150.0f * (1.15f - 0.30f * float(i) / 49.0f));
    falling.voiced.push_back(1.0f);
  }
  REQUIRE(classify_contour(falling) == ContourTag::fall);
}

TEST_CASE("mel distance is zero only for matching tracks") {
  Tensor a = Tensor::zeros({4, 3});
  Tensor b = Tensor::zeros({6, 3});
  REQUIRE(mel_distance(a, b) == 0.0);
  b.at(0, 0) = 3.0f;
  REQUIRE(mel_distance(a, b) == Catch::Approx(3.0 / 12.0));
}

TEST_CASE("ablation dumps mirror the plain conversion when nothing is dropped") {
  const Fixture& f = fixture();
  PipelineConfig pc;
  pc.tokenizer.k = 16;
  pc.tokenizer.iters = 12;
  pc.tokenizer.max_frames = 4000;
  pc.codec.hidden = 32;
  pc.codec.codebook_size = 32;
  pc.codec.code_dim = 16;
  pc.duration.embed_dim = 16;
  pc.duration.hidden = 24;
  pc.fmt.layers = 2;
  pc.fmt.heads = 2;
  pc.fmt.embed = 64;
  pc.fmt.ff = 96;
  pc.fmt.content_vocab = 16;
  pc.fmt.prosody_vocab = 32;
  pc.fmt.token_embed = 16;
  pc.fmt.steps = 4;
  pc.pmt.layers = 2;
  pc.pmt.heads = 2;
  pc.pmt.embed = 48;
  pc.pmt.ff = 96;
  pc.pmt.prosody_vocab = 32;
  pc.pmt.content_vocab = 16;
  pc.stage1.steps = 3;
  pc.stage1.batch_frames = 150;
  pc.stage1.checkpoint_every = 0;
  pc.convert.griffin_lim_iters = 4;
  pc.convert.prompt_cap_frames = 60;

  VoicePipeline vp(pc, 23);
  MelProcessor mp(f.corpus.cfg.mel);
  auto prepared = prepare_training_set(f.corpus, f.dir, f.cb, mp);
  train_stage1(vp, prepared, fresh_dir("dvc_eval_warmup"), 7, false, nullptr);

  fs::path out = fresh_dir("dvc_eval_ablate");
  ConversionRequest req;
  req.source_wav =
      wav_of(f.corpus, f.dir, f.corpus.speakers.front().id).string();
  req.reference_wav =
      wav_of(f.corpus, f.dir, f.corpus.speakers.back().id).string();
  req.output_wav = (out / "plain.wav").string();
  req.seed = 4;

  ConversionArtifacts plain = convert(vp, f.cb, req);

  ConversionRequest same = req;
  same.output_wav = (out / "undropped.wav").string();
  ConversionArtifacts dumped = ablation_dump(vp, f.cb, same, out / "undropped");
  REQUIRE(dumped.wav == plain.wav);
  REQUIRE(slurp(out / "plain.wav") == slurp(out / "undropped.wav"));
  REQUIRE(fs::exists(out / "undropped.csv"));
  REQUIRE(fs::exists(out / "undropped.pgm"));

  ConversionRequest drop = req;
  drop.drop = AblationDrop::prosody;
  drop.output_wav = (out / "dropped.wav").string();
  ConversionArtifacts ablated = ablation_dump(vp, f.cb, drop, out / "dropped");
  REQUIRE(ablated.wav != plain.wav);
}

TEST_CASE("evaluation reports aggregate their pair metrics") {
  EvalReport rep;
  rep.seed = 9;
  rep.checkpoint_dir = "ckpt";
  PairMetrics a;
  a.f0_corr = 0.8;
  a.content_acc = 0.9;
  a.sim_reference = 0.6;
  a.sim_source = 0.5;
  a.prefers_reference = true;
  a.mel_distance = 1.0;
  PairMetrics b = a;
  b.f0_corr = 0.6;
  b.prefers_reference = false;
  rep.pairs = {a, b};

  nlohmann::ordered_json j = rep.to_json();
  REQUIRE(j.at("aggregate").at("f0_corr").at("mean").get<double>() ==
          Catch::Approx(0.7));
  REQUIRE(j.at("aggregate").at("f0_corr").at("std").get<double>() ==
          Catch::Approx(std::sqrt(0.02)));
  REQUIRE(j.at("aggregate").at("reference_preference").get<double>() ==
          Catch::Approx(0.5));
  REQUIRE(j.at("pairs").size() == 2);
  REQUIRE(j.at("seed").get<std::uint64_t>() == 9);
}
