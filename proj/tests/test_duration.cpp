#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dvc/duration.hpp"
#include "dvc/gradcheck.hpp"
#include "dvc/tokenizer.hpp"

using namespace dvc;

namespace {

DurationPredictorConfig tiny_config() {
  DurationPredictorConfig cfg;
  cfg.embed_dim = 6;
  cfg.hidden = 8;
  return cfg;
}

}  // namespace

TEST_CASE("inference durations follow the clamp-and-round rule") {
  ParamStore ps;
  DurationPredictorConfig cfg = tiny_config();
  DurationPredictor dp(ps, cfg, RngStream::from_seed(1, "dp"));

  // zero all parameters so the head emits y = 0 -> duration 1
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (float& v : ps.at(i).data()) v = 0.0f;
  Tensor x = Tensor::full({3, cfg.embed_dim}, 0.7f);
  std::vector<int> d = dp.predict_durations(x);
  REQUIRE(d == std::vector<int>{1, 1, 1});

  // bias the head to log(4): exp(log 4) - 1 = 3 frames
  ps.get("duration.head.b").data()[0] = std::log(4.0f);
  d = dp.predict_durations(x);
  REQUIRE(d == std::vector<int>{3, 3, 3});
}

TEST_CASE("inference path is deterministic, training dropout is not a no-op") {
  ParamStore ps;
  DurationPredictorConfig cfg = tiny_config();
  DurationPredictor dp(ps, cfg, RngStream::from_seed(2, "dp"));
  RngStream rng = RngStream::from_seed(3, "x");
  Tensor x = Tensor::randn({5, cfg.embed_dim}, rng, 1.0f);

  Tensor a = dp.predict_log_durations(x, false);
  Tensor b = dp.predict_log_durations(x, false);
  REQUIRE(a.data() == b.data());

  Tensor t1 = dp.predict_log_durations(x, true, RngStream::from_seed(4, "drop"));
  Tensor t2 = dp.predict_log_durations(x, true, RngStream::from_seed(5, "drop"));
  float diff = 0.0f;
  for (int i = 0; i < t1.rows(); ++i)
    diff = std::max(diff, std::fabs(t1.at(i, 0) - t2.at(i, 0)));
  REQUIRE(diff > 1e-6f);
}

TEST_CASE("duration loss is the mse of log-shifted frame counts") {
  std::vector<int> target{1, 3, 7};
  Tensor exact = log1p_durations(target);
  REQUIRE(duration_loss(exact, target).item() == Catch::Approx(0.0f));

  Tensor off = Tensor::zeros({3, 1});
  for (int i = 0; i < 3; ++i) off.at(i, 0) = exact.at(i, 0) + 1.0f;
  REQUIRE(duration_loss(off, target).item() == Catch::Approx(1.0f));

  REQUIRE_THROWS(duration_loss(exact, {1, 3}));
}

TEST_CASE("duration loss gradient agrees with finite differences") {
  ParamStore ps;
  DurationPredictorConfig cfg = tiny_config();
  DurationPredictor dp(ps, cfg, RngStream::from_seed(6, "dp"));
  RngStream rng = RngStream::from_seed(7, "x");
  Tensor x = Tensor::randn({4, cfg.embed_dim}, rng, 1.0f, true);
  std::vector<int> target{2, 5, 1, 8};

  auto loss_fn = [&] {
    return duration_loss(dp.predict_log_durations(x, false), target);
  };
  // small step keeps central differences off the relu kinks
  REQUIRE(grad_check(loss_fn, x, 2e-3f).rel_error <= 1e-3f);
  Tensor w = ps.get("duration.conv1.w");
  REQUIRE(grad_check(loss_fn, w, 2e-3f).rel_error <= 1e-3f);

  // pure loss against a plain leaf at the tighter bound; the loss is
  // quadratic so a wide step is exact and beats float rounding
  Tensor pred = Tensor::randn({4, 1}, rng, 1.0f, true);
  auto plain = [&] { return duration_loss(pred, target); };
  REQUIRE(grad_check(plain, pred, 5e-2f).rel_error <= 1e-4f);
}

TEST_CASE("length regulation repeats rows and inverts mean pooling") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor expanded = length_regulate(x, {2, 3});
  REQUIRE(expanded.rows() == 5);
  REQUIRE(expanded.at(0, 0) == 1.0f);
  REQUIRE(expanded.at(1, 0) == 1.0f);
  REQUIRE(expanded.at(2, 1) == 4.0f);
  REQUIRE(expanded.at(4, 1) == 4.0f);

  Tensor same = length_regulate(x, {1, 1});
  REQUIRE(same.data() == x.data());

  Tensor back = segment_mean(expanded, {2, 3});
  for (std::size_t i = 0; i < x.data().size(); ++i)
    REQUIRE(back.data()[i] == Catch::Approx(x.data()[i]));

  REQUIRE_THROWS(length_regulate(x, {0, 5}));
  REQUIRE_THROWS(length_regulate(x, {2}));

  REQUIRE(length_regulate_ids({7, 9}, {2, 3}) ==
          std::vector<int>{7, 7, 9, 9, 9});
}

TEST_CASE("regulating dedup output reconstructs the raw token stream") {
  RngStream rng = RngStream::from_seed(8, "ids");
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> raw;
    int len = 1 + int(rng.below(80));
    for (int i = 0; i < len; ++i) raw.push_back(int(rng.below(5)));
    TokenSequence seq = dedup(raw);
    REQUIRE(length_regulate_ids(seq.ids, seq.durations) == raw);
  }
}
