#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dvc/checkpoint.hpp"
#include "dvc/gradcheck.hpp"
#include "dvc/nn.hpp"
#include "dvc/optim.hpp"
#include "dvc/rng.hpp"
#include "dvc/tensor.hpp"
#include "dvc/grad_suite.hpp"

using namespace dvc;

TEST_CASE("matmul matches hand results") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(eye, b);
  CHECK(c.data() == std::vector<float>{5, 6, 7, 8});

  Tensor row = Tensor::from({1, 2}, {1, 2});
  Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0f);

  CHECK_THROWS(matmul(row, row));
}

TEST_CASE("conv1d matches hand results") {
  Tensor x = Tensor::from({3, 1}, {1, 2, 3});
  Tensor w = Tensor::from({3, 1, 1}, {1, 0, -1});
  Tensor y = conv1d(x, w);
  CHECK(y.data() == std::vector<float>{-2, -2, 2});

  Tensor delta = Tensor::from({3, 1, 1}, {0, 1, 0});
  CHECK(conv1d(x, delta).data() == x.data());

  Tensor even = Tensor::from({2, 1, 1}, {1, 1});
  CHECK_THROWS(conv1d(x, even));
}

TEST_CASE("rotary embedding identity, norm, relative offsets") {
  RngStream rng = RngStream::from_seed(11, "rope-test");
  Tensor x = Tensor::randn({1, 8}, rng, 1.0f);

  Tensor same = rope_apply(x, {0});
  for (int j = 0; j < 8; ++j)
    CHECK(std::fabs(same.data()[j] - x.data()[j]) < 1e-6f);

  Tensor rot = rope_apply(x, {37});
  for (int p = 0; p < 4; ++p) {
    float n0 = x.data()[2 * p] * x.data()[2 * p] +
               x.data()[2 * p + 1] * x.data()[2 * p + 1];
    float n1 = rot.data()[2 * p] * rot.data()[2 * p] +
               rot.data()[2 * p + 1] * rot.data()[2 * p + 1];
    CHECK(std::fabs(n0 - n1) < 1e-5f);
  }

  // attention scores depend only on the position difference
  Tensor q = Tensor::randn({1, 8}, rng, 1.0f);
  Tensor k = Tensor::randn({1, 8}, rng, 1.0f);
  auto score = [&](int m, int n) {
    Tensor qm = rope_apply(q, {m});
    Tensor kn = rope_apply(k, {n});
    float s = 0.0f;
    for (int j = 0; j < 8; ++j) s += qm.data()[j] * kn.data()[j];
    return s;
  };
  CHECK(std::fabs(score(3, 7) - score(5, 9)) < 1e-5f);
  CHECK(std::fabs(score(12, 2) - score(20, 10)) < 1e-5f);

  Tensor odd = Tensor::randn({1, 7}, rng, 1.0f);
  CHECK_THROWS(rope_apply(odd, {0}));
}

TEST_CASE("backward populates leaf gradients") {
  Tensor x = Tensor::scalar(3.0f, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK(std::fabs(x.grad()[0] - 6.0f) < 1e-6f);

  // second sweep through the same graph accumulates on leaves only
  backward(loss);
  CHECK(std::fabs(x.grad()[0] - 12.0f) < 1e-6f);

  Tensor v = Tensor::from({3}, {0.2f, -1.1f, 2.3f}, true);
  Tensor l2 = sum(sin_(v));
  backward(l2);
  for (int i = 0; i < 3; ++i)
    CHECK(std::fabs(v.grad()[std::size_t(i)] - std::cos(v.data()[std::size_t(i)])) <
          1e-5f);

  CHECK_THROWS(backward(v));
}

TEST_CASE("softmax rows are normalized and layer norm standardizes") {
  RngStream rng = RngStream::from_seed(3, "norm-test");
  Tensor x = Tensor::randn({5, 9}, rng, 2.0f);
  Tensor p = softmax_rows(x);
  for (int i = 0; i < 5; ++i) {
    float s = 0.0f;
    for (int j = 0; j < 9; ++j) s += p.at(i, j);
    CHECK(std::fabs(s - 1.0f) < 1e-5f);
  }
  Tensor y = layer_norm_rows(x);
  for (int i = 0; i < 5; ++i) {
    float m = 0.0f, v = 0.0f;
    for (int j = 0; j < 9; ++j) m += y.at(i, j);
    m /= 9.0f;
    for (int j = 0; j < 9; ++j) v += (y.at(i, j) - m) * (y.at(i, j) - m);
    v /= 9.0f;
    CHECK(std::fabs(m) < 1e-5f);
    CHECK(std::fabs(v - 1.0f) < 1e-3f);
  }
}

TEST_CASE("masked losses match hand values") {
  Tensor pred = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor target = Tensor::zeros({2, 2});
  CHECK(std::fabs(mse_masked_rows(pred, target, {1, 0}).item() - 2.5f) < 1e-6f);
  CHECK(mse_masked_rows(pred, target, {0, 0}).item() == 0.0f);

  Tensor logits = Tensor::zeros({3, 64});
  Tensor ce = cross_entropy_masked(logits, {5, 9, 63}, {1, 1, 0});
  CHECK(std::fabs(ce.item() - std::log(64.0f)) < 1e-5f);

  Tensor p = Tensor::from({2}, {0.5f, 2.0f});
  Tensor sl = smooth_l1_masked(p, {0.0f, 0.0f}, {1, 1});
  CHECK(std::fabs(sl.item() - 0.5f * (0.125f + 1.5f)) < 1e-6f);
}

TEST_CASE("adaLN-zero block is the identity at initialization") {
  RngStream rng = RngStream::from_seed(21, "adaln-test");
  ParamStore ps;
  CondBlock block(ps, "blk", 16, 2, 32, rng.child("init"));
  Tensor x = Tensor::randn({4, 16}, rng, 1.0f);
  Tensor cond = Tensor::randn({1, 16}, rng, 1.0f);
  Tensor y = block.forward(x, cond, iota_positions(4));
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("gradient suite stays within tolerance") {
  auto entries = dvc::run_gradient_suite();
  REQUIRE(!entries.empty());
  for (const auto& e : entries) {
    INFO(e.name << " rel_error=" << e.result.rel_error);
    CHECK(e.result.rel_error <= 1e-3f);
  }
}

TEST_CASE("grad_check flags a wrong backward") {
  Tensor x = Tensor::from({4}, {0.5f, -1.0f, 2.0f, 1.5f}, true);
  auto broken_square = [](const Tensor& a) {
    std::vector<float> out(a.data());
    for (float& v : out) v *= v;
    auto an = a.ptr();
    return dvc::detail::make_op(a.shape(), std::move(out), {a},
                                [an](TensorNode& o) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    an->grad[i] += 3.0f * an->data[i] * o.grad[i];
                                });
  };
  auto res = grad_check([&] { return sum(broken_square(x)); }, x, 1e-3f);
  CHECK(res.rel_error > 0.1f);

  auto ok = grad_check([&] { return sum(mul(x, x)); }, x, 1e-3f);
  CHECK(ok.rel_error < 1e-4f);
}

TEST_CASE("adamw updates follow the schedule and hand simulation") {
  SECTION("zero gradient and zero decay leave parameters alone") {
    ParamStore ps;
    Tensor w = ps.add("w", Tensor::from({2}, {1.5f, -0.5f}));
    AdamWConfig cfg;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    w.grad();  // allocate zeros
    opt.step(0);
    CHECK(w.data() == std::vector<float>{1.5f, -0.5f});
  }
  SECTION("two hand-simulated steps with beta1=beta2=0") {
    ParamStore ps;
    Tensor w = ps.add("w", Tensor::scalar(1.0f));
    AdamWConfig cfg;
    cfg.lr_start = 0.1f;
    cfg.lr_end = 0.1f;
    cfg.decay_steps = 1;
    cfg.beta1 = 0.0f;
    cfg.beta2 = 0.0f;
    cfg.weight_decay = 0.0f;
    AdamW opt(ps, cfg);
    w.grad()[0] = 1.0f;
    opt.step(0);
    CHECK(std::fabs(w.data()[0] - 0.9f) < 1e-6f);
    w.zero_grad();
    w.grad()[0] = 1.0f;
    opt.step(1);
    CHECK(std::fabs(w.data()[0] - 0.8f) < 1e-6f);
  }
  SECTION("learning rate hits both endpoints") {
    AdamWConfig cfg;  // 2e-4 -> 5e-5 over 600k
    CHECK(linear_lr(cfg, 0) == cfg.lr_start);
    CHECK(linear_lr(cfg, cfg.decay_steps) == cfg.lr_end);
    CHECK(linear_lr(cfg, 2 * cfg.decay_steps) == cfg.lr_end);
    CHECK(linear_lr(cfg, cfg.decay_steps / 2) ==
          Catch::Approx(0.5 * (cfg.lr_start + cfg.lr_end)).epsilon(1e-6));
  }
}

TEST_CASE("rng streams are deterministic and well separated") {
  RngStream a = RngStream::from_seed(42, "train");
  RngStream b = RngStream::from_seed(42, "train");
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c = RngStream::from_seed(42, "corpus");
  CHECK(c.key() != a.key());
  CHECK(RngStream::from_seed(42, "train").child("a").key() !=
        RngStream::from_seed(42, "train").child("b").key());
  CHECK(RngStream::from_seed(42, "train").child(0).key() !=
        RngStream::from_seed(42, "train").child(1).key());

  RngStream u = RngStream::from_seed(7, "uniform");
  double acc = 0.0;
  for (int i = 0; i < 10000; ++i) {
    float v = u.uniform();
    CHECK(v >= 0.0f);
    CHECK(v < 1.0f);
    acc += v;
  }
  CHECK(std::fabs(acc / 10000.0 - 0.5) < 0.02);

  std::vector<int> perm = {0, 1, 2, 3, 4, 5, 6, 7};
  RngStream s = RngStream::from_seed(9, "shuffle");
  s.shuffle(perm);
  std::vector<int> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("checkpoint files round trip parameters and optimizer state") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "dvc_ckpt_test";
  fs::create_directories(dir);

  ParamStore ps;
  RngStream rng = RngStream::from_seed(5, "ckpt-test");
  ps.add("enc.w", Tensor::randn({3, 4}, rng, 1.0f));
  ps.add("enc.b", Tensor::randn({1, 4}, rng, 1.0f));
  AdamWConfig cfg;
  AdamW opt(ps, cfg);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (float& g : ps.at(i).grad()) g = 0.3f;
  opt.step(0);
  opt.step(1);

  save_params(dir / "model.ckpt", ps);
  save_optimizer(dir / "model.opt", opt, ps, 2);

  ParamStore ps2;
  RngStream rng2 = RngStream::from_seed(99, "other");
  ps2.add("enc.w", Tensor::randn({3, 4}, rng2, 1.0f));
  ps2.add("enc.b", Tensor::randn({1, 4}, rng2, 1.0f));
  AdamW opt2(ps2, cfg);
  load_params(dir / "model.ckpt", ps2);
  std::int64_t steps = load_optimizer(dir / "model.opt", opt2, ps2);

  CHECK(steps == 2);
  CHECK(opt2.moment_steps() == opt.moment_steps());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    CHECK(ps2.at(i).data() == ps.at(i).data());
    CHECK(opt2.first_moments()[i] == opt.first_moments()[i]);
    CHECK(opt2.second_moments()[i] == opt.second_moments()[i]);
  }

  SECTION("shape mismatch is rejected") {
    ParamStore bad;
    bad.add("enc.w", Tensor::zeros({4, 3}));
    bad.add("enc.b", Tensor::zeros({1, 4}));
    CHECK_THROWS(load_params(dir / "model.ckpt", bad));
  }
  SECTION("bad magic is rejected") {
    fs::path junk = dir / "junk.ckpt";
    std::ofstream os(junk, std::ios::binary);
    os << "NOPE";
    os.close();
    CHECK_THROWS(load_checkpoint(junk));
  }
}
