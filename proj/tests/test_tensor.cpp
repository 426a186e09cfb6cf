#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "capdet/optim.hpp"
#include "capdet/rng.hpp"
#include "capdet/serialize.hpp"
#include "capdet/tensor.hpp"

using namespace capdet;

TEST_CASE("rng determinism and stream independence") {
  Rng a(123, "init");
  Rng b(123, "init");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(123, "init");
  Rng d(123, "dropout");
  int same = 0;
  for (int i = 0; i < 100; ++i)
    if (c.next_u64() == d.next_u64()) ++same;
  CHECK(same == 0);

  // stream() does not advance the parent
  Rng e(5);
  uint64_t first = Rng(5).next_u64();
  (void)e.stream("x");
  CHECK(e.next_u64() == first);
}

TEST_CASE("rng uniform and gaussian sanity") {
  Rng r(9, "stats");
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = r.next_uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    sum += u;
  }
  CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));

  Rng g(9, "gauss");
  sum = 0;
  for (int i = 0; i < n; ++i) {
    double x = g.next_gaussian();
    sum += x;
    sq += x * x;
  }
  CHECK(sum / n == doctest::Approx(0.0).epsilon(1).scale(0.05));
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("matmul identity") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(i2, m);
  CHECK(out.values() == std::vector<float>{1, 2, 3, 4});
}

TEST_CASE("matmul hand computed") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {5, 6});
  Tensor out = matmul(a, b);
  CHECK(out.shape() == Shape{2, 1});
  CHECK(out.values() == std::vector<float>{17, 39});
}

TEST_CASE("matmul empty inner dimension") {
  Tensor a = Tensor::zeros({3, 0});
  Tensor b = Tensor::zeros({0, 2});
  Tensor out = matmul(a, b);
  CHECK(out.shape() == Shape{3, 2});
  for (float v : out.values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::exception& e) {
    std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }
}

TEST_CASE("softmax symmetry, stability, reference values") {
  Tensor z = softmax_stable(Tensor::from({3}, {0, 0, 0}), 0);
  for (float v : z.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-6));

  Tensor big = softmax_stable(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(big.values()[1] == doctest::Approx(0.0).scale(1).epsilon(1e-6));

  Tensor ref = softmax_stable(Tensor::from({3}, {1, 2, 3}), 0);
  CHECK(ref.values()[0] == doctest::Approx(0.09003).epsilon(2e-4));
  CHECK(ref.values()[1] == doctest::Approx(0.24473).epsilon(2e-4));
  CHECK(ref.values()[2] == doctest::Approx(0.66524).epsilon(2e-4));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(31, "softmax");
  for (int trial = 0; trial < 50; ++trial) {
    Rng t = rng.stream(static_cast<uint64_t>(trial));
    Tensor x = Tensor::randn({4, 6}, t, 3.0f);
    Tensor s = softmax_stable(x, 1);
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int c = 0; c < 6; ++c) sum += s.values()[r * 6 + c];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax invalid axis") {
  CHECK_THROWS(softmax_stable(Tensor::zeros({2, 2}), 2));
}

TEST_CASE("cross entropy uniform, confident, ignored") {
  Tensor uniform = Tensor::zeros({1, 4});
  Tensor l1 = cross_entropy_logits(uniform, {2}, 0);
  CHECK(l1.item() == doctest::Approx(std::log(4.0)).epsilon(1e-5));

  Tensor confident = Tensor::from({1, 4}, {0, 0, 1e4, 0});
  CHECK(cross_entropy_logits(confident, {2}, 0).item() ==
        doctest::Approx(0.0).scale(1).epsilon(1e-5));

  // position with ignore_id contributes nothing
  Tensor two = Tensor::from({2, 4}, {1, 2, 3, 4, 9, 9, 9, 9});
  Tensor with_ignored = cross_entropy_logits(two, {1, 0}, 0);
  Tensor single = cross_entropy_logits(
      Tensor::from({1, 4}, {1, 2, 3, 4}), {1}, 0);
  CHECK(with_ignored.item() == doctest::Approx(single.item()).epsilon(1e-6));

  CHECK_THROWS_WITH_AS(cross_entropy_logits(two, {0, 0}, 0),
                       doctest::Contains("empty loss"), std::exception);
  CHECK(cross_entropy_logits(two, {1, 3}, 0).item() >= 0.0f);
}

TEST_CASE("backward linear and quadratic") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  backward(sum_all(w));
  REQUIRE(w.grad() != nullptr);
  CHECK((*w.grad())[0] == 1.0f);
  CHECK((*w.grad())[1] == 1.0f);

  Tensor w2 = Tensor::from({2}, {1, 2}, true);
  backward(sum_all(mul(w2, w2)));
  CHECK((*w2.grad())[0] == doctest::Approx(2.0f));
  CHECK((*w2.grad())[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward disconnected leaf gets no grad") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor other = Tensor::from({2}, {3, 4}, true);
  backward(sum_all(other));
  CHECK(w.grad() == nullptr);
}

TEST_CASE("backward rejects non-scalar") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS(backward(mul(w, w)));
}

TEST_CASE("finite diff on quadratic, constant, negative control") {
  Rng rng(77, "fd");
  Tensor x = Tensor::randn({3, 3}, rng, 1.0f, true);
  auto quad = [](const Tensor& t) { return sum_all(mul(t, t)); };
  auto rep = finite_diff_check(quad, x, 1e-3, 1e-4);
  CHECK(rep.pass);

  Tensor y = Tensor::randn({2, 2}, rng, 1.0f, true);
  // effectively constant: no dependence on y, both gradient sides zero
  auto rep2 = finite_diff_check(
      [](const Tensor& t) { return scale(sum_all(t), 0.0f); }, y, 1e-3, 1e-4);
  CHECK(rep2.pass);
  CHECK(rep2.max_rel_err == doctest::Approx(0.0));

  auto wrong2 = [](const Tensor& t) {
    // value is sum(3t) but only sum(t) is taped
    float extra = 0;
    for (float v : t.values()) extra += 2.0f * v;
    return add(sum_all(t), Tensor::scalar(extra));
  };
  Tensor z = Tensor::from({3}, {0.5f, -1.0f, 2.0f}, true);
  auto rep3 = finite_diff_check(wrong2, z, 1e-3, 1e-4);
  CHECK_FALSE(rep3.pass);
}

TEST_CASE("gradient checks across every kernel") {
  Rng master(2024, "kernel-grad");
  const double h = 1e-3, tol = 1e-4;
  for (int seed_i = 0; seed_i < 50; ++seed_i) {
    Rng r = master.stream(static_cast<uint64_t>(seed_i));
    CAPTURE(seed_i);

    {
      Rng s = r.stream("add");
      Tensor x = Tensor::randn({3, 4}, s, 0.4f, true);
      Tensor b = Tensor::randn({3, 4}, s, 0.4f);
      auto rep = finite_diff_check(
          [&](const Tensor& t) { return sum_all(add(t, b)); }, x, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("add_rowvec");
      Tensor m = Tensor::randn({3, 4}, s, 0.4f);
      Tensor v = Tensor::randn({4}, s, 0.4f, true);
      auto rep = finite_diff_check(
          [&](const Tensor& t) { return sum_all(mul(add_rowvec(m, t), m)); },
          v, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("mul");
      Tensor x = Tensor::randn({2, 5}, s, 0.4f, true);
      Tensor b = Tensor::randn({2, 5}, s, 0.4f);
      auto rep = finite_diff_check(
          [&](const Tensor& t) { return sum_all(mul(t, b)); }, x, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("matmul");
      Tensor a = Tensor::randn({3, 4}, s, 0.4f, true);
      Tensor b = Tensor::randn({4, 2}, s, 0.4f);
      auto repa = finite_diff_check(
          [&](const Tensor& t) { return sum_all(matmul(t, b)); }, a, h, tol);
      CHECK(repa.pass);
      Tensor b2 = Tensor::randn({4, 2}, s, 0.4f, true);
      Tensor a2 = Tensor::randn({3, 4}, s, 0.4f);
      auto repb = finite_diff_check(
          [&](const Tensor& t) { return sum_all(matmul(a2, t)); }, b2, h, tol);
      CHECK(repb.pass);
    }
    {
      Rng s = r.stream("transpose");
      Tensor x = Tensor::randn({3, 5}, s, 0.4f, true);
      Tensor w = Tensor::randn({5, 3}, s, 0.4f);
      auto rep = finite_diff_check(
          [&](const Tensor& t) { return sum_all(mul(transpose(t), w)); }, x, h,
          tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("gelu");
      Tensor x = Tensor::randn({4, 4}, s, 0.4f, true);
      auto rep = finite_diff_check(
          [&](const Tensor& t) { return sum_all(gelu(t)); }, x, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("softmax");
      Tensor x = Tensor::randn({3, 4}, s, 0.4f, true);
      Tensor w = Tensor::randn({3, 4}, s, 0.4f);
      auto rep = finite_diff_check(
          [&](const Tensor& t) {
            return sum_all(mul(softmax_stable(t, 1), w));
          },
          x, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("layer_norm");
      Tensor x = Tensor::randn({3, 6}, s, 0.4f, true);
      Tensor g = Tensor::randn({6}, s, 0.4f);
      Tensor b = Tensor::randn({6}, s, 0.4f);
      Tensor w = Tensor::randn({3, 6}, s, 0.4f);
      auto rep = finite_diff_check(
          [&](const Tensor& t) {
            return sum_all(mul(layer_norm(t, g, b), w));
          },
          x, h, tol);
      CHECK(rep.pass);
      Tensor g2 = Tensor::randn({6}, s, 0.4f, true);
      auto repg = finite_diff_check(
          [&](const Tensor& t) {
            return sum_all(mul(layer_norm(x, t, b), w));
          },
          g2, h, tol);
      CHECK(repg.pass);
    }
    {
      Rng s = r.stream("slice_concat");
      Tensor x = Tensor::randn({3, 6}, s, 0.4f, true);
      auto rep = finite_diff_check(
          [&](const Tensor& t) {
            Tensor left = slice_cols(t, 0, 2);
            Tensor right = slice_cols(t, 2, 4);
            return sum_all(mul(concat_cols({right, left}),
                               concat_cols({right, left})));
          },
          x, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("gather");
      Tensor table = Tensor::randn({5, 3}, s, 0.4f, true);
      auto rep = finite_diff_check(
          [&](const Tensor& t) {
            return sum_all(mul(gather_rows(t, {0, 2, 2, 4}),
                               gather_rows(t, {0, 2, 2, 4})));
          },
          table, h, tol);
      CHECK(rep.pass);
    }
    {
      Rng s = r.stream("means");
      Tensor x = Tensor::randn({4, 3}, s, 0.4f, true);
      CHECK(finite_diff_check(
                [&](const Tensor& t) { return mean_all(t); }, x, h, tol)
                .pass);
      Tensor w = Tensor::randn({3}, s, 0.4f);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return sum_all(mul(mean_rows(t), w));
                },
                x, h, tol)
                .pass);
    }
    {
      Rng s = r.stream("sigmoid");
      Tensor x = Tensor::randn({2, 3}, s, 0.8f, true);
      CHECK(finite_diff_check(
                [&](const Tensor& t) { return sum_all(sigmoid(t)); }, x, h,
                tol)
                .pass);
    }
    {
      Rng s = r.stream("reshape");
      Tensor x = Tensor::randn({2, 6}, s, 0.4f, true);
      Tensor w = Tensor::randn({3, 4}, s, 0.4f);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return sum_all(mul(reshape(t, {3, 4}), w));
                },
                x, h, tol)
                .pass);
    }
    {
      Rng s = r.stream("ce");
      Tensor logits = Tensor::randn({3, 5}, s, 0.4f, true);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return cross_entropy_logits(t, {1, 0, 4}, 0);
                },
                logits, h, tol)
                .pass);
    }
    {
      Rng s = r.stream("bce");
      Tensor logits = Tensor::randn({4}, s, 0.4f, true);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return bce_with_logits(t, {1, 0, 1, 0});
                },
                logits, h, tol)
                .pass);
    }
    {
      Rng s = r.stream("im2col");
      Tensor x = Tensor::randn({2, 4, 4}, s, 0.4f, true);
      auto plan = Im2ColPlan::make(2, 4, 4, 3, 2, 1);
      Tensor w = Tensor::randn({static_cast<int64_t>(plan.out_h) * plan.out_w,
                                2 * 9},
                               s, 1.0f);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return sum_all(mul(im2col(t, plan), w));
                },
                x, h, tol)
                .pass);
    }
    {
      Rng s = r.stream("scale_sub");
      Tensor x = Tensor::randn({3, 3}, s, 0.4f, true);
      Tensor b = Tensor::randn({3, 3}, s, 0.4f);
      CHECK(finite_diff_check(
                [&](const Tensor& t) {
                  return sum_all(mul(sub(scale(t, 1.7f), b), t));
                },
                x, h, tol)
                .pass);
    }
  }
}

TEST_CASE("dropout inverted scaling and eval determinism") {
  Tensor x = Tensor::full({1, 1000}, 1.0f);
  Rng rng(11, "drop");
  Tensor d = dropout(x, 0.25f, rng);
  double sum = 0;
  int zeros = 0;
  for (float v : d.values()) {
    if (v == 0.0f)
      ++zeros;
    else
      CHECK(v == doctest::Approx(1.0f / 0.75f));
    sum += v;
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
  CHECK(sum / 1000 == doctest::Approx(1.0).epsilon(0.1));

  // p = 0 is identity
  Rng rng2(11, "drop");
  Tensor same = dropout(x, 0.0f, rng2);
  CHECK(same.values() == x.values());
}

TEST_CASE("dropout gradient matches its mask") {
  Tensor x = Tensor::full({1, 8}, 2.0f, true);
  Rng rng(3, "dropmask");
  Tensor d = dropout(x, 0.5f, rng);
  backward(sum_all(d));
  REQUIRE(x.grad() != nullptr);
  for (size_t i = 0; i < 8; ++i) {
    float expect = d.values()[i] == 0.0f ? 0.0f : 2.0f;
    CHECK((*x.grad())[i] == doctest::Approx(expect));
  }
}

TEST_CASE("adam zero grad leaves params unchanged") {
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  std::vector<std::pair<std::string, Tensor>> params{{"w", w}};
  std::vector<float> zero(3, 0.0f);
  std::vector<const std::vector<float>*> grads{&zero};
  AdamState state;
  AdamConfig cfg;
  adam_step(params, grads, state, cfg);
  CHECK(w.values() == std::vector<float>{1, 2, 3});
  CHECK(state.timestep == 1);
}

TEST_CASE("adam first step magnitude equals lr") {
  Tensor w = Tensor::from({1}, {5.0f}, true);
  std::vector<std::pair<std::string, Tensor>> params{{"w", w}};
  std::vector<float> g{1.0f};
  std::vector<const std::vector<float>*> grads{&g};
  AdamState state;
  AdamConfig cfg;
  cfg.lr = 0.1f;
  adam_step(params, grads, state, cfg);
  // bias-corrected first step moves by lr (up to eps)
  CHECK(w.values()[0] == doctest::Approx(4.9f).epsilon(1e-4));
}

TEST_CASE("adam trajectories are bit identical") {
  auto run = [] {
    Rng rng(4, "adam");
    Tensor w = Tensor::randn({4}, rng, 1.0f, true);
    std::vector<std::pair<std::string, Tensor>> params{{"w", w}};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 0.01f;
    for (int i = 0; i < 20; ++i) {
      w.zero_grad();
      backward(sum_all(mul(w, w)));
      std::vector<const std::vector<float>*> grads{w.grad()};
      adam_step(params, grads, state, cfg);
    }
    return w.values();
  };
  CHECK(run() == run());
}

TEST_CASE("grad sink scope routes leaf gradients") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  GradMap sink;
  {
    GradSinkScope scope(&sink);
    backward(sum_all(mul(w, w)));
  }
  CHECK(w.grad() == nullptr);
  REQUIRE(sink.count(w.impl()) == 1);
  CHECK(sink[w.impl()][0] == doctest::Approx(2.0f));
  CHECK(sink[w.impl()][1] == doctest::Approx(4.0f));
}

TEST_CASE("no grad scope suppresses taping") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor out;
  {
    NoGradScope ng;
    CHECK_FALSE(grad_enabled());
    out = sum_all(mul(w, w));
  }
  CHECK(grad_enabled());
  CHECK(out.impl()->parents.empty());
}

TEST_CASE("tensor format round trip is byte exact") {
  Rng rng(8, "ser");
  std::vector<std::pair<std::string, Tensor>> tensors{
      {"alpha", Tensor::randn({3, 4}, rng, 1.0f)},
      {"beta/下", Tensor::randn({7}, rng, 2.0f)},
      {"empty", Tensor::zeros({0})},
  };
  std::stringstream ss;
  write_tensors(ss, tensors);
  std::string bytes = ss.str();
  CHECK(bytes.substr(0, 18) == "CAPDET-TENSORS v1\n");

  std::stringstream in(bytes);
  auto back = read_tensors(in);
  REQUIRE(back.size() == tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) {
    CHECK(back[i].first == tensors[i].first);
    CHECK(back[i].second.shape() == tensors[i].second.shape());
    CHECK(back[i].second.values() == tensors[i].second.values());
  }

  std::stringstream out2;
  write_tensors(out2, back);
  CHECK(out2.str() == bytes);

  // truncation is rejected
  std::stringstream cut(bytes.substr(0, bytes.size() - 2));
  CHECK_THROWS(read_tensors(cut));
  std::stringstream garbage("NOT-A-TENSOR-FILE\nxxxx");
  CHECK_THROWS(read_tensors(garbage));
}
