#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gradcheck.hpp"
#include "lpa/ops.hpp"
#include "lpa/rng.hpp"
#include "lpa/sgd.hpp"
#include "lpa/ten1.hpp"
#include "lpa/tensor.hpp"

using namespace lpa;
using D = Tensor<double>;
using F = Tensor<float>;

namespace {

std::vector<double> randn(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto a = D::from({3, 3}, {2, -1, 0, 3, 5, 1, -2, 4, 7});
  auto eye = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto prod = matmul(eye, a);
  for (int i = 0; i < 9; ++i) CHECK(prod.value()[i] == a.value()[i]);

  auto m = D::from({2, 2}, {1, 2, 3, 4});
  auto v = D::from({2, 1}, {1, 1});
  auto mv = matmul(m, v);
  CHECK(mv.at({0, 0}) == doctest::Approx(3));
  CHECK(mv.at({1, 0}) == doctest::Approx(7));

  CHECK_THROWS_AS(matmul(D::zeros({2, 3}), D::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient of sum equals ones times transpose") {
  Rng rng(7);
  auto av = randn(rng, 6);
  auto bv = randn(rng, 6);
  auto res = gradcheck::check({{2, 3}, {3, 2}}, {av, bv}, [](std::vector<D>& l) {
    return reduce_sum(matmul(l[0], l[1]));
  });
  CHECK(res.ok);
  // closed form: d(sum(AB))/dA = ones * B^T
  auto a = D::from({2, 3}, av).set_requires_grad(true);
  auto b = D::from({3, 2}, bv);
  backward(reduce_sum(matmul(a, b)));
  for (int m = 0; m < 2; ++m) {
    for (int k = 0; k < 3; ++k) {
      CHECK(a.grad_at({m, k}) == doctest::Approx(bv[2 * k] + bv[2 * k + 1]));
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("y = x") {
    auto x = D::scalar(3.5).set_requires_grad(true);
    auto y = scale(x, 1.0);
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(1.0));
  }
  SUBCASE("y = sum(x*x) has gradient 2x") {
    auto x = D::from({4}, {1, -2, 0.5, 3}).set_requires_grad(true);
    backward(reduce_sum(mul(x, x)));
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2 * x.value()[i]));
  }
  SUBCASE("non-scalar root rejected") {
    auto x = D::zeros({2}).set_requires_grad(true);
    CHECK_THROWS_AS(backward(scale(x, 2.0)), UsageError);
  }
  SUBCASE("gradient accumulates across uses") {
    auto x = D::scalar(2.0).set_requires_grad(true);
    auto y = add(mul(x, x), mul(x, x));  // 2x^2, dy/dx = 4x = 8
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(8.0));
  }
  SUBCASE("backward twice doubles every gradient exactly") {
    Rng rng(3);
    auto x = D::from({3, 3}, randn(rng, 9)).set_requires_grad(true);
    auto w = D::from({3, 3}, randn(rng, 9)).set_requires_grad(true);
    auto loss = reduce_sum(mul(sigmoid(matmul(x, w)), x));
    backward(loss);
    auto gx = x.grad();
    auto gw = w.grad();
    backward(loss);
    for (int i = 0; i < 9; ++i) {
      CHECK(x.grad()[i] == 2 * gx[i]);
      CHECK(w.grad()[i] == 2 * gw[i]);
    }
  }
}

TEST_CASE("elementwise and activation gradients vs finite differences") {
  Rng rng(11);
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(100 + seed);
    auto av = randn(r, 12);
    auto bv = randn(r, 12);
    // keep relu inputs away from the kink
    for (auto& v : av) {
      if (std::abs(v) < 1e-2) v += 0.05;
    }
    auto res = gradcheck::check({{3, 4}, {3, 4}}, {av, bv}, [](std::vector<D>& l) {
      auto z = add(mul(l[0], l[1]), sub(l[0], l[1]));
      return reduce_mean(mul(relu(l[0]), sigmoid(z)));
    });
    CHECK_MESSAGE(res.ok, res.worst);
  }
}

TEST_CASE("softmax properties") {
  auto z = D::from({3}, {0, 0, 0});
  auto s = softmax(z);
  for (int i = 0; i < 3; ++i) CHECK(s.value()[i] == doctest::Approx(1.0 / 3));

  // shift invariance
  Rng rng(5);
  auto xv = randn(rng, 5);
  auto shifted = xv;
  for (auto& v : shifted) v += 17.25;
  auto a = softmax(D::from({5}, xv));
  auto b = softmax(D::from({5}, shifted));
  for (int i = 0; i < 5; ++i) CHECK(a.value()[i] == doctest::Approx(b.value()[i]).epsilon(1e-12));

  // rows sum to one along the reduced axis
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    auto m = softmax(D::from({4, 6}, randn(r, 24, 3.0)), 1);
    for (int row = 0; row < 4; ++row) {
      double sum = 0;
      for (int col = 0; col < 6; ++col) sum += m.at({row, col});
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("softmax jacobian vs finite differences") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(200 + seed);
    auto xv = randn(r, 8, 2.0);
    auto wv = randn(r, 8);
    auto res = gradcheck::check({{2, 4}}, {xv}, [&](std::vector<D>& l) {
      return reduce_sum(mul(softmax(l[0], 1), D::from({2, 4}, wv)));
    });
    CHECK_MESSAGE(res.ok, res.worst);
  }
}

TEST_CASE("bce_loss values and gradient") {
  SUBCASE("pred equals target stays under the clamp bound") {
    auto p = D::from({2, 2}, {1, 0, 1, 1});
    auto t = D::from({2, 2}, {1, 0, 1, 1});
    CHECK(bce_loss(p, t).item() <= -std::log(1.0 - 1e-7) + 1e-12);
  }
  SUBCASE("uniform 0.5 prediction gives ln 2") {
    auto p = D::full({3, 3}, 0.5);
    auto t = D::from({3, 3}, {1, 0, 1, 0, 1, 0, 1, 0, 0});
    CHECK(bce_loss(p, t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(bce_loss(D::zeros({2}), D::zeros({3})), DimensionError);
  }
  SUBCASE("gradient vs finite differences") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(300 + seed);
      std::vector<double> pv(16), tv(16);
      for (auto& v : pv) v = r.uniform(0.05, 0.95);
      for (auto& v : tv) v = r.coin() ? 1.0 : 0.0;
      auto res = gradcheck::check({{4, 4}}, {pv}, [&](std::vector<D>& l) {
        return bce_loss(l[0], D::from({4, 4}, tv));
      });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("kl_div values, positivity, gradient") {
  SUBCASE("kl(p,p) is zero") {
    for (int seed = 0; seed < 10; ++seed) {
      Rng r(seed);
      std::vector<double> pv(6);
      double sum = 0;
      for (auto& v : pv) {
        v = r.uniform(0.01, 1.0);
        sum += v;
      }
      for (auto& v : pv) v /= sum;
      auto p = D::from({6}, pv);
      CHECK(std::abs(kl_div(p, p).item()) < 1e-12);
    }
  }
  SUBCASE("kl([1,0],[0.5,0.5]) = ln 2") {
    auto p = D::from({2}, {1, 0});
    auto q = D::from({2}, {0.5, 0.5});
    CHECK(kl_div(p, q).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("non-negative on 1000 random pairs") {
    Rng r(99);
    for (int it = 0; it < 1000; ++it) {
      std::vector<double> pv(5), qv(5);
      double ps = 0, qs = 0;
      for (int i = 0; i < 5; ++i) {
        pv[i] = r.uniform(1e-4, 1.0);
        qv[i] = r.uniform(1e-4, 1.0);
        ps += pv[i];
        qs += qv[i];
      }
      for (int i = 0; i < 5; ++i) {
        pv[i] /= ps;
        qv[i] /= qs;
      }
      CHECK(kl_div(D::from({5}, pv), D::from({5}, qv)).item() >= 0.0);
    }
  }
  SUBCASE("non-normalized input rejected with the sum in the message") {
    auto bad = D::from({2}, {0.7, 0.7});
    auto good = D::from({2}, {0.5, 0.5});
    CHECK_THROWS_WITH_AS(kl_div(bad, good), doctest::Contains("1.4"), ValidationError);
  }
  SUBCASE("gradient vs finite differences through softmax normalization") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(400 + seed);
      auto av = randn(r, 6);
      auto bv = randn(r, 6);
      auto res = gradcheck::check({{6}, {6}}, {av, bv}, [](std::vector<D>& l) {
        return kl_div(softmax(l[0]), softmax(l[1]));
      });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("conv2d identity, analytic, and gradient") {
  SUBCASE("1x1 unit kernel is identity") {
    Rng r(1);
    auto x = D::from({2, 4, 4}, randn(r, 32));
    auto k = D::from({2, 2, 1, 1}, {1, 0, 0, 1});
    auto y = conv2d(x, k, D::zeros({2}), 1, 0);
    for (std::size_t i = 0; i < x.value().size(); ++i) CHECK(y.value()[i] == x.value()[i]);
  }
  SUBCASE("3x3 ones kernel on constant input gives 9c in the interior") {
    auto x = D::full({1, 5, 5}, 2.0);
    auto k = D::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, k, D::zeros({1}), 1, 1);
    CHECK(y.at({0, 2, 2}) == doctest::Approx(18.0));
    CHECK(y.at({0, 0, 0}) == doctest::Approx(8.0));  // corner sees 4 taps
  }
  SUBCASE("non-integral output extent rejected") {
    CHECK_THROWS_AS(conv2d(D::zeros({1, 6, 6}), D::zeros({1, 1, 3, 3}), D::zeros({1}), 2, 0),
                    ConfigError);
  }
  SUBCASE("gradient vs finite differences") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(500 + seed);
      auto xv = randn(r, 2 * 5 * 5);
      auto kv = randn(r, 3 * 2 * 3 * 3, 0.5);
      auto bv = randn(r, 3);
      auto res = gradcheck::check(
          {{2, 5, 5}, {3, 2, 3, 3}, {3}}, {xv, kv, bv},
          [](std::vector<D>& l) { return reduce_mean(conv2d(l[0], l[1], l[2], 2, 1)); });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("bilinear_sample") {
  SUBCASE("integer coordinates return grid values") {
    Rng r(2);
    auto x = D::from({3, 4, 5}, randn(r, 60));
    auto s = bilinear_sample(x, 2.0, 3.0);
    for (int c = 0; c < 3; ++c) CHECK(s.value()[c] == x.at({c, 2, 3}));
  }
  SUBCASE("center of a 2x2 grid averages the corners") {
    auto x = D::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(bilinear_sample(x, 0.5, 0.5).value()[0] == doctest::Approx(2.5));
  }
  SUBCASE("coordinates clamp outside the grid") {
    auto x = D::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(bilinear_sample(x, -5.0, 0.0).value()[0] == doctest::Approx(1.0));
    CHECK(bilinear_sample(x, 9.0, 9.0).value()[0] == doctest::Approx(4.0));
  }
  SUBCASE("gradient wrt coordinates vs finite differences") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(600 + seed);
      auto xv = randn(r, 2 * 5 * 5);
      // keep coordinates off the integer lattice and inside the grid
      std::vector<double> yv = {r.uniform(0.2, 3.8)};
      std::vector<double> xvc = {r.uniform(0.2, 3.8)};
      if (std::abs(yv[0] - std::round(yv[0])) < 0.05) yv[0] += 0.1;
      if (std::abs(xvc[0] - std::round(xvc[0])) < 0.05) xvc[0] += 0.1;
      auto res = gradcheck::check({{2, 5, 5}, {}, {}}, {xv, yv, xvc}, [](std::vector<D>& l) {
        return reduce_sum(mul(bilinear_sample(l[0], l[1], l[2]), D::from({2}, {0.7, -1.3})));
      });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("upsample_bilinear") {
  SUBCASE("constant maps stay constant") {
    auto y = upsample_bilinear(D::full({2, 3, 3}, 0.75), 9, 11);
    for (double v : y.value()) CHECK(v == doctest::Approx(0.75));
  }
  SUBCASE("align-corners row interpolation") {
    auto x = D::from({1, 2, 2}, {0, 1, 0, 1});
    auto y = upsample_bilinear(x, 2, 4);
    CHECK(y.at({0, 0, 0}) == doctest::Approx(0.0));
    CHECK(y.at({0, 0, 1}) == doctest::Approx(1.0 / 3));
    CHECK(y.at({0, 0, 2}) == doctest::Approx(2.0 / 3));
    CHECK(y.at({0, 0, 3}) == doctest::Approx(1.0));
  }
  SUBCASE("source lattice is reproduced exactly") {
    Rng r(8);
    auto x = D::from({1, 4, 4}, randn(r, 16));
    auto y = upsample_bilinear(x, 13, 13);  // scale 4 -> 13: lattice at multiples of 4
    for (int sy = 0; sy < 4; ++sy) {
      for (int sx = 0; sx < 4; ++sx) {
        CHECK(std::abs(y.at({0, sy * 4, sx * 4}) - x.at({0, sy, sx})) < 1e-6);
      }
    }
  }
  SUBCASE("shrinking rejected") {
    CHECK_THROWS_AS(upsample_bilinear(D::zeros({1, 4, 4}), 2, 8), ConfigError);
  }
  SUBCASE("gradient vs finite differences") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(700 + seed);
      auto xv = randn(r, 2 * 3 * 3);
      auto wv = randn(r, 2 * 7 * 5);
      auto res = gradcheck::check({{2, 3, 3}}, {xv}, [&](std::vector<D>& l) {
        return reduce_sum(mul(upsample_bilinear(l[0], 7, 5), D::from({2, 7, 5}, wv)));
      });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("reductions, concat, reshape gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(800 + seed);
    auto av = randn(r, 24);
    auto bv = randn(r, 12);
    // margins so reduce_max argmax is stable under eps perturbation
    auto res = gradcheck::check({{2, 3, 4}, {1, 3, 4}}, {av, bv}, [](std::vector<D>& l) {
      auto cat = concat<double>({l[0], l[1]}, 0);
      auto m = reduce_max(cat, 0);
      auto s = reduce_mean(cat, 2);
      return add(reduce_sum(m), reduce_mean(reshape(s, {9})));
    });
    CHECK_MESSAGE(res.ok, res.worst);
  }

  SUBCASE("argmax returns indices and concat validates shapes") {
    auto x = D::from({2, 3}, {1, 5, 2, 7, 0, 7});
    auto a = argmax(x, 1);
    CHECK(a.value()[0] == 1.0);
    CHECK(a.value()[1] == 0.0);  // tie resolves to the lowest index
    CHECK_THROWS_AS(concat<double>({D::zeros({2, 3}), D::zeros({2, 4})}, 0), DimensionError);
  }
}

TEST_CASE("channel_scale and add_row_bias gradients") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng r(900 + seed);
    auto fv = randn(r, 3 * 4 * 4);
    auto gv = randn(r, 16);
    auto mv = randn(r, 12);
    auto bv = randn(r, 4);
    auto res = gradcheck::check({{3, 4, 4}, {4, 4}}, {fv, gv}, [](std::vector<D>& l) {
      return reduce_mean(channel_scale(l[0], l[1]));
    });
    CHECK_MESSAGE(res.ok, res.worst);
    auto res2 = gradcheck::check({{3, 4}, {4}}, {mv, bv}, [](std::vector<D>& l) {
      return reduce_mean(sigmoid(add_row_bias(l[0], l[1])));
    });
    CHECK_MESSAGE(res2.ok, res2.worst);
  }
}

TEST_CASE("softmax_xent gradient and value") {
  std::vector<int> labels = {0, 2, 1, 2};
  SUBCASE("uniform logits give ln C") {
    auto logits = D::zeros({3, 2, 2});
    CHECK(softmax_xent(logits, labels).item() == doctest::Approx(std::log(3.0)));
  }
  SUBCASE("gradient vs finite differences") {
    for (int seed = 0; seed < 20; ++seed) {
      Rng r(1000 + seed);
      auto lv = randn(r, 3 * 2 * 2, 2.0);
      auto res = gradcheck::check({{3, 2, 2}}, {lv}, [&](std::vector<D>& l) {
        return softmax_xent(l[0], labels);
      });
      CHECK_MESSAGE(res.ok, res.worst);
    }
  }
}

TEST_CASE("sgd_step with momentum and weight decay") {
  auto p = F::from({2}, {1.0f, -2.0f}).set_requires_grad(true);
  backward(reduce_sum(mul(p, p)));  // grad = 2p
  std::vector<Tensor<float>> params = {p};
  std::vector<std::vector<float>> vel(1);
  sgd_step(params, vel, 0.1f, 0.9f, 0.01f);
  // v = g + wd*p = [2.01, -4.02]; p = p - 0.1*v
  CHECK(p.value()[0] == doctest::Approx(1.0f - 0.1f * 2.01f));
  CHECK(p.value()[1] == doctest::Approx(-2.0f + 0.1f * 4.02f));
  p.zero_grad();
  backward(reduce_sum(mul(p, p)));
  sgd_step(params, vel, 0.1f, 0.9f, 0.01f);
  // momentum term carries the previous velocity
  const float v0 = 0.9f * 2.01f + (2 * 0.799f + 0.01f * 0.799f);
  CHECK(p.value()[0] == doctest::Approx(0.799f - 0.1f * v0).epsilon(1e-5));
}

TEST_CASE("float32 default determinism") {
  auto run = [] {
    Rng r(42);
    std::vector<float> xv(64), kv(8 * 1 * 3 * 3);
    for (auto& v : xv) v = static_cast<float>(r.normal());
    for (auto& v : kv) v = static_cast<float>(r.normal() * 0.2);
    auto x = F::from({1, 8, 8}, xv).set_requires_grad(true);
    auto k = F::from({8, 1, 3, 3}, kv).set_requires_grad(true);
    auto loss = reduce_mean(sigmoid(conv2d(x, k, F::zeros({8}), 1, 1)));
    backward(loss);
    return std::make_tuple(loss.item(), x.grad(), k.grad());
  };
  auto [l1, gx1, gk1] = run();
  auto [l2, gx2, gk2] = run();
  CHECK(l1 == l2);
  CHECK(gx1 == gx2);
  CHECK(gk1 == gk2);
}

TEST_CASE("TEN1 round-trip") {
  Rng r(77);
  std::vector<float> v(24);
  for (auto& x : v) x = static_cast<float>(r.normal() * std::pow(10.0, r.randint(-8, 8)));
  auto t = F::from({2, 3, 4}, v);
  std::stringstream ss;
  write_ten1(ss, t);
  auto back = read_ten1<float>(ss);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(back.value()[i] == v[i]);

  std::stringstream bad("TEN2 1 3\n1 2 3\n");
  CHECK_THROWS_AS(read_ten1<float>(bad), FormatError);
  std::stringstream trunc("TEN1 1 4\n1 2 3\n");
  CHECK_THROWS_AS(read_ten1<float>(trunc), FormatError);
}
