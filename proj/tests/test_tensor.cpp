#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "subcnn/tensor.hpp"

using namespace subcnn;

namespace {

/// Direct per-pixel evaluation of align-corners-false bilinear sampling,
/// written straight from the formula as an independent oracle.
double bilinear_at(const TensorD& t, int out_h, int out_w, int i, int j) {
  int H = t.dim(0), W = t.dim(1);
  auto src = [](int idx, int in, int out) {
    double s = (idx + 0.5) * static_cast<double>(in) / out - 0.5;
    return std::min(std::max(s, 0.0), static_cast<double>(in - 1));
  };
  double sy = src(i, H, out_h), sx = src(j, W, out_w);
  int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  double fy = sy - y0, fx = sx - x0;
  return t.at(y0, x0) * (1 - fy) * (1 - fx) + t.at(y0, x1) * (1 - fy) * fx +
         t.at(y1, x0) * fy * (1 - fx) + t.at(y1, x1) * fy * fx;
}

TensorD random_tensor(std::vector<int> shape, Rng& rng) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.gaussian();
  return t;
}

}  // namespace

TEST_CASE("elementwise add/mul/relu basics") {
  GraphD g;
  auto a = g.input(TensorD({2}, {1, 2}), true);
  auto b = g.input(TensorD({2}, {3, 4}), false);
  auto s = g.add(a, b);
  CHECK(g.value(s).data[0] == 4);
  CHECK(g.value(s).data[1] == 6);

  auto zero = g.input(TensorD::scalar(0.0), false);
  auto m = g.mul(a, zero);
  CHECK(g.value(m).data[0] == 0);
  CHECK(g.value(m).data[1] == 0);

  auto c = g.input(TensorD({2}, {-1, 2}), true);
  auto r = g.relu(c);
  CHECK(g.value(r).data[0] == 0);
  CHECK(g.value(r).data[1] == 2);

  auto loss = g.sum(g.add(m, r));
  g.backward(loss);
  // d(a*0)/da = 0; relu mask [0,1].
  CHECK(g.grad(a).data[0] == 0);
  CHECK(g.grad(a).data[1] == 0);
  CHECK(g.grad(c).data[0] == 0);
  CHECK(g.grad(c).data[1] == 1);
}

TEST_CASE("elementwise shape mismatch is an error") {
  GraphD g;
  auto a = g.input(TensorD::zeros({2, 3}));
  auto b = g.input(TensorD::zeros({3, 2}));
  CHECK_THROWS_AS(g.add(a, b), Error);
}

TEST_CASE("non-finite values are rejected at op boundaries") {
  GraphD g;
  TensorD bad({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(g.input(bad), Error);
}

TEST_CASE("bilinear resize: constants, identity, 1x1 broadcast") {
  TensorD c = TensorD::full({3, 5}, 7.25);
  TensorD up = bilinear_resize(c, 9, 4);
  for (double v : up.data) CHECK(v == doctest::Approx(7.25).epsilon(1e-12));

  TensorD one = TensorD({1, 1}, {5.0});
  TensorD b = bilinear_resize(one, 3, 3);
  for (double v : b.data) CHECK(v == 5.0);

  Rng rng(11);
  TensorD x = random_tensor({4, 6, 2}, rng);
  TensorD same = bilinear_resize(x, 4, 6);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(same.data[i] == x.data[i]);  // exact
}

TEST_CASE("bilinear resize 2x2 -> 4x4 matches direct-formula oracle and frozen values") {
  TensorD x({2, 2}, {0, 1, 2, 3});
  TensorD y = bilinear_resize(x, 4, 4);
  // x(y_, x_) = 2*y_ + x_ is itself bilinear, so the resize reproduces it at the
  // sample points ys = xs = [0, 0.25, 0.75, 1].
  const double expect[16] = {0.0, 0.25, 0.75, 1.0,  0.5, 0.75, 1.25, 1.5,
                             1.5, 1.75, 2.25, 2.5,  2.0, 2.25, 2.75, 3.0};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      CHECK(y.at(i, j) == doctest::Approx(expect[4 * i + j]).epsilon(1e-12));
      CHECK(y.at(i, j) == doctest::Approx(bilinear_at(x, 4, 4, i, j)).epsilon(1e-12));
    }
}

TEST_CASE("bilinear resize random shapes match the oracle") {
  Rng rng(303);
  for (int trial = 0; trial < 10; ++trial) {
    int H = static_cast<int>(rng.uniform_int(1, 7));
    int W = static_cast<int>(rng.uniform_int(1, 7));
    int oh = static_cast<int>(rng.uniform_int(1, 9));
    int ow = static_cast<int>(rng.uniform_int(1, 9));
    TensorD x = random_tensor({H, W}, rng);
    TensorD y = bilinear_resize(x, oh, ow);
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        CHECK(y.at(i, j) == doctest::Approx(bilinear_at(x, oh, ow, i, j)).epsilon(1e-10));
  }
}

TEST_CASE("graph: backward twice is an error; non-scalar loss rejected") {
  GraphD g;
  auto a = g.input(TensorD({2}, {1, 2}), true);
  auto s = g.sum(a);
  g.backward(s);
  CHECK_THROWS_AS(g.backward(s), Error);

  GraphD h;
  auto b = h.input(TensorD({2}, {1, 2}), true);
  auto t = h.add(b, b);
  CHECK_THROWS_AS(h.backward(t), Error);
}

TEST_CASE("gradient accumulation: grad(f+g) == grad(f) + grad(g)") {
  Rng rng(5);
  TensorD x0 = random_tensor({3, 3}, rng);

  auto grad_of = [&](bool use_f, bool use_g) {
    GraphD g;
    auto x = g.input(x0, true);
    GraphD::Ref total = -1;
    if (use_f) total = g.sum(g.mul(x, x));
    if (use_g) {
      auto r = g.sum(g.relu(x));
      total = total < 0 ? r : g.add(total, r);
    }
    g.backward(total);
    return g.grad(x);
  };

  TensorD gf = grad_of(true, false), gg = grad_of(false, true), gfg = grad_of(true, true);
  for (int64_t i = 0; i < x0.numel(); ++i)
    CHECK(gfg.data[i] == doctest::Approx(gf.data[i] + gg.data[i]).epsilon(1e-12));
}

TEST_CASE("grad_check: sum and sum of squares") {
  Rng rng(17);
  TensorD x = random_tensor({3, 3}, rng);

  double err_lin = grad_check(
      [](GraphD& g, const std::vector<GraphD::Ref>& in) { return g.sum(in[0]); }, {x});
  CHECK(err_lin < 1e-10);

  double err_sq = grad_check(
      [](GraphD& g, const std::vector<GraphD::Ref>& in) { return g.sum(g.mul(in[0], in[0])); },
      {x});
  CHECK(err_sq < 1e-6);
}

TEST_CASE("grad_check: elementwise ops, resize, reshape over 20 seeds") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    TensorD a = random_tensor({2, 3}, rng);
    TensorD b = random_tensor({2, 3}, rng);
    // Keep relu inputs away from the kink.
    TensorD c = TensorD::zeros({6});
    for (int i = 0; i < 6; ++i) c.data[i] = 0.37 * (i - 3) + 0.185;
    for (int i = 5; i > 0; --i) std::swap(c.data[i], c.data[rng.uniform_int(0, i)]);

    double e1 = grad_check(
        [](GraphD& g, const std::vector<GraphD::Ref>& in) {
          auto prod = g.mul(in[0], in[1]);
          return g.sum(g.sub(prod, g.scale(in[1], 0.5)));
        },
        {a, b});
    CHECK(e1 < 1e-4);

    double e2 = grad_check(
        [](GraphD& g, const std::vector<GraphD::Ref>& in) { return g.sum(g.relu(in[0])); },
        {c});
    CHECK(e2 < 1e-4);

    TensorD m = random_tensor({3, 4, 2}, rng);
    double e3 = grad_check(
        [](GraphD& g, const std::vector<GraphD::Ref>& in) {
          auto r = g.bilinear_resize(in[0], 5, 3);
          return g.sum(g.mul(r, r));
        },
        {m});
    CHECK(e3 < 1e-4);

    double e4 = grad_check(
        [](GraphD& g, const std::vector<GraphD::Ref>& in) {
          auto r = g.reshape(in[0], {4, 6});
          return g.sum(g.mul(r, r));
        },
        {m});
    CHECK(e4 < 1e-4);
  }
}

TEST_CASE("tensor file round-trip and exact layout") {
  Tensor t = Tensor::zeros({2, 3});
  std::iota(t.data.begin(), t.data.end(), 1.0f);
  const char* path = "stns_roundtrip.bin";
  save_tensor(path, t);

  Tensor back = load_tensor(path);
  REQUIRE(back.shape == t.shape);
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(back.data[i] == t.data[i]);

  FILE* fp = fopen(path, "rb");
  REQUIRE(fp);
  unsigned char buf[12 + 6 * 4];
  REQUIRE(fread(buf, 1, sizeof(buf), fp) == sizeof(buf));
  fclose(fp);
  CHECK(buf[0] == 'S');
  CHECK(buf[1] == 'T');
  CHECK(buf[2] == 'N');
  CHECK(buf[3] == 'S');
  CHECK(buf[4] == 2);  // rank, little-endian u32
  CHECK(buf[5] == 0);
  CHECK(buf[8] == 2);   // extent 0
  CHECK(buf[12] == 3);  // extent 1
  float v0;
  memcpy(&v0, buf + 16, 4);
  CHECK(v0 == 1.0f);
  remove(path);
}

TEST_CASE("rng determinism and gaussian moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng r(7);
  double sum = 0, sum2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = r.gaussian();
    sum += v;
    sum2 += v * v;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.05));

  Rng f1 = Rng(9).fork(3), f2 = Rng(9).fork(4);
  CHECK(f1.next_u64() != f2.next_u64());
}
