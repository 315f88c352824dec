#include <doctest.h>

#include <cmath>

#include "meshnet/ops.hpp"
#include "meshnet/rng.hpp"
#include "oracles.hpp"

using namespace meshnet;
using oracles::naive_conv3d;
using oracles::random_tensor;

TEST_SUITE_BEGIN("ops");

TEST_CASE("conv3d: centered delta kernel is the identity") {
  Rng rng(1);
  auto in = random_tensor<double>({1, 1, 5, 5, 5}, rng);
  Tensor<double> kernel({1, 1, 3, 3, 3});
  kernel.values[kernel.at5(0, 0, 1, 1, 1)] = 1.0;
  Tensor<double> bias({1});
  auto out = conv3d_forward(in, kernel, bias, 1, 1);
  REQUIRE(out.shape == in.shape);
  for (std::int64_t i = 0; i < in.size(); ++i)
    CHECK(out.values[i] == doctest::Approx(in.values[i]).epsilon(1e-15));
}

TEST_CASE("conv3d: dilated all-ones kernel spreads an impulse to 27 taps") {
  Tensor<double> in({1, 1, 9, 9, 9});
  in.values[in.at5(0, 0, 4, 4, 4)] = 1.0;
  Tensor<double> kernel({1, 1, 3, 3, 3});
  std::fill(kernel.values.begin(), kernel.values.end(), 1.0);
  Tensor<double> bias({1});
  auto out = conv3d_forward(in, kernel, bias, 2, 2);
  REQUIRE(out.shape == in.shape);
  int ones = 0;
  for (int z = 0; z < 9; ++z)
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) {
        const double v = out.values[out.at5(0, 0, x, y, z)];
        const bool at_tap = (std::abs(x - 4) == 2 || x == 4) &&
                            (std::abs(y - 4) == 2 || y == 4) &&
                            (std::abs(z - 4) == 2 || z == 4);
        if (at_tap) {
          CHECK(v == 1.0);
          ++ones;
        } else {
          CHECK(v == 0.0);
        }
      }
  CHECK(ones == 27);
}

TEST_CASE("conv3d matches the direct-sum oracle on random cases") {
  Rng rng(42);
  for (int c = 0; c < 30; ++c) {
    const int k = (c % 2 == 0) ? 3 : 1;
    const int dils[] = {1, 2, 4};
    const int l = dils[c % 3];
    const int pad_same = l * (k - 1) / 2;
    const int pad = (c % 5 == 0) ? 0 : pad_same;
    const std::int64_t cin = 1 + c % 3, cout = 1 + (c / 2) % 3;
    const std::int64_t s = std::max<std::int64_t>(7, l * (k - 1) + 1);
    auto in = random_tensor<double>({1 + c % 2, cin, s, s, s}, rng);
    auto kernel = random_tensor<double>({cout, cin, k, k, k}, rng);
    auto bias = random_tensor<double>({cout}, rng);
    auto fast = conv3d_forward(in, kernel, bias, l, pad);
    auto ref = naive_conv3d(in, kernel, bias, l, pad);
    REQUIRE(fast.shape == ref.shape);
    double max_diff = 0;
    for (std::int64_t i = 0; i < fast.size(); ++i)
      max_diff = std::max(max_diff, std::abs(fast.values[i] - ref.values[i]));
    CHECK(max_diff <= 1e-12);
  }
}

TEST_CASE("conv3d: l=1 dilation is ordinary convolution") {
  Rng rng(7);
  auto in = random_tensor<double>({1, 2, 6, 6, 6}, rng);
  auto kernel = random_tensor<double>({2, 2, 3, 3, 3}, rng);
  auto bias = random_tensor<double>({2}, rng);
  // oracle with l=1 IS the plain triple sum; equality pins the
  // specialization
  auto a = conv3d_forward(in, kernel, bias, 1, 1);
  auto b = naive_conv3d(in, kernel, bias, 1, 1);
  for (std::int64_t i = 0; i < a.size(); ++i)
    CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-13));
}

TEST_CASE("conv3d: size preservation for every atlas layer configuration") {
  Rng rng(3);
  const int dil[] = {1, 1, 1, 2, 4, 8, 1};
  for (int i = 0; i < 7; ++i) {
    auto in = random_tensor<double>({1, 1, 20, 20, 20}, rng);
    auto kernel = random_tensor<double>({1, 1, 3, 3, 3}, rng);
    Tensor<double> bias({1});
    auto out = conv3d_forward(in, kernel, bias, dil[i], dil[i]);
    CHECK(out.shape == in.shape);
  }
}

TEST_CASE("conv3d: effective span larger than padded input is an error") {
  Tensor<double> in({1, 1, 5, 5, 5});
  Tensor<double> kernel({1, 1, 3, 3, 3});
  Tensor<double> bias({1});
  CHECK_THROWS_AS(conv3d_forward(in, kernel, bias, 4, 0), ShapeError);
  Tensor<double> wrong_ch({1, 2, 5, 5, 5});
  CHECK_THROWS_AS(conv3d_forward(wrong_ch, kernel, bias, 1, 1), ShapeError);
}

TEST_CASE("batchnorm: standardized input passes through in infer mode") {
  Rng rng(5);
  Tensor<double> in({2, 3, 4, 4, 4});
  for (auto& v : in.values) v = rng.normal();
  Tensor<double> gamma({3}), beta({3}), rm({3}), rv({3});
  std::fill(gamma.values.begin(), gamma.values.end(), 1.0);
  std::fill(rv.values.begin(), rv.values.end(), 1.0);
  auto out = batchnorm_infer(in, gamma, beta, rm, rv, 1e-12);
  for (std::int64_t i = 0; i < in.size(); ++i)
    CHECK(out.values[i] == doctest::Approx(in.values[i]).epsilon(1e-6));
}

TEST_CASE("batchnorm: infer mode matches the scalar formula") {
  Rng rng(6);
  auto in = random_tensor<double>({1, 2, 3, 3, 3}, rng);
  Tensor<double> gamma({2}), beta({2}), rm({2}), rv({2});
  gamma.values = {2.0, 2.0};
  beta.values = {3.0, 3.0};
  rm.values = {0.25, -0.5};
  rv.values = {1.5, 0.75};
  const double eps = 1e-5;
  auto out = batchnorm_infer(in, gamma, beta, rm, rv, eps);
  const std::int64_t slab = 27;
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t i = 0; i < slab; ++i) {
      const double x = in.values[c * slab + i];
      const double want =
          2.0 * (x - rm.values[c]) / std::sqrt(rv.values[c] + eps) + 3.0;
      CHECK(out.values[c * slab + i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("batchnorm: train mode standardizes each channel") {
  Rng rng(8);
  Tensor<double> in({2, 4, 5, 5, 5});
  for (auto& v : in.values) v = rng.normal(3.0, 2.5);
  Tensor<double> gamma({4}), beta({4}), rm({4}), rv({4});
  std::fill(gamma.values.begin(), gamma.values.end(), 1.0);
  std::fill(rv.values.begin(), rv.values.end(), 1.0);
  auto out = batchnorm_forward(in, gamma, beta, rm, rv, 1e-12, 0.1, true);
  const std::int64_t slab = 125;
  for (std::int64_t c = 0; c < 4; ++c) {
    double mean = 0, var = 0;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < slab; ++i)
        mean += out.values[(n * 4 + c) * slab + i];
    mean /= 2 * slab;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < slab; ++i) {
        const double d = out.values[(n * 4 + c) * slab + i] - mean;
        var += d * d;
      }
    var /= 2 * slab;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
    // running stats moved toward the batch stats
    CHECK(rm.values[c] != 0.0);
  }
}

TEST_CASE("batchnorm: zero-variance channel is tamed by eps") {
  Tensor<double> in({1, 1, 2, 2, 2});
  std::fill(in.values.begin(), in.values.end(), 5.0);
  Tensor<double> gamma({1}), beta({1}), rm({1}), rv({1});
  gamma.values[0] = 1.0;
  auto out = batchnorm_forward(in, gamma, beta, rm, rv, 1e-5, 0.1, true);
  for (auto v : out.values) CHECK(std::isfinite(v));
}

TEST_CASE("relu") {
  Tensor<double> in({1, 1, 1, 1, 3});
  in.values = {-1.0, 0.0, 2.0};
  auto out = relu_forward(in);
  CHECK(out.values == std::vector<double>{0.0, 0.0, 2.0});

  Rng rng(9);
  auto r = random_tensor<double>({1, 2, 3, 3, 3}, rng);
  auto once = relu_forward(r);
  auto twice = relu_forward(once);
  CHECK(once.values == twice.values);

  Tensor<double> neg({1, 1, 1, 1, 4});
  neg.values = {-3, -2, -1, -0.5};
  auto z = relu_forward(neg);
  for (auto v : z.values) CHECK(v == 0.0);
}

TEST_CASE("dropout3d: identity cases") {
  Rng rng(11);
  auto in = random_tensor<double>({2, 4, 3, 3, 3}, rng);
  Rng d1(1);
  auto out_p0 = dropout3d_forward(in, 0.0, true, d1);
  CHECK(out_p0.values == in.values);
  Rng d2(1);
  auto out_infer = dropout3d_forward(in, 0.25, false, d2);
  CHECK(out_infer.values == in.values);
  Rng d3(1);
  CHECK_THROWS_AS(dropout3d_forward(in, 1.0, true, d3), ConfigError);
}

TEST_CASE("dropout3d: channel-granular masking at the binomial rate") {
  // 71 channels x many trials; count zeroed channels and check no partial
  // channel ever occurs
  const int channels = 71, trials = 10000;
  Tensor<double> in({1, channels, 2, 2, 2});
  std::fill(in.values.begin(), in.values.end(), 1.0);
  Rng rng(123);
  std::int64_t zeroed = 0;
  for (int t = 0; t < trials / 100; ++t) {
    std::vector<double> mask;
    auto out = dropout3d_forward(in, 0.5, true, rng, &mask);
    for (int c = 0; c < channels; ++c) {
      int zero_vox = 0;
      for (int i = 0; i < 8; ++i) zero_vox += out.values[c * 8 + i] == 0.0;
      CHECK((zero_vox == 0 || zero_vox == 8));  // whole map or nothing
      if (zero_vox == 8) ++zeroed;
      if (zero_vox == 0)
        CHECK(out.values[c * 8] == doctest::Approx(2.0));  // 1/(1-p)
    }
  }
  const double frac = static_cast<double>(zeroed) / (71.0 * trials / 100);
  CHECK(frac == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("logsoftmax: symmetry, normalization, extreme logits") {
  Tensor<double> two({1, 2, 1, 1, 1});
  two.values = {0.0, 0.0};
  auto out = logsoftmax_forward(two);
  CHECK(out.values[0] == doctest::Approx(-std::log(2.0)));
  CHECK(out.values[1] == doctest::Approx(-std::log(2.0)));

  Rng rng(13);
  auto r = random_tensor<double>({2, 5, 3, 3, 3}, rng, -4, 4);
  auto lp = logsoftmax_forward(r);
  const std::int64_t slab = 27;
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < slab; ++i) {
      double sum = 0;
      for (std::int64_t c = 0; c < 5; ++c) {
        const double v = lp.values[(n * 5 + c) * slab + i];
        CHECK(v <= 0.0);
        sum += std::exp(v);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }

  Tensor<double> hot({1, 2, 1, 1, 1});
  hot.values = {1000.0, 0.0};
  auto stable = logsoftmax_forward(hot);
  CHECK(std::isfinite(stable.values[0]));
  CHECK(stable.values[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(stable.values[1] == doctest::Approx(-1000.0).epsilon(1e-12));
}

TEST_CASE("cross_entropy: perfect, uniform, and loop-oracle cases") {
  // perfect prediction: logprob 0 at the true class
  Tensor<double> lp({1, 2, 1, 1, 2});
  lp.values = {0.0, 0.0, -50.0, -50.0};  // class 0 at both voxels
  Tensor<std::int32_t> y({1, 1, 1, 2});
  y.values = {0, 0};
  CHECK(cross_entropy_forward(lp, y) == doctest::Approx(0.0));

  // uniform over 50 classes
  const int C = 50;
  Tensor<double> uni({1, C, 1, 1, 1});
  std::fill(uni.values.begin(), uni.values.end(), 0.0);
  auto ulp = logsoftmax_forward(uni);
  Tensor<std::int32_t> y1({1, 1, 1, 1});
  y1.values = {17};
  CHECK(cross_entropy_forward(ulp, y1) ==
        doctest::Approx(std::log(50.0)).epsilon(1e-12));

  // random case vs a per-voxel scalar loop
  Rng rng(17);
  auto logits = oracles::random_tensor<double>({2, 4, 3, 3, 3}, rng);
  auto lpr = logsoftmax_forward(logits);
  Tensor<std::int32_t> yr({2, 3, 3, 3});
  for (auto& v : yr.values) v = static_cast<std::int32_t>(rng.below(4));
  double want = 0;
  const std::int64_t slab = 27;
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t i = 0; i < slab; ++i)
      want -= lpr.values[(n * 4 + yr.values[n * slab + i]) * slab + i];
  want /= 2 * slab;
  CHECK(cross_entropy_forward(lpr, yr) == doctest::Approx(want).epsilon(1e-10));

  // out-of-range label
  Tensor<std::int32_t> bad({1, 1, 1, 1});
  bad.values = {4};
  Tensor<double> lp1({1, 2, 1, 1, 1});
  CHECK_THROWS_AS(cross_entropy_forward(lp1, bad), ShapeError);
}

TEST_SUITE_END();
