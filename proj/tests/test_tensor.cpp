#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "castnet/gradcheck.hpp"
#include "castnet/kernels.hpp"
#include "reference_ops.hpp"

using namespace castnet;
using castnet::oracle::random_vector;

namespace {

Tensor<double> ramp3x3() { return Tensor<double>({1, 3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9}); }

ConvParams<double> ones_kernel(std::size_t k, Padding pad) {
  return ConvParams<double>{Tensor<double>({k, k, 1, 1}, 1.0), {0.0}, 1, pad};
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  Tensor<float> t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  t.at(1, 2, 3, 4) = 7.f;
  EXPECT_EQ(t[((1 * 3 + 2) * 4 + 3) * 5 + 4], 7.f);
}

TEST(Conv2d, TwoByTwoOnesKernelValid) {
  const auto out = conv2d_forward(ramp3x3(), ones_kernel(2, Padding::valid));
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(out.vec(), (std::vector<double>{12, 16, 24, 28}));
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  std::mt19937_64 rng(3);
  Tensor<double> in({2, 5, 4, 1}, random_vector(40, rng));
  const auto out = conv2d_forward(in, ones_kernel(1, Padding::valid));
  EXPECT_EQ(out, in);
}

TEST(Conv2d, SamePaddingSinglePixel) {
  Tensor<double> in({1, 1, 1, 1}, {5});
  const auto out = conv2d_forward(in, ones_kernel(3, Padding::same));
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out[0], 5.0);
}

TEST(Conv2d, Errors) {
  Tensor<double> in({1, 3, 3, 2});
  EXPECT_THROW(conv2d_forward(in, ones_kernel(2, Padding::valid)), ShapeError);  // Cin mismatch
  auto p = ones_kernel(2, Padding::valid);
  p.stride = 0;
  EXPECT_THROW(conv2d_forward(ramp3x3(), p), ShapeError);
  EXPECT_THROW(conv2d_forward(ramp3x3(), ones_kernel(5, Padding::valid)), ShapeError);
  auto bad_bias = ones_kernel(2, Padding::valid);
  bad_bias.bias = {0, 0};
  EXPECT_THROW(conv2d_forward(ramp3x3(), bad_bias), ShapeError);
}

TEST(Conv2d, MatchesNaiveReferenceOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> hw(3, 16), ch(1, 4), st(1, 2);
    oracle::NaiveConvCase cs{2, hw(rng), hw(rng), ch(rng), 3, ch(rng), st(rng), seed % 2 == 0};
    auto in = random_vector<float>(cs.n * cs.h * cs.w * cs.cin, rng);
    auto ker = random_vector<float>(9 * cs.cin * cs.cout, rng);
    auto bias = random_vector<float>(cs.cout, rng);
    const ConvParams<float> p{Tensor<float>({3, 3, cs.cin, cs.cout}, ker), bias, cs.stride,
                              cs.same ? Padding::same : Padding::valid};
    const auto out = conv2d_forward(Tensor<float>({cs.n, cs.h, cs.w, cs.cin}, in), p);
    std::size_t oh = 0, ow = 0;
    const auto ref = oracle::naive_conv(cs, {in.begin(), in.end()}, {ker.begin(), ker.end()},
                                         {bias.begin(), bias.end()}, oh, ow);
    ASSERT_EQ(out.shape(), (Shape{cs.n, oh, ow, cs.cout}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-5) << "seed " << seed;
  }
}

TEST(Conv2d, SamePaddingPreservesSpatialDims) {
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    Tensor<float> in({1, 9, 6, 2});
    ConvParams<float> p{Tensor<float>({k, k, 2, 3}), {0, 0, 0}, 1, Padding::same};
    EXPECT_EQ(conv2d_forward(in, p).shape(), (Shape{1, 9, 6, 3}));
  }
}

TEST(Conv2dBackward, ZeroCotangent) {
  const auto p = ones_kernel(2, Padding::valid);
  const auto g = conv2d_backward(ramp3x3(), p, Tensor<double>({1, 2, 2, 1}));
  for (double v : g.input.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.kernels.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.bias, std::vector<double>{0.0});
}

TEST(Conv2dBackward, IdentityKernelPassesGradient) {
  std::mt19937_64 rng(1);
  Tensor<double> in({1, 4, 4, 1}, random_vector(16, rng));
  Tensor<double> go({1, 4, 4, 1}, random_vector(16, rng));
  EXPECT_EQ(conv2d_backward(in, ones_kernel(1, Padding::valid), go).input, go);
}

TEST(Conv2dBackward, OnesCotangentOnRamp) {
  const auto g = conv2d_backward(ramp3x3(), ones_kernel(2, Padding::valid), Tensor<double>({1, 2, 2, 1}, 1.0));
  EXPECT_EQ(g.bias, std::vector<double>{4.0});
  EXPECT_EQ(g.kernels.vec(), (std::vector<double>{12, 16, 24, 28}));
  // finite-difference oracle on the kernel taps (h = 1e-3)
  const Tensor<double> ones({1, 2, 2, 1}, 1.0);
  for (std::size_t t = 0; t < 4; ++t) {
    auto plus = ones_kernel(2, Padding::valid), minus = plus;
    plus.kernels[t] += 1e-3;
    minus.kernels[t] -= 1e-3;
    const double fd = (dot(conv2d_forward(ramp3x3(), plus).data(), ones.data()) -
                       dot(conv2d_forward(ramp3x3(), minus).data(), ones.data())) /
                      2e-3;
    EXPECT_NEAR(fd, g.kernels[t], 1e-9);
  }
}

TEST(Conv2dBackward, RejectsMismatchedCotangent) {
  EXPECT_THROW(conv2d_backward(ramp3x3(), ones_kernel(2, Padding::valid), Tensor<double>({1, 3, 3, 1})), ShapeError);
}

TEST(MaxPool, Examples) {
  const auto r = maxpool2d(Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(r.output.vec(), std::vector<double>{4});
  std::vector<double> ramp(16);
  std::iota(ramp.begin(), ramp.end(), 1.0);
  const auto r4 = maxpool2d(Tensor<double>({1, 4, 4, 1}, ramp), 2, 2);
  EXPECT_EQ(r4.output.vec(), (std::vector<double>{6, 8, 14, 16}));
  const auto rc = maxpool2d(Tensor<double>({1, 4, 6, 2}, 3.5), 2, 2);
  for (double v : rc.output.data()) EXPECT_EQ(v, 3.5);
  EXPECT_THROW(maxpool2d(Tensor<double>({1, 2, 2, 1}), 3, 1), ShapeError);
}

TEST(MaxPool, MatchesNaiveReference) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    std::uniform_int_distribution<std::size_t> hw(2, 16), ch(1, 4), win(1, 2);
    const std::size_t h = hw(rng), w = hw(rng), c = ch(rng), k = win(rng);
    auto in = random_vector(2 * h * w * c, rng);
    const auto out = maxpool2d(Tensor<double>({2, h, w, c}, in), k, k);
    EXPECT_EQ(out.output.vec(), oracle::naive_maxpool(in, 2, h, w, c, k, k));
  }
}

TEST(MaxPoolBackward, RoutesToArgmax) {
  const auto r = maxpool2d(Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(maxpool2d_backward(r.index, Tensor<double>({1, 1, 1, 1}, {2.5})).vec(),
            (std::vector<double>{0, 0, 0, 2.5}));
  EXPECT_EQ(maxpool2d_backward(r.index, Tensor<double>({1, 1, 1, 1})).vec(), (std::vector<double>{0, 0, 0, 0}));
}

TEST(MaxPoolBackward, TiesGoToFirstElement) {
  const auto r = maxpool2d(Tensor<double>({1, 2, 2, 1}, 7.0), 2, 2);
  EXPECT_EQ(maxpool2d_backward(r.index, Tensor<double>({1, 1, 1, 1}, {1.0})).vec(),
            (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPoolBackward, ConservesMassAndRejectsStaleIndex) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto r = maxpool2d(Tensor<double>({2, 6, 6, 3}, random_vector(216, rng)), 2, 2);
    // dyadic cotangents so the sums are exact regardless of order
    std::vector<double> g(r.output.size());
    for (auto& v : g) v = std::ldexp(static_cast<double>(rng() % 1000), -6);
    const auto gi = maxpool2d_backward(r.index, Tensor<double>(r.output.shape(), g));
    EXPECT_EQ(std::accumulate(gi.data().begin(), gi.data().end(), 0.0), std::accumulate(g.begin(), g.end(), 0.0));
  }
  const auto r = maxpool2d(Tensor<double>({1, 4, 4, 1}), 2, 2);
  EXPECT_THROW(maxpool2d_backward(r.index, Tensor<double>({1, 1, 1, 1})), ShapeError);
}

TEST(GlobalAvgPool, Examples) {
  EXPECT_EQ(global_avg_pool(Tensor<double>({1, 3, 3, 2}, 1.25)).vec(), (std::vector<double>{1.25, 1.25}));
  EXPECT_DOUBLE_EQ(global_avg_pool(Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4}))[0], 2.5);
  const Tensor<double> v({2, 1, 1, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(global_avg_pool(v).vec(), v.vec());
  const auto gi = global_avg_pool_backward({1, 2, 2, 1}, Tensor<double>({1, 1}, {4.0}));
  EXPECT_EQ(gi.vec(), (std::vector<double>{1, 1, 1, 1}));
}

TEST(GlobalAvgPool, StaysWithinChannelRange) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<double> t({1, 5, 7, 3}, random_vector(105, rng, -10, 10));
    const auto g = global_avg_pool(t);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t p = 0; p < 35; ++p) {
        lo = std::min(lo, t[p * 3 + c]);
        hi = std::max(hi, t[p * 3 + c]);
      }
      EXPECT_GE(g[c], lo);
      EXPECT_LE(g[c], hi);
    }
  }
}

TEST(Dense, Examples) {
  const Tensor<double> x({1, 3}, {1, 2, 3});
  const std::vector<double> b{0.5};
  EXPECT_DOUBLE_EQ(dense_forward(x, Tensor<double>({3, 1}, {1, 1, 1}), std::span<const double>(b))[0], 6.5);
  const Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<double> zb(3, 0.0);
  EXPECT_EQ(dense_forward(x, eye, std::span<const double>(zb)), x);
  const std::vector<double> bias{1, -2};
  EXPECT_EQ(dense_forward(Tensor<double>({2, 3}), Tensor<double>({3, 2}, 0.7), std::span<const double>(bias)).vec(),
            (std::vector<double>{1, -2, 1, -2}));
  EXPECT_THROW(dense_forward(x, Tensor<double>({2, 1}), std::span<const double>(b)), ShapeError);
}

TEST(Activation, Examples) {
  const Tensor<double> t({4}, {0.0, -3.0, 3.0, std::log(3.0)});
  const auto s = activation_forward(t, Activation::sigmoid);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_NEAR(s[3], 0.75, 1e-15);
  const auto r = activation_forward(t, Activation::relu);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 3.0);
  EXPECT_TRUE(std::isfinite(sigmoid(-1000.0)));
  EXPECT_TRUE(std::isfinite(sigmoid(1000.0)));
}

TEST(FiniteDifference, LinearDenseIsExact) {
  std::mt19937_64 rng(2);
  const auto w = random_vector(12, rng);
  const auto g = random_vector(3, rng);
  const std::vector<double> zero(3, 0.0);
  const Tensor<double> weights({4, 3}, w), cot({1, 3}, g);
  auto f = [&](std::span<const double> x) {
    return dot(dense_forward(Tensor<double>({1, 4}, {x.begin(), x.end()}), weights, std::span<const double>(zero)).data(),
               cot.data());
  };
  const auto x0 = random_vector(4, rng);
  const auto an = dense_backward(Tensor<double>({1, 4}, x0), weights, cot).input;
  EXPECT_LE(finite_difference_check(f, x0, an.data(), 1e-5), 1e-9);
}

// Every backward kernel against central differences, 10 seeds, 64-bit, h=1e-5.
class KernelGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(KernelGradients, ConvInputKernelsBias) {
  std::mt19937_64 rng(GetParam());
  const Shape xs{1, 8, 8, 2};
  const auto x0 = random_vector(128, rng);
  const auto k0 = random_vector(3 * 3 * 2 * 3, rng);
  const auto b0 = random_vector(3, rng);
  const Padding pad = GetParam() % 2 ? Padding::same : Padding::valid;
  const ConvParams<double> p{Tensor<double>({3, 3, 2, 3}, k0), b0, 1, pad};
  const Tensor<double> x(xs, x0);
  const auto out = conv2d_forward(x, p);
  const Tensor<double> cot(out.shape(), random_vector(out.size(), rng));
  const auto g = conv2d_backward(x, p, cot);

  auto fx = [&](std::span<const double> v) {
    return dot(conv2d_forward(Tensor<double>(xs, {v.begin(), v.end()}), p).data(), cot.data());
  };
  auto fk = [&](std::span<const double> v) {
    ConvParams<double> q = p;
    q.kernels = Tensor<double>({3, 3, 2, 3}, {v.begin(), v.end()});
    return dot(conv2d_forward(x, q).data(), cot.data());
  };
  auto fb = [&](std::span<const double> v) {
    ConvParams<double> q = p;
    q.bias.assign(v.begin(), v.end());
    return dot(conv2d_forward(x, q).data(), cot.data());
  };
  EXPECT_LE(finite_difference_check(fx, x0, g.input.data(), 1e-5), 1e-6);
  EXPECT_LE(finite_difference_check(fk, k0, g.kernels.data(), 1e-5), 1e-6);
  EXPECT_LE(finite_difference_check(fb, b0, g.bias, 1e-5), 1e-6);
}

TEST_P(KernelGradients, DenseWeightsAndInput) {
  std::mt19937_64 rng(GetParam());
  const auto x0 = random_vector(2 * 5, rng), w0 = random_vector(5 * 3, rng), b = random_vector(3, rng);
  const Tensor<double> cot({2, 3}, random_vector(6, rng));
  const auto g = dense_backward(Tensor<double>({2, 5}, x0), Tensor<double>({5, 3}, w0), cot);
  auto fx = [&](std::span<const double> v) {
    return dot(dense_forward(Tensor<double>({2, 5}, {v.begin(), v.end()}), Tensor<double>({5, 3}, w0),
                             std::span<const double>(b))
                   .data(),
               cot.data());
  };
  auto fw = [&](std::span<const double> v) {
    return dot(dense_forward(Tensor<double>({2, 5}, x0), Tensor<double>({5, 3}, {v.begin(), v.end()}),
                             std::span<const double>(b))
                   .data(),
               cot.data());
  };
  EXPECT_LE(finite_difference_check(fx, x0, g.input.data(), 1e-5), 1e-4);
  EXPECT_LE(finite_difference_check(fw, w0, g.weights.data(), 1e-5), 1e-4);
}

TEST_P(KernelGradients, PoolingAndActivations) {
  std::mt19937_64 rng(GetParam());
  const Shape xs{1, 6, 6, 2};
  const auto x0 = random_vector(72, rng);
  const Tensor<double> x(xs, x0);

  const auto pr = maxpool2d(x, 2, 2);
  const Tensor<double> pcot(pr.output.shape(), random_vector(pr.output.size(), rng));
  auto fp = [&](std::span<const double> v) {
    return dot(maxpool2d(Tensor<double>(xs, {v.begin(), v.end()}), 2, 2).output.data(), pcot.data());
  };
  EXPECT_LE(finite_difference_check(fp, x0, maxpool2d_backward(pr.index, pcot).data(), 1e-5), 1e-4);

  const Tensor<double> gcot({1, 2}, random_vector(2, rng));
  auto fg = [&](std::span<const double> v) {
    return dot(global_avg_pool(Tensor<double>(xs, {v.begin(), v.end()})).data(), gcot.data());
  };
  EXPECT_LE(finite_difference_check(fg, x0, global_avg_pool_backward(xs, gcot).data(), 1e-5), 1e-4);

  const Tensor<double> acot(xs, random_vector(72, rng));
  for (Activation kind : {Activation::relu, Activation::sigmoid}) {
    auto fa = [&](std::span<const double> v) {
      return dot(activation_forward(Tensor<double>(xs, {v.begin(), v.end()}), kind).data(), acot.data());
    };
    const auto y = activation_forward(x, kind);
    EXPECT_LE(finite_difference_check(fa, x0, activation_backward(x, y, acot, kind).data(), 1e-5), 1e-4);
  }
}

TEST_P(KernelGradients, BatchNormTraining) {
  std::mt19937_64 rng(GetParam());
  const Shape xs{2, 3, 3, 4};
  const auto x0 = random_vector(72, rng, -2, 2);
  const auto gamma = random_vector(4, rng, 0.5, 1.5), beta = random_vector(4, rng);
  const std::vector<double> mm(4, 0.0), mv(4, 1.0);
  const BatchNormParams<double> p{gamma, beta, mm, mv, 1e-3};
  const Tensor<double> cot(xs, random_vector(72, rng));
  BatchNormCache<double> cache;
  batchnorm_training(Tensor<double>(xs, x0), p, cache);
  const auto g = batchnorm_backward(cache, std::span<const double>(gamma), cot);
  auto fx = [&](std::span<const double> v) {
    BatchNormCache<double> c;
    return dot(batchnorm_training(Tensor<double>(xs, {v.begin(), v.end()}), p, c).data(), cot.data());
  };
  auto fgam = [&](std::span<const double> v) {
    BatchNormCache<double> c;
    const BatchNormParams<double> q{v, beta, mm, mv, 1e-3};
    return dot(batchnorm_training(Tensor<double>(xs, x0), q, c).data(), cot.data());
  };
  EXPECT_LE(finite_difference_check(fx, x0, g.input.data(), 1e-5), 1e-4);
  EXPECT_LE(finite_difference_check(fgam, gamma, g.gamma, 1e-5), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, KernelGradients, ::testing::Range<std::uint64_t>(0, 10));
