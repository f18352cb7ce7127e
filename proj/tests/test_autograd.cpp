#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "phasefuse/gradcheck.hpp"
#include "phasefuse/gradsuite.hpp"
#include "phasefuse/ops.hpp"

using namespace phasefuse;

namespace {

// Direct zero-padded cross-correlation, independent of the im2col path.
tensord dense_conv(const tensord& x, const tensord& w, const tensord& b) {
  const std::size_t B = x.dim(0), ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t co = w.dim(0), kz = w.dim(2), ky = w.dim(3), kx = w.dim(4);
  tensord out({B, co, D, H, W});
  auto X = [&](std::size_t n, std::size_t c, long z, long y, long xx) -> double {
    if (z < 0 || y < 0 || xx < 0 || z >= long(D) || y >= long(H) || xx >= long(W)) return 0.0;
    return x.data()[(((n * ci + c) * D + std::size_t(z)) * H + std::size_t(y)) * W + std::size_t(xx)];
  };
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t xx = 0; xx < W; ++xx) {
            double acc = b.defined() ? b.data()[o] : 0.0;
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t a = 0; a < kz; ++a)
                for (std::size_t e = 0; e < ky; ++e)
                  for (std::size_t f = 0; f < kx; ++f)
                    acc += w.data()[(((o * ci + c) * kz + a) * ky + e) * kx + f] *
                           X(n, c, long(z + a) - long(kz / 2), long(y + e) - long(ky / 2), long(xx + f) - long(kx / 2));
            out.data()[(((n * co + o) * D + z) * H + y) * W + xx] = acc;
          }
  return out;
}

// Sub-pixel rule: output voxel (r*z+i, r*y+j, r*x+k) of channel c reads input
// channel c*r^3 + (i*r + j)*r + k at (z, y, x).
double shuffle_oracle(const tensord& x, std::size_t r, std::size_t n, std::size_t c, std::size_t Z, std::size_t Y, std::size_t X) {
  const std::size_t C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t ch = c * r * r * r + ((Z % r) * r + (Y % r)) * r + (X % r);
  return x.data()[(((n * C + ch) * D + Z / r) * H + Y / r) * W + X / r];
}

// Align-corners-false linear interpolation along one axis.
void linear_weights(std::size_t o, std::size_t r, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
  double src = (double(o) + 0.5) / double(r) - 0.5;
  if (src < 0) src = 0;
  i0 = std::min<std::size_t>(std::size_t(std::floor(src)), n - 1);
  i1 = std::min(i0 + 1, n - 1);
  t = src - double(i0);
}

template <class F>
void expect_gradcheck(F f, std::vector<tensord> in, double tol, std::vector<std::string> names = {}) {
  grad_check_options o;
  o.tol = tol;
  const auto r = grad_check(f, std::move(in), o, names);
  EXPECT_TRUE(r.passed) << r.summary();
}

}  // namespace

TEST(Conv3d, PointwiseIdentity) {
  const auto x = random_tensor<double>({2, 1, 3, 4, 5}, 1);
  const tensord w({1, 1, 1, 1, 1}, 1.0), b({1}, 0.0);
  const auto y = conv3d(x, w, b);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), x.data().begin()));
}

TEST(Conv3d, OnesKernelOnConstant) {
  const tensorf x({1, 1, 5, 5, 5}, 0.3f), w({1, 1, 3, 3, 3}, 1.f), b({1}, 0.f);
  const auto y = conv3d(x, w, b);
  for (std::size_t z = 1; z < 4; ++z)
    for (std::size_t yy = 1; yy < 4; ++yy)
      for (std::size_t xx = 1; xx < 4; ++xx) EXPECT_NEAR(y.data()[(z * 5 + yy) * 5 + xx], 27 * 0.3f, 1e-5);
  EXPECT_NEAR(y.data()[0], 8 * 0.3f, 1e-6);  // corner sees 2x2x2 of the input
}

TEST(Conv3d, MatchesDenseOracle) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto x = random_tensor<double>({2, 3, 4, 5, 6}, 10 + s);
    const auto w = random_tensor<double>({4, 3, 3, 1, 5}, 20 + s);
    const auto b = random_tensor<double>({4}, 30 + s);
    const auto y = conv3d(x, w, b), ref = dense_conv(x, w, b);
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y.data()[i], ref.data()[i], 1e-12);
    const auto y2 = conv3d(x, w), ref2 = dense_conv(x, w, {});
    for (std::size_t i = 0; i < y2.numel(); ++i) ASSERT_NEAR(y2.data()[i], ref2.data()[i], 1e-12);
  }
}

TEST(Conv3d, RejectsBadShapes) {
  const tensorf x({1, 2, 4, 4, 4});
  EXPECT_THROW(conv3d(x, tensorf({1, 3, 3, 3, 3})), data_error);
  EXPECT_THROW(conv3d(x, tensorf({1, 2, 2, 3, 3})), data_error);
  EXPECT_THROW(conv3d(x, tensorf({1, 2, 3, 3, 3}), tensorf({2})), data_error);
}

TEST(Conv3d, GradCheck) {
  for (std::uint64_t s = 0; s < 3; ++s)
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(conv3d(in[0], in[1], in[2]), 99 + s); },
                     {random_tensor<double>({1, 2, 4, 4, 4}, s, true), random_tensor<double>({3, 2, 3, 3, 3}, 5 + s, true),
                      random_tensor<double>({3}, 7 + s, true)},
                     1e-4, {"x", "weight", "bias"});
}

TEST(LeakyRelu, ValuesAndGrad) {
  const tensorf x({3}, std::vector<float>{-1.f, 0.f, 2.f}, true);
  auto y = leaky_relu(x);
  EXPECT_FLOAT_EQ(y.data()[0], -0.2f);
  EXPECT_FLOAT_EQ(y.data()[1], 0.f);
  EXPECT_FLOAT_EQ(y.data()[2], 2.f);
  auto l = sum(y);
  backward(l);
  EXPECT_FLOAT_EQ(x.grad()[0], 0.2f);
  EXPECT_FLOAT_EQ(x.grad()[1], 1.f);
  EXPECT_FLOAT_EQ(x.grad()[2], 1.f);
  for (std::uint64_t s = 0; s < 3; ++s)
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(leaky_relu(in[0]), s); },
                     {random_tensor<double>({2, 3, 3, 3, 3}, s, true, 0.01)}, 1e-4);
}

TEST(Elementwise, GradChecks) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto a = random_tensor<double>({1, 2, 3, 3, 3}, s, true), b = random_tensor<double>({1, 2, 3, 3, 3}, s + 50, true);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(add(in[0], in[1]), s); }, {a, b}, 1e-4);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(mul(in[0], in[1]), s); }, {a, b}, 1e-4);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(scale(in[0], -1.7), s); }, {a}, 1e-4);
  }
}

TEST(Concat, IdentityCountAndSumGrad) {
  const auto a = random_tensor<float>({2, 3, 2, 2, 2}, 1, true);
  const auto one = concat_channels<float>({a});
  EXPECT_TRUE(std::equal(one.data().begin(), one.data().end(), a.data().begin()));
  const auto b = random_tensor<float>({2, 3, 2, 2, 2}, 2, true), c = random_tensor<float>({2, 3, 2, 2, 2}, 3, true);
  auto cat = concat_channels<float>({a, b, c});
  EXPECT_EQ(cat.shape(), (shape_t{2, 9, 2, 2, 2}));
  // Second batch item, channel 4 = channel 1 of b.
  EXPECT_EQ(cat.data()[(1 * 9 + 4) * 8 + 5], b.data()[(1 * 3 + 1) * 8 + 5]);
  auto l = sum(cat);
  backward(l);
  for (const auto* t : {&a, &b, &c})
    for (float g : t->grad()) EXPECT_EQ(g, 1.f);
  EXPECT_THROW(concat_channels<float>({a, tensorf({2, 3, 2, 2, 3})}), data_error);
  EXPECT_THROW(concat_channels<float>({}), data_error);
}

TEST(Concat, SliceGradChecks) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(concat_channels(in), s); },
                     {random_tensor<double>({2, 1, 2, 3, 2}, s, true), random_tensor<double>({2, 2, 2, 3, 2}, s + 1, true)}, 1e-4);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(slice_channels(in[0], 1, 2), s); },
                     {random_tensor<double>({2, 4, 2, 2, 2}, s, true)}, 1e-4);
  }
}

TEST(VoxelShuffle, IdentityShapeAndMultiset) {
  const auto x = random_tensor<double>({1, 8, 2, 2, 2}, 4);
  const auto same = voxel_shuffle(x, 1);
  EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  const auto y = voxel_shuffle(x, 2);
  EXPECT_EQ(y.shape(), (shape_t{1, 1, 4, 4, 4}));
  std::vector<double> a(x.data().begin(), x.data().end()), b(y.data().begin(), y.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  EXPECT_THROW(voxel_shuffle(random_tensor<double>({1, 6, 2, 2, 2}, 1), 2), data_error);
}

TEST(VoxelShuffle, MatchesSubPixelRule) {
  const auto x = random_tensor<double>({2, 2 * 27, 2, 3, 2}, 6);
  const auto y = voxel_shuffle(x, 3);
  ASSERT_EQ(y.shape(), (shape_t{2, 2, 6, 9, 6}));
  std::size_t i = 0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t z = 0; z < 6; ++z)
        for (std::size_t yy = 0; yy < 9; ++yy)
          for (std::size_t xx = 0; xx < 6; ++xx) ASSERT_EQ(y.data()[i++], shuffle_oracle(x, 3, n, c, z, yy, xx));
}

TEST(VoxelShuffle, InverseAndGrad) {
  const auto x = random_tensor<double>({2, 16, 2, 3, 2}, 7);
  const auto back = voxel_unshuffle(voxel_shuffle(x, 2), 2);
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), x.data().begin()));
  const auto v = random_tensor<double>({1, 1, 4, 6, 2}, 8);
  const auto fwd = voxel_shuffle(voxel_unshuffle(v, 2), 2);
  EXPECT_TRUE(std::equal(fwd.data().begin(), fwd.data().end(), v.data().begin()));
  for (std::uint64_t s = 0; s < 3; ++s)
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(voxel_shuffle(in[0], 2), s); },
                     {random_tensor<double>({1, 8, 2, 2, 2}, s, true)}, 1e-4);
}

TEST(VoxelShuffle, BackwardIsInversePermutation) {
  const auto x = random_tensor<double>({1, 8, 2, 2, 2}, 1, true);
  auto y = voxel_shuffle(x, 2);
  const auto w = random_tensor<double>(y.shape(), 2);
  auto l = sum(mul(y, w));
  backward(l);
  const auto expect = voxel_unshuffle(w, 2);
  EXPECT_TRUE(std::equal(x.grad().begin(), x.grad().end(), expect.data().begin()));
}

TEST(Upsample, IdentityConstantAndOracle) {
  const auto x = random_tensor<double>({1, 2, 3, 4, 2}, 2);
  const auto one = trilinear_upsample(x, 1);
  EXPECT_TRUE(std::equal(one.data().begin(), one.data().end(), x.data().begin()));
  const tensord c({1, 1, 3, 3, 3}, 0.7);
  const auto up = trilinear_upsample(c, 4);
  for (double v : up.data()) EXPECT_NEAR(v, 0.7, 1e-15);

  const std::size_t r = 3;
  const auto y = trilinear_upsample(x, r);
  ASSERT_EQ(y.shape(), (shape_t{1, 2, 9, 12, 6}));
  auto X = [&](std::size_t ch, std::size_t z, std::size_t yy, std::size_t xx) { return x.data()[((ch * 3 + z) * 4 + yy) * 2 + xx]; };
  std::size_t i = 0;
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t z = 0; z < 9; ++z)
      for (std::size_t yy = 0; yy < 12; ++yy)
        for (std::size_t xx = 0; xx < 6; ++xx) {
          std::size_t z0, z1, y0, y1, x0, x1;
          double tz, ty, tx;
          linear_weights(z, r, 3, z0, z1, tz);
          linear_weights(yy, r, 4, y0, y1, ty);
          linear_weights(xx, r, 2, x0, x1, tx);
          double v = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int c2 = 0; c2 < 2; ++c2)
                v += (a ? tz : 1 - tz) * (b ? ty : 1 - ty) * (c2 ? tx : 1 - tx) * X(ch, a ? z1 : z0, b ? y1 : y0, c2 ? x1 : x0);
          ASSERT_NEAR(y.data()[i++], v, 1e-12);
        }
}

TEST(Upsample, GradChecks) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(trilinear_upsample(in[0], 2), s); },
                     {random_tensor<double>({1, 2, 2, 3, 2}, s, true)}, 1e-4);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(trilinear_resize(in[0], {5, 2, 7}), s); },
                     {random_tensor<double>({2, 1, 3, 4, 3}, s, true)}, 1e-4);
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(subsample(in[0], 2), s); },
                     {random_tensor<double>({1, 2, 3, 4, 5}, s, true)}, 1e-4);
  }
}

TEST(L1, ValuesAndSubgradient) {
  const auto a = random_tensor<double>({1, 1, 3, 3, 3}, 1, true);
  EXPECT_EQ(l1_loss(a, a).item(), 0.0);
  EXPECT_NEAR(l1_loss(tensord({1, 1, 2, 2, 2}, 0.5), tensord({1, 1, 2, 2, 2}, 0.6)).item(), 0.1, 1e-12);
  const auto b = random_tensor<double>({1, 1, 3, 3, 3}, 2);
  auto l = l1_loss(a, b);
  backward(l);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    EXPECT_EQ(a.grad()[i], (d > 0 ? 1.0 : -1.0) / 27.0);
  }
  const tensord t({2}, 1.0, true);
  auto tie = l1_loss(t, tensord({2}, 1.0));
  backward(tie);
  EXPECT_EQ(t.grad()[0], 0.0);
  EXPECT_THROW(l1_loss(tensord({2}), tensord({3})), data_error);
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto target = random_tensor<double>({1, 1, 3, 3, 3}, 100 + s);
    auto pred = random_tensor<double>({1, 1, 3, 3, 3}, 200 + s, true);
    // Keep every difference well away from the kink.
    for (std::size_t i = 0; i < pred.numel(); ++i)
      if (std::fabs(pred.data()[i] - target.data()[i]) < 0.01) pred.data()[i] += 0.05;
    expect_gradcheck([target](const std::vector<tensord>& in) { return l1_loss(in[0], target); }, {pred}, 1e-4);
  }
}

TEST(Attention, ZeroProjectionsGiveUniformWeights) {
  const std::size_t c = 3, inner = 2;
  auto x = random_tensor<double>({1, c, 2, 3, 2}, 1);
  nonlocal_params<double> p{tensord({inner, c, 1, 1, 1}, 0.0), tensord({inner}, 0.0), tensord({inner, c, 1, 1, 1}, 0.0),
                            tensord({inner}, 0.0), random_tensor<double>({inner, c, 1, 1, 1}, 2), random_tensor<double>({inner}, 3),
                            random_tensor<double>({c, inner, 1, 1, 1}, 4), random_tensor<double>({c}, 5)};
  const auto theta = conv3d(x, p.theta_w, p.theta_b), phi = conv3d(x, p.phi_w, p.phi_b);
  const std::size_t P = 12;
  for (double w : attention_weights(theta, phi)) EXPECT_NEAR(w, 1.0 / P, 1e-15);
  // Output = x + W_out * mean_k g(x)[:, k] + b_out at every position.
  const auto g = conv3d(x, p.g_w, p.g_b);
  std::vector<double> gm(inner, 0.0);
  for (std::size_t i = 0; i < inner; ++i)
    for (std::size_t k = 0; k < P; ++k) gm[i] += g.data()[i * P + k] / P;
  const auto y = nonlocal_attention(x, p, 4096);
  for (std::size_t o = 0; o < c; ++o) {
    double r = p.out_b.data()[o];
    for (std::size_t i = 0; i < inner; ++i) r += p.out_w.data()[o * inner + i] * gm[i];
    for (std::size_t k = 0; k < P; ++k) EXPECT_NEAR(y.data()[o * P + k], x.data()[o * P + k] + r, 1e-12);
  }
}

TEST(Attention, RowsSumToOneAndBudget) {
  const auto q = random_tensor<float>({1, 4, 3, 3, 3}, 1, false, 0, 3.0), k = random_tensor<float>({1, 4, 3, 3, 3}, 2, false, 0, 3.0);
  const auto w = attention_weights(q, k);
  for (std::size_t r = 0; r < 27; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 27; ++j) s += w[r * 27 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  nonlocal_params<float> p{tensorf({1, 2, 1, 1, 1}), tensorf({1}), tensorf({1, 2, 1, 1, 1}), tensorf({1}),
                           tensorf({1, 2, 1, 1, 1}), tensorf({1}), tensorf({2, 1, 1, 1, 1}), tensorf({2})};
  EXPECT_THROW(nonlocal_attention(tensorf({1, 2, 4, 4, 4}), p, 63), data_error);
  EXPECT_NO_THROW(nonlocal_attention(tensorf({1, 2, 4, 4, 4}), p, 64));
}

TEST(Attention, GradChecks) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    expect_gradcheck([s](const std::vector<tensord>& in) { return random_readout(attention(in[0], in[1], in[2]), s); },
                     {random_tensor<double>({2, 2, 2, 2, 1}, s, true), random_tensor<double>({2, 2, 2, 2, 1}, s + 1, true),
                      random_tensor<double>({2, 3, 2, 2, 1}, s + 2, true)},
                     1e-4, {"q", "k", "v"});
    expect_gradcheck(
        [s](const std::vector<tensord>& in) {
          const nonlocal_params<double> p{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
          return random_readout(nonlocal_attention(in[0], p, 64), s);
        },
        {random_tensor<double>({1, 2, 2, 2, 2}, s, true), random_tensor<double>({2, 2, 1, 1, 1}, s + 1, true),
         random_tensor<double>({2}, s + 2, true), random_tensor<double>({2, 2, 1, 1, 1}, s + 3, true),
         random_tensor<double>({2}, s + 4, true), random_tensor<double>({2, 2, 1, 1, 1}, s + 5, true),
         random_tensor<double>({2}, s + 6, true), random_tensor<double>({2, 2, 1, 1, 1}, s + 7, true),
         random_tensor<double>({2}, s + 8, true)},
        1e-3);
  }
}

TEST(Backward, LinearGradIsInput) {
  const auto w = random_tensor<double>({4}, 1, true), x = random_tensor<double>({4}, 2);
  auto l = sum(mul(w, x));
  backward(l);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(w.grad()[i], x.data()[i]);
}

TEST(Backward, SequentialLossesAccumulate) {
  const auto w = random_tensor<double>({4}, 1, true), x = random_tensor<double>({4}, 2), y = random_tensor<double>({4}, 3);
  auto l1 = sum(mul(w, x));
  backward(l1);
  auto l2 = sum(mul(w, y));
  backward(l2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(w.grad()[i], x.data()[i] + y.data()[i]);
}

TEST(Backward, IndependentSubgraphsMatchSeparateBackwards) {
  const auto a = random_tensor<double>({1, 1, 3, 3, 3}, 1, true), b = random_tensor<double>({1, 2, 3, 3, 3}, 2, true);
  const auto w = random_tensor<double>({2, 1, 3, 3, 3}, 3);
  auto joint = add(random_readout(conv3d(a, w), 4), random_readout(leaky_relu(b), 5));
  backward(joint);
  const std::vector<double> ga(a.grad().begin(), a.grad().end()), gb(b.grad().begin(), b.grad().end());
  a.zero_grad();
  b.zero_grad();
  auto la = random_readout(conv3d(a, w), 4);
  backward(la);
  auto lb = random_readout(leaky_relu(b), 5);
  backward(lb);
  EXPECT_TRUE(std::equal(ga.begin(), ga.end(), a.grad().begin()));
  EXPECT_TRUE(std::equal(gb.begin(), gb.end(), b.grad().begin()));
}

TEST(Backward, SharedInputVisitedOnce) {
  // y = x*x + x: every node runs exactly once, giving 2x + 1.
  const auto x = random_tensor<double>({5}, 1, true);
  auto l = sum(add(mul(x, x), x));
  backward(l);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i] + 1);
}

TEST(Backward, Errors) {
  const auto x = random_tensor<double>({3}, 1, true);
  auto v = scale(x, 2.0);
  EXPECT_THROW(backward(v), data_error);  // non-scalar
  auto l = sum(v);
  backward(l);
  EXPECT_THROW(backward(l), data_error);  // double backward
  EXPECT_THROW(sum(v), data_error);       // reuse of a consumed graph
  auto c = sum(tensord({3}, 1.0));
  EXPECT_THROW(backward(c), data_error);  // nothing requires grad
}

TEST(Backward, NoGradRecordsNothing) {
  const auto x = random_tensor<double>({3}, 1, true);
  no_grad_guard ng;
  auto y = sum(scale(x, 2.0));
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, FiniteChecks) {
  set_finite_checks(true);
  const tensorf x({2}, 3e38f);
  EXPECT_THROW(scale(x, 10.f), data_error);
  set_finite_checks(false);
  EXPECT_NO_THROW(scale(x, 10.f));
#ifndef NDEBUG
  set_finite_checks(true);
#endif
}

TEST(GradCheck, CorruptedBackwardIsReported) {
  auto bad_square = [](const tensord& x) {
    tensord out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    return detail::record(std::move(out), {x}, [x](std::span<const double> g) {
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 3.0 * x.data()[i] * g[i];  // should be 2x
    });
  };
  const auto r = grad_check([&](const std::vector<tensord>& in) { return sum(bad_square(in[0])); },
                            {random_tensor<double>({4}, 1, true, 0.1)});
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(GradCheck, SamplingLimitsCoordinates) {
  grad_check_options o;
  o.max_elements = 5;
  const auto r = grad_check([](const std::vector<tensord>& in) { return random_readout(scale(in[0], 2.0), 1); },
                            {random_tensor<double>({1, 1, 4, 4, 4}, 1, true)}, o);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.entries.at(0).checked, 5u);
}

TEST(ParamStore, OrderAndUniqueness) {
  param_store<float> p;
  p.add("b", tensorf({2}));
  p.add("a", tensorf({3}));
  EXPECT_THROW(p.add("a", tensorf({1})), data_error);
  std::vector<std::string> names;
  for (const auto& [n, t] : p) {
    names.push_back(n);
    EXPECT_TRUE(t.requires_grad());
  }
  EXPECT_EQ(names, (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(p.parameter_count(), 5u);
  const auto d = p.cast<double>();
  EXPECT_EQ(d.at("a").numel(), 3u);
  EXPECT_THROW(p.at("zz"), data_error);
}

TEST(GradSuite, EveryOpPassesOneSeed) {
  gradient_suite_options opt;
  opt.seeds = 1;
  std::vector<std::string> failed;
  const auto res = run_gradient_suite(opt, [&](const gradient_suite_entry& e) {
    if (!e.passed) failed.push_back(e.op + "\n" + e.report.summary());
  });
  for (const auto& f : failed) ADD_FAILURE() << f;
  EXPECT_TRUE(res.passed);
  EXPECT_EQ(res.entries.size(), 20u);
  EXPECT_LT(res.max_rel_error(false), 1e-4);
  EXPECT_LT(res.max_rel_error(true), 1e-3);
  for (const auto& e : res.entries) EXPECT_GT(e.report.checked, 0u) << e.op;
}
