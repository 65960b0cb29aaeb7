#include <cmath>

#include "doctest.h"
#include "remic/ops.hpp"
#include "test_util.hpp"

using namespace remic;
using namespace remic::testutil;

namespace {

// Independent direct convolution: plain nested loops over every output
// element and kernel tap. This is the oracle conv2d is checked against.
Tensor4d conv_oracle(const Tensor4d& x, const Tensor4d& w, const Tensor4d& b,
                     int stride, int pad, bool has_bias) {
  const int co = w.batch(), ci = w.channels(), k = w.height();
  const int ho = (x.height() + 2 * pad - k) / stride + 1;
  const int wo = (x.width() + 2 * pad - k) / stride + 1;
  Tensor4d out(x.batch(), co, ho, wo);
  for (int bi = 0; bi < x.batch(); ++bi)
    for (int oc = 0; oc < co; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = has_bias ? b.data[static_cast<size_t>(oc)] : 0.0;
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride - pad + ky;
                const int ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= x.height() || ix < 0 || ix >= x.width()) continue;
                acc += x(bi, ic, iy, ix) * w(oc, ic, ky, kx);
              }
          out(bi, oc, oy, ox) = acc;
        }
  return out;
}

void channel_mean_std(const Tensor4d& t, int b, int c, double& mean, double& sd) {
  const int n = t.plane();
  double s = 0;
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x) s += t(b, c, y, x);
  mean = s / n;
  double v = 0;
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x) {
      const double d = t(b, c, y, x) - mean;
      v += d * d;
    }
  sd = std::sqrt(v / n);
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input") {
  Tape<double> tape;
  Rng rng(1);
  auto x = tape.leaf(random_tensor(1, 1, 3, 3, rng));
  Tensor4d w(1, 1, 1, 1);
  w.data[0] = 1.0;
  auto wv = tape.leaf(w);
  auto bv = tape.leaf(Tensor4d::zeros(1, 1, 1, 1));
  auto y = conv2d(x, wv, bv, ConvSpec{1, 1, 1, 1, 0, true});
  for (size_t i = 0; i < x.value().size(); ++i)
    CHECK(y.value().data[i] == doctest::Approx(x.value().data[i]));
}

TEST_CASE("conv2d output shape follows the stride formula") {
  Tape<double> tape;
  Rng rng(2);
  auto x = tape.leaf(random_tensor(1, 1, 4, 4, rng));
  auto w = tape.leaf(random_tensor(1, 1, 3, 3, rng));
  auto b = tape.leaf(Tensor4d::zeros(1, 1, 1, 1));
  auto y = conv2d(x, w, b, ConvSpec{1, 1, 3, 2, 1, true});
  CHECK(y.value().shape == std::array<int, 4>{1, 1, 2, 2});
}

TEST_CASE("conv2d matches the direct-loop oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const int stride = 1 + trial % 2;
    const int pad = trial % 3;
    Tensor4d x = random_tensor(1, 2, 5, 5, rng);
    Tensor4d w = random_tensor(4, 2, 3, 3, rng);
    Tensor4d b = random_tensor(1, 4, 1, 1, rng);
    Tape<double> tape;
    auto y = conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b),
                    ConvSpec{2, 4, 3, stride, pad, true});
    Tensor4d expect = conv_oracle(x, w, b, stride, pad, true);
    REQUIRE(y.value().shape == expect.shape);
    for (size_t i = 0; i < expect.size(); ++i)
      CHECK(std::abs(y.value().data[i] - expect.data[i]) < 1e-10);
  }
}

TEST_CASE("conv2d rejects inconsistent shapes") {
  Tape<double> tape;
  Rng rng(4);
  auto x = tape.leaf(random_tensor(1, 3, 8, 8, rng));
  auto w = tape.leaf(random_tensor(4, 2, 3, 3, rng));
  auto b = tape.leaf(Tensor4d::zeros(1, 4, 1, 1));
  CHECK_THROWS_AS(conv2d(x, w, b, ConvSpec{2, 4, 3, 1, 1, true}), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, w, b, ConvSpec{3, 4, 3, 1, 1, true}), std::invalid_argument);
  // Output size would drop below 1.
  auto tiny = tape.leaf(random_tensor(1, 2, 2, 2, rng));
  CHECK_THROWS_AS(conv2d(tiny, w, b, ConvSpec{2, 4, 3, 2, 0, true}), std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(5);
  auto build = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mean_all(conv2d(v[0], v[1], v[2], ConvSpec{2, 3, 3, 2, 1, true}));
  };
  const double err = gradcheck(build, {random_tensor(2, 2, 6, 6, rng),
                                       random_tensor(3, 2, 3, 3, rng),
                                       random_tensor(1, 3, 1, 1, rng)});
  CHECK(err < 1e-3);
}

TEST_CASE("instance_norm zero-variance channel maps to zeros") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4d::full(1, 2, 4, 4, 5.0));
  auto y = instance_norm(x, 1e-5);
  for (double v : y.value().data) CHECK(v == doctest::Approx(0.0));
}

TEST_CASE("instance_norm keeps an already standardized channel") {
  Tape<double> tape;
  Tensor4d x(1, 1, 1, 2);
  x.data = {-1.0, 1.0};
  auto y = instance_norm(tape.leaf(x), 1e-5);
  CHECK(y.value().data[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.value().data[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("instance_norm output statistics") {
  Rng rng(6);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(1, 3, 8, 8, rng));
  auto y = instance_norm(x, 1e-5);
  for (int c = 0; c < 3; ++c) {
    double m, sd;
    channel_mean_std(y.value(), 0, c, m, sd);
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(sd - 1.0) < 1e-3);
  }
}

TEST_CASE("instance_norm gradient is shift invariant") {
  Rng rng(7);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(1, 2, 5, 5, rng), true);
  auto loss = mean_all(instance_norm(x, 1e-5));
  tape.backward(loss);
  // d/dc of sum(IN(x + c)) is the per-channel sum of input gradients.
  const Tensor4d& g = x.grad();
  for (int c = 0; c < 2; ++c) {
    double s = 0;
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 5; ++xx) s += g(0, c, y, xx);
    CHECK(std::abs(s) < 1e-12);
  }
}

TEST_CASE("instance_norm gradients match finite differences") {
  Rng rng(8);
  auto build = [](Tape<double>&, std::vector<Var<double>>& v) {
    // A non-symmetric readout, otherwise the shift-invariant gradient is 0.
    auto y = instance_norm(v[0], 1e-5);
    return mse_vs_const(y, 0.3);
  };
  CHECK(gradcheck(build, {random_tensor(2, 3, 4, 4, rng)}) < 1e-3);
}

TEST_CASE("adain with identity affine equals instance_norm") {
  Rng rng(9);
  Tensor4d x = random_tensor(1, 3, 6, 6, rng);
  Tape<double> tape;
  auto xv = tape.leaf(x);
  auto g = tape.leaf(Tensor4d::full(1, 3, 1, 1, 1.0));
  auto b = tape.leaf(Tensor4d::zeros(1, 3, 1, 1));
  auto a = adain(xv, g, b, 1e-5);
  auto in = instance_norm(xv, 1e-5);
  for (size_t i = 0; i < a.value().size(); ++i)
    CHECK(a.value().data[i] == doctest::Approx(in.value().data[i]));
}

TEST_CASE("adain reaches the requested channel statistics") {
  Rng rng(10);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(1, 1, 16, 16, rng));
  auto g = tape.leaf(Tensor4d::full(1, 1, 1, 1, 2.0));
  auto b = tape.leaf(Tensor4d::full(1, 1, 1, 1, 3.0));
  auto y = adain(x, g, b, 1e-5);
  double m, sd;
  channel_mean_std(y.value(), 0, 0, m, sd);
  CHECK(std::abs(m - 3.0) < 1e-5);
  CHECK(std::abs(sd - 2.0) < 1e-3);
}

TEST_CASE("adain on a constant channel yields beta everywhere") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4d::full(1, 1, 4, 4, 9.0));
  auto g = tape.leaf(Tensor4d::full(1, 1, 1, 1, -7.0));
  auto b = tape.leaf(Tensor4d::full(1, 1, 1, 1, 0.25));
  auto y = adain(x, g, b, 1e-5);
  for (double v : y.value().data) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("adain rejects mismatched affine lengths") {
  Tape<double> tape;
  Rng rng(11);
  auto x = tape.leaf(random_tensor(1, 3, 4, 4, rng));
  auto g = tape.leaf(Tensor4d::full(1, 2, 1, 1, 1.0));
  auto b = tape.leaf(Tensor4d::zeros(1, 3, 1, 1));
  CHECK_THROWS_AS(adain(x, g, b, 1e-5), std::invalid_argument);
}

TEST_CASE("adain gradients match finite differences") {
  Rng rng(12);
  auto build = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(adain(v[0], v[1], v[2], 1e-5), 0.2);
  };
  CHECK(gradcheck(build, {random_tensor(1, 2, 4, 4, rng),
                          random_tensor(1, 2, 1, 1, rng, 0.5, 1.5),
                          random_tensor(1, 2, 1, 1, rng)}) < 1e-3);
}

TEST_CASE("leaky_relu point values") {
  Tape<double> tape;
  Tensor4d x(1, 1, 1, 3);
  x.data = {2.0, -1.0, 0.0};
  auto y = leaky_relu(tape.leaf(x), 0.2);
  CHECK(y.value().data[0] == doctest::Approx(2.0));
  CHECK(y.value().data[1] == doctest::Approx(-0.2));
  CHECK(y.value().data[2] == doctest::Approx(0.0));
}

TEST_CASE("leaky_relu and saturating activations match finite differences") {
  Rng rng(13);
  auto lr = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mean_all(leaky_relu(v[0], 0.2));
  };
  CHECK(gradcheck(lr, {random_tensor_kink_safe(1, 2, 4, 4, rng)}) < 1e-3);
  auto th = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(tanh_op(v[0]), 0.4);
  };
  CHECK(gradcheck(th, {random_tensor(1, 2, 4, 4, rng)}) < 1e-3);
  auto sg = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(sigmoid_op(v[0]), 0.4);
  };
  CHECK(gradcheck(sg, {random_tensor(1, 2, 4, 4, rng)}) < 1e-3);
}

TEST_CASE("nearest_upsample2x examples") {
  Tape<double> tape;
  auto y = nearest_upsample2x(tape.leaf(Tensor4d::full(1, 1, 1, 1, 7.0)));
  CHECK(y.value().shape == std::array<int, 4>{1, 1, 2, 2});
  for (double v : y.value().data) CHECK(v == doctest::Approx(7.0));

  Tensor4d x(1, 1, 2, 2);
  x.data = {1, 2, 3, 4};
  auto z = nearest_upsample2x(tape.leaf(x));
  const double expect[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (int yy = 0; yy < 4; ++yy)
    for (int xx = 0; xx < 4; ++xx)
      CHECK(z.value()(0, 0, yy, xx) == doctest::Approx(expect[yy][xx]));
}

TEST_CASE("downsample_avg2x undoes nearest_upsample2x exactly") {
  Rng rng(14);
  Tensor4d x = random_tensor(2, 3, 5, 4, rng);
  Tape<double> tape;
  auto round = downsample_avg2x(nearest_upsample2x(tape.leaf(x)));
  REQUIRE(round.value().shape == x.shape);
  for (size_t i = 0; i < x.size(); ++i) CHECK(round.value().data[i] == x.data[i]);
}

TEST_CASE("downsample_avg2x examples and oracle") {
  Tape<double> tape;
  auto c = downsample_avg2x(tape.leaf(Tensor4d::full(1, 1, 4, 4, 0.7)));
  CHECK(c.value().shape == std::array<int, 4>{1, 1, 2, 2});
  for (double v : c.value().data) CHECK(v == doctest::Approx(0.7));

  Tensor4d q(1, 1, 2, 2);
  q.data = {1, 2, 3, 4};
  CHECK(downsample_avg2x(tape.leaf(q)).value().data[0] == doctest::Approx(2.5));

  Rng rng(15);
  Tensor4d x = random_tensor(1, 1, 8, 8, rng);
  auto y = downsample_avg2x(tape.leaf(x));
  for (int oy = 0; oy < 4; ++oy)
    for (int ox = 0; ox < 4; ++ox) {
      const double mean = (x(0, 0, 2 * oy, 2 * ox) + x(0, 0, 2 * oy, 2 * ox + 1) +
                           x(0, 0, 2 * oy + 1, 2 * ox) + x(0, 0, 2 * oy + 1, 2 * ox + 1)) / 4.0;
      CHECK(y.value()(0, 0, oy, ox) == doctest::Approx(mean).epsilon(1e-12));
    }

  auto odd = tape.leaf(Tensor4d::zeros(1, 1, 3, 4));
  CHECK_THROWS_AS(downsample_avg2x(odd), std::invalid_argument);
}

TEST_CASE("resampling gradients match finite differences") {
  Rng rng(16);
  auto up = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(nearest_upsample2x(v[0]), 0.1);
  };
  CHECK(gradcheck(up, {random_tensor(1, 2, 3, 3, rng)}) < 1e-3);
  auto down = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(downsample_avg2x(v[0]), 0.1);
  };
  CHECK(gradcheck(down, {random_tensor(1, 2, 4, 4, rng)}) < 1e-3);
}

TEST_CASE("residual_block with zero conv weights is the identity") {
  Rng rng(17);
  Tensor4d x = random_tensor(1, 4, 6, 6, rng);
  Tape<double> tape;
  ResBlockVars<double> p;
  p.w1 = tape.leaf(Tensor4d::zeros(4, 4, 3, 3));
  p.b1 = tape.leaf(Tensor4d::zeros(1, 4, 1, 1));
  p.w2 = tape.leaf(Tensor4d::zeros(4, 4, 3, 3));
  p.b2 = tape.leaf(Tensor4d::zeros(1, 4, 1, 1));
  auto y = residual_block(tape.leaf(x), p, NormMode::instance, 1e-5);
  REQUIRE(y.value().shape == x.shape);
  for (size_t i = 0; i < x.size(); ++i) CHECK(y.value().data[i] == doctest::Approx(x.data[i]));
}

TEST_CASE("residual_block preserves the input shape") {
  Rng rng(18);
  Tape<double> tape;
  ResBlockVars<double> p;
  p.w1 = tape.leaf(random_tensor(3, 3, 3, 3, rng, -0.2, 0.2));
  p.b1 = tape.leaf(random_tensor(1, 3, 1, 1, rng));
  p.w2 = tape.leaf(random_tensor(3, 3, 3, 3, rng, -0.2, 0.2));
  p.b2 = tape.leaf(random_tensor(1, 3, 1, 1, rng));
  auto x = tape.leaf(random_tensor(2, 3, 5, 7, rng));
  CHECK(residual_block(x, p, NormMode::instance, 1e-5).value().shape ==
        std::array<int, 4>{2, 3, 5, 7});
}

TEST_CASE("residual_block gradients match finite differences") {
  Rng rng(19);
  auto in_mode = [](Tape<double>&, std::vector<Var<double>>& v) {
    ResBlockVars<double> p{v[1], v[2], v[3], v[4]};
    return mse_vs_const(residual_block(v[0], p, NormMode::instance, 1e-5), 0.2);
  };
  CHECK(gradcheck(in_mode, {random_tensor(1, 2, 4, 4, rng),
                            random_tensor(2, 2, 3, 3, rng, -0.5, 0.5),
                            random_tensor(1, 2, 1, 1, rng),
                            random_tensor(2, 2, 3, 3, rng, -0.5, 0.5),
                            random_tensor(1, 2, 1, 1, rng)}) < 1e-3);

  auto adain_mode = [](Tape<double>&, std::vector<Var<double>>& v) {
    ResBlockVars<double> p{v[1], v[2], v[3], v[4]};
    AdainStats<double> st{v[5], v[6], v[7], v[8]};
    return mse_vs_const(residual_block(v[0], p, NormMode::adain, 1e-5, &st), 0.2);
  };
  CHECK(gradcheck(adain_mode, {random_tensor(1, 2, 4, 4, rng),
                               random_tensor(2, 2, 3, 3, rng, -0.5, 0.5),
                               random_tensor(1, 2, 1, 1, rng),
                               random_tensor(2, 2, 3, 3, rng, -0.5, 0.5),
                               random_tensor(1, 2, 1, 1, rng),
                               random_tensor(1, 2, 1, 1, rng, 0.5, 1.5),
                               random_tensor(1, 2, 1, 1, rng),
                               random_tensor(1, 2, 1, 1, rng, 0.5, 1.5),
                               random_tensor(1, 2, 1, 1, rng)}) < 1e-3);
}

TEST_CASE("global_avg_pool and fully_connected basics") {
  Tape<double> tape;
  auto pooled = global_avg_pool(tape.leaf(Tensor4d::full(2, 3, 4, 4, 1.25)));
  CHECK(pooled.value().shape == std::array<int, 4>{2, 3, 1, 1});
  for (double v : pooled.value().data) CHECK(v == doctest::Approx(1.25));

  // Identity weights, zero bias.
  Tensor4d w(3, 3, 1, 1);
  for (int i = 0; i < 3; ++i) w(i, i, 0, 0) = 1.0;
  Rng rng(20);
  Tensor4d v = random_tensor(1, 3, 1, 1, rng);
  auto y = fully_connected(tape.leaf(v), tape.leaf(w), tape.leaf(Tensor4d::zeros(1, 3, 1, 1)));
  for (int i = 0; i < 3; ++i) CHECK(y.value().data[i] == doctest::Approx(v.data[i]));
}

TEST_CASE("fully_connected matches a dot-product oracle") {
  Rng rng(21);
  Tensor4d v = random_tensor(2, 5, 1, 1, rng);
  Tensor4d w = random_tensor(4, 5, 1, 1, rng);
  Tensor4d b = random_tensor(1, 4, 1, 1, rng);
  Tape<double> tape;
  auto y = fully_connected(tape.leaf(v), tape.leaf(w), tape.leaf(b));
  for (int bi = 0; bi < 2; ++bi)
    for (int o = 0; o < 4; ++o) {
      double acc = b.data[static_cast<size_t>(o)];
      for (int d = 0; d < 5; ++d) acc += w(o, d, 0, 0) * v(bi, d, 0, 0);
      CHECK(std::abs(y.value()(bi, o, 0, 0) - acc) < 1e-10);
    }
}

TEST_CASE("pool, fc, concat, slice and softmax gradients match finite differences") {
  Rng rng(22);
  auto gap = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(global_avg_pool(v[0]), 0.3);
  };
  CHECK(gradcheck(gap, {random_tensor(2, 3, 4, 4, rng)}) < 1e-3);

  auto fc = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(fully_connected(v[0], v[1], v[2]), 0.3);
  };
  CHECK(gradcheck(fc, {random_tensor(2, 4, 1, 1, rng), random_tensor(3, 4, 1, 1, rng),
                       random_tensor(1, 3, 1, 1, rng)}) < 1e-3);

  auto cat = [](Tape<double>&, std::vector<Var<double>>& v) {
    auto joined = concat_channels<double>({v[0], v[1]});
    return mse_vs_const(slice_channels(joined, 1, 4), 0.3);
  };
  CHECK(gradcheck(cat, {random_tensor(1, 2, 3, 3, rng), random_tensor(1, 3, 3, 3, rng)}) < 1e-3);

  auto sm = [](Tape<double>&, std::vector<Var<double>>& v) {
    return mse_vs_const(softmax_channels(v[0]), 0.3);
  };
  CHECK(gradcheck(sm, {random_tensor(1, 3, 3, 3, rng)}) < 1e-3);
}

TEST_CASE("backward seeds flow through an identity function") {
  Tape<double> tape;
  Rng rng(23);
  auto x = tape.leaf(random_tensor(1, 1, 2, 2, rng), true);
  auto y = scale(x, 1.0);
  Tensor4d seed = Tensor4d::full(1, 1, 2, 2, 1.0);
  tape.backward(y, seed);
  for (double g : x.grad().data) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("gradients of tensors outside the graph are rejected") {
  Tape<double> a, b;
  auto x = a.leaf(Tensor4d::full(1, 1, 1, 1, 1.0), true);
  auto y = b.leaf(Tensor4d::full(1, 1, 1, 1, 1.0), true);
  auto loss = mean_all(scale(x, 2.0));
  a.backward(loss);
  CHECK_THROWS_AS(a.value(y), std::invalid_argument);
  CHECK_THROWS_AS((void)a.grad_of(y), std::invalid_argument);
}

TEST_CASE("forward ops keep finite inputs finite") {
  Rng rng(24);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(1, 4, 8, 8, rng, -3.0, 3.0));
  auto w = tape.leaf(random_tensor(4, 4, 3, 3, rng));
  auto b = tape.leaf(random_tensor(1, 4, 1, 1, rng));
  auto y = conv2d(x, w, b, ConvSpec{4, 4, 3, 1, 1, true});
  y = instance_norm(y, 1e-5);
  y = leaky_relu(y, 0.2);
  y = downsample_avg2x(y);
  y = nearest_upsample2x(y);
  CHECK(y.value().all_finite());
}
