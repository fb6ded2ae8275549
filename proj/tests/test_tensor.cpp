#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "testutil.hpp"
#include "tuigan/tensor.hpp"

using tuigan::grad;
using tuigan::GradModeGuard;
using tuigan::NoGradGuard;
using tuigan::Rng;
using tuigan::Shape;
using tuigan::sh1;
using tuigan::sh2;
using tuigan::sh3;
using tuigan::Tensor;

TEST_CASE("elementwise forward values") {
  auto a = Tensor<double>::from_vec(sh1(3), {1.0, -2.0, 4.0});
  auto b = Tensor<double>::from_vec(sh1(3), {3.0, 5.0, -1.0});

  auto sum = tuigan::add(a, b);
  CHECK(sum.data()[0] == 4.0);
  CHECK(sum.data()[1] == 3.0);
  CHECK(sum.data()[2] == 3.0);

  auto diff = tuigan::sub(a, b);
  CHECK(diff.data()[0] == -2.0);

  auto prod = tuigan::mul(a, b);
  CHECK(prod.data()[2] == -4.0);

  auto quot = tuigan::div(b, a);
  CHECK(quot.data()[0] == 3.0);
  CHECK(quot.data()[1] == -2.5);

  CHECK(tuigan::neg(a).data()[1] == 2.0);
  CHECK(tuigan::add_scalar(a, 1.5).data()[0] == 2.5);
  CHECK(tuigan::mul_scalar(a, -2.0).data()[2] == -8.0);

  auto sq = tuigan::sqrt_t(Tensor<double>::from_vec(sh1(2), {4.0, 9.0}));
  CHECK(sq.data()[0] == 2.0);
  CHECK(sq.data()[1] == 3.0);

  CHECK(tuigan::tanh_t(Tensor<double>::scalar(0.0)).item() == 0.0);
  CHECK(tuigan::sigmoid_t(Tensor<double>::scalar(0.0)).item() == 0.5);
  CHECK(tuigan::abs_t(a).data()[1] == 2.0);

  auto lr = tuigan::leaky_relu(Tensor<double>::from_vec(sh1(2), {3.0, -2.0}), 0.2);
  CHECK(lr.data()[0] == 3.0);
  CHECK(lr.data()[1] == Catch::Approx(-0.4));

  CHECK(tuigan::sum_all(a).item() == 3.0);
  CHECK(tuigan::mean_all(a).item() == 1.0);
}

TEST_CASE("matmul forward with transpose flags") {
  // A [2,3], B [3,2]; AB = [[22,28],[49,64]]
  auto a = Tensor<double>::from_vec(sh2(2, 3), {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from_vec(sh2(3, 2), {1, 2, 3, 4, 5, 6});
  auto ab = tuigan::matmul(a, b);
  REQUIRE(ab.shape() == sh2(2, 2));
  CHECK(ab.data()[0] == 22.0);
  CHECK(ab.data()[1] == 28.0);
  CHECK(ab.data()[2] == 49.0);
  CHECK(ab.data()[3] == 64.0);

  // Aᵀ as explicit tensor [3,2] with trans_a=true must reproduce AB.
  auto at = Tensor<double>::from_vec(sh2(3, 2), {1, 4, 2, 5, 3, 6});
  auto ab2 = tuigan::matmul(at, b, true, false);
  CHECK(testutil::bitwise_equal(ab, ab2));

  auto bt = Tensor<double>::from_vec(sh2(2, 3), {1, 3, 5, 2, 4, 6});
  auto ab3 = tuigan::matmul(a, bt, false, true);
  CHECK(testutil::bitwise_equal(ab, ab3));

  auto ab4 = tuigan::matmul(at, bt, true, true);
  CHECK(testutil::bitwise_equal(ab, ab4));
}

TEST_CASE("im2col extracts padded 3x3 patches") {
  // x [1,2,2] = [[1,2],[3,4]]
  auto x = Tensor<double>::from_vec(sh3(1, 2, 2), {1, 2, 3, 4});
  auto cols = tuigan::im2col3(x);
  REQUIRE(cols.shape() == sh2(9, 4));
  const double* d = cols.data();
  // Row 4 is the kernel center (ky=1,kx=1): the image itself.
  CHECK(d[4 * 4 + 0] == 1.0);
  CHECK(d[4 * 4 + 1] == 2.0);
  CHECK(d[4 * 4 + 2] == 3.0);
  CHECK(d[4 * 4 + 3] == 4.0);
  // Row 0 (ky=0,kx=0) reaches up-left: only the bottom-right output position
  // lands inside the image, where it reads x(0,0)=1.
  CHECK(d[0 * 4 + 0] == 0.0);
  CHECK(d[0 * 4 + 1] == 0.0);
  CHECK(d[0 * 4 + 2] == 0.0);
  CHECK(d[0 * 4 + 3] == 1.0);
  // Row 8 (ky=2,kx=2) reaches down-right: only the top-left position is inside.
  CHECK(d[8 * 4 + 0] == 4.0);
  CHECK(d[8 * 4 + 3] == 0.0);
}

TEST_CASE("im2col and col2im are mutually adjoint") {
  Rng rng(7);
  auto x = testutil::random_tensor(sh3(2, 5, 6), rng);
  auto c = testutil::random_tensor(sh2(2 * 9, 5 * 6), rng);
  auto ix = tuigan::im2col3(x);
  auto cc = tuigan::col2im3(c, 2, 5, 6);
  double lhs = 0.0, rhs = 0.0;
  for (std::int64_t i = 0; i < ix.numel(); ++i) lhs += ix.data()[i] * c.data()[i];
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * cc.data()[i];
  CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("crop and pad are mutually adjoint") {
  Rng rng(11);
  auto x = testutil::random_tensor(sh3(3, 6, 7), rng);
  auto y = testutil::random_tensor(sh3(2, 3, 4), rng);
  auto cx = tuigan::crop3(x, 1, 2, 2, 3, 1, 4);  // channels 1..2, rows 2..4, cols 1..4
  auto py = tuigan::pad3(y, 3, 6, 7, 1, 2, 1);
  double lhs = 0.0, rhs = 0.0;
  for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
  for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * py.data()[i];
  CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("chan_bcast and chan_sum are mutually adjoint") {
  Rng rng(13);
  auto v = testutil::random_tensor(sh1(4), rng);
  auto x = testutil::random_tensor(sh3(4, 3, 5), rng);
  auto bv = tuigan::chan_bcast(v, 3, 5);
  auto sx = tuigan::chan_sum(x);
  double lhs = 0.0, rhs = 0.0;
  for (std::int64_t i = 0; i < bv.numel(); ++i) lhs += bv.data()[i] * x.data()[i];
  for (std::int64_t i = 0; i < v.numel(); ++i) rhs += v.data()[i] * sx.data()[i];
  CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("concat_c stacks channels and routes gradients") {
  auto a = Tensor<double>::from_vec(sh3(1, 1, 2), {1, 2}, true);
  auto b = Tensor<double>::from_vec(sh3(2, 1, 2), {3, 4, 5, 6}, true);
  auto cat = tuigan::concat_c<double>({a, b});
  REQUIRE(cat.shape() == sh3(3, 1, 2));
  CHECK(cat.data()[0] == 1.0);
  CHECK(cat.data()[2] == 3.0);
  CHECK(cat.data()[5] == 6.0);

  // d/da sum(cat * w) must pick out w's first channel.
  auto w = Tensor<double>::from_vec(sh3(3, 1, 2), {10, 20, 30, 40, 50, 60});
  auto s = tuigan::sum_all(tuigan::mul(cat, w));
  auto gs = grad(s, {a, b});
  CHECK(gs[0].data()[0] == 10.0);
  CHECK(gs[0].data()[1] == 20.0);
  CHECK(gs[1].data()[0] == 30.0);
  CHECK(gs[1].data()[3] == 60.0);
}

TEST_CASE("gradients of elementwise chains match finite differences") {
  Rng rng(21);
  auto x = testutil::random_tensor(sh1(12), rng, true, 0.2, 1.5);
  auto y = testutil::random_tensor(sh1(12), rng, true, -1.0, 1.0);
  auto f = [&]() {
    auto t = tuigan::mul(tuigan::tanh_t(x), tuigan::sigmoid_t(y));
    auto u = tuigan::sqrt_t(tuigan::add_scalar(tuigan::mul(x, x), 0.5));
    auto v = tuigan::div(tuigan::abs_t(y), tuigan::add_scalar(u, 1.0));
    return tuigan::mean_all(tuigan::add(t, tuigan::leaky_relu(v, 0.2)));
  };
  auto res = testutil::gradcheck(f, {x, y});
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("gradients through matmul, reshape, crop, pad, concat") {
  Rng rng(22);
  auto a = testutil::random_tensor(sh2(3, 4), rng, true);
  auto b = testutil::random_tensor(sh2(4, 5), rng, true);
  auto c = testutil::random_tensor(sh3(2, 3, 5), rng, true);
  auto f = [&]() {
    auto m = tuigan::matmul(a, b);              // [3,5]
    auto r = tuigan::reshape(m, sh3(3, 1, 5));  // one-row image
    auto p = tuigan::pad3(r, 3, 3, 5, 0, 1, 0);
    auto cr = tuigan::crop3(p, 0, 2, 0, 3, 0, 5);
    auto cat = tuigan::concat_c<double>({cr, c});  // [4,3,5]
    return tuigan::mean_all(tuigan::mul(cat, cat));
  };
  auto res = testutil::gradcheck(f, {a, b, c});
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("gradients through matmul transpose flags") {
  Rng rng(23);
  auto a = testutil::random_tensor(sh2(4, 3), rng, true);
  auto b = testutil::random_tensor(sh2(5, 4), rng, true);
  auto f = [&]() {
    auto m = tuigan::matmul(a, b, true, true);  // Aᵀ·Bᵀ = [3,5]
    return tuigan::mean_all(tuigan::mul(m, m));
  };
  auto res = testutil::gradcheck(f, {a, b});
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("gradients through im2col, col2im, channel ops") {
  Rng rng(24);
  auto x = testutil::random_tensor(sh3(2, 4, 4), rng, true);
  auto v = testutil::random_tensor(sh1(2), rng, true);
  auto f = [&]() {
    auto cols = tuigan::im2col3(x);                       // [18,16]
    auto back = tuigan::col2im3(cols, 2, 4, 4);           // [2,4,4]
    auto y = tuigan::add(back, tuigan::chan_bcast(v, 4, 4));
    auto s = tuigan::chan_sum(y);                         // [2]
    return tuigan::sum_all(tuigan::mul(s, s));
  };
  auto res = testutil::gradcheck(f, {x, v});
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("second derivatives via create_graph") {
  // f = sum(x^3): first grad 3x^2, second grad (of its sum) 6x.
  auto x = Tensor<double>::from_vec(sh1(3), {1.0, -2.0, 0.5}, true);
  auto f = tuigan::sum_all(tuigan::mul(tuigan::mul(x, x), x));
  auto g1 = grad(f, {x}, true)[0];
  CHECK(g1.data()[0] == Catch::Approx(3.0).margin(1e-12));
  CHECK(g1.data()[1] == Catch::Approx(12.0).margin(1e-12));
  CHECK(g1.data()[2] == Catch::Approx(0.75).margin(1e-12));
  auto g2 = grad(tuigan::sum_all(g1), {x})[0];
  CHECK(g2.data()[0] == Catch::Approx(6.0).margin(1e-12));
  CHECK(g2.data()[1] == Catch::Approx(-12.0).margin(1e-12));
  CHECK(g2.data()[2] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("gradient-norm penalty differentiates analytically") {
  // s(x) = 0.5*sum(x^2) has gradient x, so the unit-norm penalty
  // P = (|x| - 1)^2 has dP/dx = 2(|x| - 1) x / |x|.
  auto x = Tensor<double>::from_vec(sh1(3), {0.6, -1.2, 0.8}, true);
  auto s = tuigan::mul_scalar(tuigan::sum_all(tuigan::mul(x, x)), 0.5);
  auto g = grad(s, {x}, true)[0];
  auto gn = tuigan::sqrt_t(tuigan::sum_all(tuigan::mul(g, g)));
  auto excess = tuigan::add_scalar(gn, -1.0);
  auto pen = tuigan::mul(excess, excess);
  const double norm = std::sqrt(0.36 + 1.44 + 0.64);
  CHECK(pen.item() == Catch::Approx((norm - 1) * (norm - 1)).margin(1e-12));
  auto dp = grad(pen, {x})[0];
  for (int i = 0; i < 3; ++i) {
    const double expect = 2.0 * (norm - 1.0) * x.data()[i] / norm;
    CHECK(dp.data()[i] == Catch::Approx(expect).margin(1e-10));
  }
}

TEST_CASE("gradient accumulates across repeated use") {
  auto x = Tensor<double>::from_vec(sh1(2), {3.0, 4.0}, true);
  auto y = tuigan::add(x, x);
  auto g = grad(tuigan::sum_all(y), {x})[0];
  CHECK(g.data()[0] == 2.0);
  CHECK(g.data()[1] == 2.0);
}

TEST_CASE("detach blocks gradient flow") {
  auto x = Tensor<double>::from_vec(sh1(2), {1.0, 2.0}, true);
  auto y = tuigan::mul(x.detach(), x);
  auto g = grad(tuigan::sum_all(y), {x})[0];
  CHECK(g.data()[0] == 1.0);  // only the non-detached factor contributes
  CHECK(g.data()[1] == 2.0);
}

TEST_CASE("grad of unrelated tensor is zero") {
  auto x = Tensor<double>::from_vec(sh1(2), {1.0, 2.0}, true);
  auto z = Tensor<double>::from_vec(sh1(2), {5.0, 6.0}, true);
  auto g = grad(tuigan::sum_all(tuigan::mul(x, x)), {z})[0];
  CHECK(g.data()[0] == 0.0);
  CHECK(g.data()[1] == 0.0);
}

TEST_CASE("no-grad mode records no graph") {
  auto x = Tensor<double>::from_vec(sh1(2), {1.0, 2.0}, true);
  NoGradGuard off;
  auto y = tuigan::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad mode guard restores state") {
  CHECK(tuigan::grad_enabled());
  {
    NoGradGuard off;
    CHECK_FALSE(tuigan::grad_enabled());
    {
      GradModeGuard on(true);
      CHECK(tuigan::grad_enabled());
    }
    CHECK_FALSE(tuigan::grad_enabled());
  }
  CHECK(tuigan::grad_enabled());
}

TEST_CASE("mutable_data rejects non-leaf tensors") {
  auto x = Tensor<double>::from_vec(sh1(2), {1.0, 2.0}, true);
  auto y = tuigan::add(x, x);
  CHECK_THROWS_AS(y.mutable_data(), tuigan::ContractError);
}

TEST_CASE("shape mismatches are rejected") {
  auto a = Tensor<double>::from_vec(sh1(2), {1, 2});
  auto b = Tensor<double>::from_vec(sh1(3), {1, 2, 3});
  CHECK_THROWS_AS(tuigan::add(a, b), tuigan::ShapeError);
  CHECK_THROWS_AS(tuigan::matmul(a, b), tuigan::ShapeError);
}

TEST_CASE("float tensors run the same ops") {
  auto a = Tensor<float>::from_vec(sh1(2), {1.0f, -2.0f}, true);
  auto y = tuigan::mean_all(tuigan::mul(a, a));
  CHECK(y.item() == Catch::Approx(2.5f));
  auto g = grad(y, {a})[0];
  CHECK(g.data()[0] == Catch::Approx(1.0f));
  CHECK(g.data()[1] == Catch::Approx(-2.0f));
}
