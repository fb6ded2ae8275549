#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "testutil.hpp"
#include "tuigan/networks.hpp"

using tuigan::NormMode;
using tuigan::Rng;
using tuigan::sh3;
using tuigan::Tensor;

namespace {

std::vector<std::pair<std::string, Tensor<double>>> named_params(
    const tuigan::ScaleModule<double>& m) {
  std::vector<std::pair<std::string, Tensor<double>>> out;
  tuigan::visit_params<double>(
      m, [&](const std::string& n, Tensor<double> t) { out.emplace_back(n, t); });
  return out;
}

// Positions of an output map whose gradient reaches a given input, i.e. the
// receptive field of one output pixel measured through the actual graph.
struct Support {
  std::int64_t min_y = 1 << 20, max_y = -1, min_x = 1 << 20, max_x = -1;
  std::int64_t count = 0;
};

template <class Forward>
Support receptive_field(Forward&& fwd, std::int64_t in_c, std::int64_t h,
                        std::int64_t w, std::int64_t cy, std::int64_t cx) {
  Rng rng(404);
  auto x = testutil::random_tensor(sh3(in_c, h, w), rng, true);
  auto y = fwd(x);
  const std::int64_t oc = y.shape().d[0];
  auto pixel = tuigan::sum_all(tuigan::crop3(y, 0, oc, cy, 1, cx, 1));
  auto g = tuigan::grad(pixel, {x})[0];
  Support s;
  for (std::int64_t yy = 0; yy < h; ++yy)
    for (std::int64_t xx = 0; xx < w; ++xx) {
      bool hit = false;
      for (std::int64_t c = 0; c < in_c; ++c)
        if (g.data()[(c * h + yy) * w + xx] != 0.0) hit = true;
      if (!hit) continue;
      ++s.count;
      s.min_y = std::min(s.min_y, yy);
      s.max_y = std::max(s.max_y, yy);
      s.min_x = std::min(s.min_x, xx);
      s.max_x = std::max(s.max_x, xx);
    }
  return s;
}

}  // namespace

TEST_CASE("initialization is seed-deterministic") {
  auto a = tuigan::init_scale_module<double>(2, 7, 8, 0.2, true);
  auto b = tuigan::init_scale_module<double>(2, 7, 8, 0.2, true);
  auto c = tuigan::init_scale_module<double>(2, 8, 8, 0.2, true);
  auto pa = named_params(a);
  auto pb = named_params(b);
  auto pc = named_params(c);
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    if (!testutil::bitwise_equal(pa[i].second, pb[i].second)) all_equal = false;
    if (!testutil::bitwise_equal(pa[i].second, pc[i].second)) any_diff_seed = true;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
}

TEST_CASE("parameter walk yields unique names and the expected count") {
  auto with_psi = tuigan::init_scale_module<double>(1, 3, 8, 0.2, true);
  auto coarse = tuigan::init_scale_module<double>(4, 3, 8, 0.2, false);
  auto pw = named_params(with_psi);
  auto pc = named_params(coarse);
  // generator: 4 translation blocks (conv w/b + norm gain/shift) + head = 18,
  // blend net adds 3 blocks + head = 14; discriminator = 18.
  CHECK(pw.size() == 2 * (18 + 14) + 2 * 18);
  CHECK(pc.size() == 2 * 18 + 2 * 18);
  std::set<std::string> names;
  for (auto& [n, t] : pw) names.insert(n);
  CHECK(names.size() == pw.size());
  // biases start at zero, conv weights do not
  for (auto& [n, t] : pw) {
    if (n.size() > 2 && n.substr(n.size() - 2) == ".b") {
      for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(t.data()[i] == 0.0);
    }
  }
}

TEST_CASE("set_trainable flips every parameter") {
  auto m = tuigan::init_scale_module<double>(0, 5, 8, 0.2, true);
  tuigan::set_trainable(m, false);
  for (auto& [n, t] : named_params(m)) CHECK_FALSE(t.requires_grad());
  tuigan::set_trainable(m, true);
  for (auto& [n, t] : named_params(m)) CHECK(t.requires_grad());
}

TEST_CASE("network outputs have the right shapes and ranges") {
  Rng rng(31);
  auto m = tuigan::init_scale_module<double>(0, 11, 8, 0.2, true);
  auto x = testutil::random_tensor(sh3(3, 14, 18), rng);

  auto fresh = tuigan::phi_forward(m.g_ab.phi, x, NormMode::live);
  REQUIRE(fresh.shape() == sh3(3, 14, 18));
  for (std::int64_t i = 0; i < fresh.numel(); ++i) {
    CHECK(fresh.data()[i] <= 1.0);
    CHECK(fresh.data()[i] >= -1.0);
  }

  auto nine = testutil::random_tensor(sh3(9, 14, 18), rng);
  auto mask = tuigan::psi_forward(*m.g_ab.psi, nine, NormMode::live);
  REQUIRE(mask.shape() == sh3(3, 14, 18));
  for (std::int64_t i = 0; i < mask.numel(); ++i) {
    CHECK(mask.data()[i] > 0.0);
    CHECK(mask.data()[i] < 1.0);
  }

  auto score = tuigan::discriminator_forward(m.d_a, x, NormMode::live);
  REQUIRE(score.shape() == sh3(1, 14, 18));
}

TEST_CASE("discriminator rejects undersized or misshapen input") {
  Rng rng(32);
  auto m = tuigan::init_scale_module<double>(0, 13, 8, 0.2, false);
  auto small = testutil::random_tensor(sh3(3, 10, 32), rng);
  CHECK_THROWS_AS(tuigan::discriminator_forward(m.d_a, small, NormMode::live),
                  tuigan::ShapeError);
  auto wrong_c = testutil::random_tensor(sh3(1, 32, 32), rng);
  CHECK_THROWS_AS(tuigan::discriminator_forward(m.d_a, wrong_c, NormMode::live),
                  tuigan::ShapeError);
}

TEST_CASE("translation and critic nets see exactly 11x11 patches") {
  auto m = tuigan::init_scale_module<double>(0, 17, 8, 0.2, true);
  auto phi_rf = receptive_field(
      [&](const Tensor<double>& x) {
        return tuigan::phi_forward(m.g_ab.phi, x, NormMode::frozen_stats);
      },
      3, 25, 25, 12, 12);
  CHECK(phi_rf.min_y == 7);
  CHECK(phi_rf.max_y == 17);
  CHECK(phi_rf.min_x == 7);
  CHECK(phi_rf.max_x == 17);
  CHECK(phi_rf.count == 11 * 11);

  auto d_rf = receptive_field(
      [&](const Tensor<double>& x) {
        return tuigan::discriminator_forward(m.d_b, x, NormMode::frozen_stats);
      },
      3, 25, 25, 12, 12);
  CHECK(d_rf.min_y == 7);
  CHECK(d_rf.max_y == 17);
  CHECK(d_rf.min_x == 7);
  CHECK(d_rf.max_x == 17);
  CHECK(d_rf.count == 11 * 11);
}

TEST_CASE("blend net sees exactly 9x9 patches") {
  auto m = tuigan::init_scale_module<double>(0, 18, 8, 0.2, true);
  auto rf = receptive_field(
      [&](const Tensor<double>& x) {
        return tuigan::psi_forward(*m.g_ab.psi, x, NormMode::frozen_stats);
      },
      9, 25, 25, 12, 12);
  CHECK(rf.min_y == 8);
  CHECK(rf.max_y == 16);
  CHECK(rf.min_x == 8);
  CHECK(rf.max_x == 16);
  CHECK(rf.count == 9 * 9);
}

TEST_CASE("norm layer behaves identically in both gradient modes") {
  Rng rng(33);
  auto m = tuigan::init_scale_module<double>(0, 19, 8, 0.2, false);
  auto x = testutil::random_tensor(sh3(3, 16, 16), rng);
  auto live = tuigan::phi_forward(m.g_ab.phi, x, NormMode::live);
  auto frozen = tuigan::phi_forward(m.g_ab.phi, x, NormMode::frozen_stats);
  CHECK(testutil::bitwise_equal(live, frozen));
}

TEST_CASE("blend mask extremes reproduce each branch bit for bit") {
  Rng rng(34);
  auto m = tuigan::init_scale_module<double>(1, 20, 8, 0.2, true);
  auto source = testutil::random_tensor(sh3(3, 16, 16), rng);
  auto prev = testutil::random_tensor(sh3(3, 16, 16), rng);

  auto fresh = tuigan::phi_forward(m.g_ab.phi, source, NormMode::live);
  auto ones = Tensor<double>::full(sh3(3, 16, 16), 1.0);
  auto zeros = Tensor<double>::full(sh3(3, 16, 16), 0.0);

  auto keep_fresh = tuigan::generator_forward<double>(m.g_ab, source, prev, NormMode::live, ones);
  CHECK(testutil::bitwise_equal(keep_fresh.image, fresh));

  auto keep_prev = tuigan::generator_forward<double>(m.g_ab, source, prev, NormMode::live, zeros);
  CHECK(testutil::bitwise_equal(keep_prev.image, prev));
}

TEST_CASE("generator without blend net averages the two branches") {
  Rng rng(35);
  auto m = tuigan::init_scale_module<double>(1, 21, 8, 0.2, false);
  auto source = testutil::random_tensor(sh3(3, 12, 12), rng);
  auto prev = testutil::random_tensor(sh3(3, 12, 12), rng);
  auto out = tuigan::generator_forward<double>(m.g_ab, source, prev, NormMode::live);
  REQUIRE(out.mask.defined());
  for (std::int64_t i = 0; i < out.mask.numel(); ++i)
    CHECK(out.mask.data()[i] == 0.5);
  auto fresh = tuigan::phi_forward(m.g_ab.phi, source, NormMode::live);
  for (std::int64_t i = 0; i < out.image.numel(); ++i)
    CHECK(out.image.data()[i] ==
          Catch::Approx(0.5 * fresh.data()[i] + 0.5 * prev.data()[i]).margin(1e-15));
}

TEST_CASE("generator at the coarsest level skips blending") {
  Rng rng(36);
  auto m = tuigan::init_scale_module<double>(4, 22, 8, 0.2, false);
  auto source = testutil::random_tensor(sh3(3, 16, 16), rng);
  auto out = tuigan::generator_forward(m.g_ab, source);
  CHECK(out.image.shape() == sh3(3, 16, 16));
  CHECK_FALSE(out.mask.defined());
  auto fresh = tuigan::phi_forward(m.g_ab.phi, source, NormMode::live);
  CHECK(testutil::bitwise_equal(out.image, fresh));
}

TEST_CASE("generator validates coarse-result and mask shapes") {
  Rng rng(37);
  auto m = tuigan::init_scale_module<double>(1, 23, 8, 0.2, true);
  auto source = testutil::random_tensor(sh3(3, 16, 16), rng);
  auto bad_prev = std::optional<Tensor<double>>(
      testutil::random_tensor(sh3(3, 12, 16), rng));
  CHECK_THROWS_AS(tuigan::generator_forward<double>(m.g_ab, source, bad_prev), tuigan::ShapeError);
  auto prev = std::optional<Tensor<double>>(
      testutil::random_tensor(sh3(3, 16, 16), rng));
  auto bad_mask = std::optional<Tensor<double>>(
      testutil::random_tensor(sh3(1, 16, 16), rng));
  CHECK_THROWS_AS(
      tuigan::generator_forward<double>(m.g_ab, source, prev, NormMode::live, bad_mask),
      tuigan::ShapeError);
}

TEST_CASE("both translation directions share one architecture") {
  auto m = tuigan::init_scale_module<double>(2, 24, 8, 0.2, true);
  auto pab = tuigan::generator_params(m);
  // identical layout, independent draws
  REQUIRE(m.g_ab.phi.blocks.size() == m.g_ba.phi.blocks.size());
  REQUIRE(m.g_ab.psi.has_value());
  REQUIRE(m.g_ba.psi.has_value());
  CHECK_FALSE(testutil::bitwise_equal(m.g_ab.phi.head.w, m.g_ba.phi.head.w));
  CHECK(m.g_ab.phi.head.w.shape() == m.g_ba.phi.head.w.shape());
  CHECK(pab.size() == 2 * 32);
}

TEST_CASE("network gradients match finite differences") {
  Rng rng(38);
  auto m = tuigan::init_scale_module<double>(0, 25, 4, 0.2, true);
  auto source = testutil::random_tensor(sh3(3, 8, 8), rng);
  auto prev = std::optional<Tensor<double>>(testutil::random_tensor(sh3(3, 8, 8), rng));

  std::vector<Tensor<double>> params;
  tuigan::visit_params(m.g_ab, "g",
                       [&](const std::string&, Tensor<double> t) { params.push_back(t); });
  auto f = [&]() {
    auto out = tuigan::generator_forward<double>(m.g_ab, source, prev, NormMode::live);
    return tuigan::mean_all(tuigan::mul(out.image, out.image));
  };
  auto res = testutil::gradcheck(f, params, 1e-5, 1e-3, 4);
  INFO(res.where);
  CHECK(res.ok);
}

TEST_CASE("critic gradients match finite differences") {
  Rng rng(39);
  auto m = tuigan::init_scale_module<double>(0, 26, 4, 0.2, false);
  auto x = testutil::random_tensor(sh3(3, 12, 12), rng);
  std::vector<Tensor<double>> params;
  tuigan::visit_params(m.d_a, "d",
                       [&](const std::string&, Tensor<double> t) { params.push_back(t); });
  auto f = [&]() {
    return tuigan::mean_all(tuigan::discriminator_forward(m.d_a, x, NormMode::live));
  };
  auto res = testutil::gradcheck(f, params, 1e-5, 1e-3, 4);
  INFO(res.where);
  CHECK(res.ok);
}
