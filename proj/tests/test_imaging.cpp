#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>

#include "testutil.hpp"
#include "tuigan/image.hpp"
#include "tuigan/image_io.hpp"

using tuigan::Image;

TEST_CASE("byte-to-signed mapping hits exact endpoints") {
  // Round-trip a small PNG carrying the critical byte values.
  auto dir = testutil::tmp_dir("io_map");
  Image<double> img = Image<double>::filled(1, 4, 0.0);
  // channel 0 row: bytes 0, 255, 128, 64 after encoding
  img.at(0, 0, 0) = -1.0;
  img.at(0, 0, 1) = 1.0;
  img.at(0, 0, 2) = 1.0 / 255.0;
  img.at(0, 0, 3) = 64.0 / 255.0 * 2.0 - 1.0;
  const auto path = (dir / "map.png").string();
  tuigan::save_image(img, path);
  auto back = tuigan::load_image<double>(path);
  REQUIRE(back.h == 1);
  REQUIRE(back.w == 4);
  CHECK(back.at(0, 0, 0) == -1.0);
  CHECK(back.at(0, 0, 1) == 1.0);
  CHECK(back.at(0, 0, 2) == 1.0 / 255.0);
  CHECK(back.at(0, 0, 3) == -127.0 / 255.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("png save/load round trip is lossless") {
  auto dir = testutil::tmp_dir("io_roundtrip");
  auto img = testutil::random_image(13, 17, 99);
  const auto path = (dir / "rt.png").string();
  tuigan::save_image(img, path);
  auto back = tuigan::load_image<double>(path);
  REQUIRE(back.h == img.h);
  REQUIRE(back.w == img.w);
  // Quantization moves values at most half a step; re-saving must be exact.
  double worst = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
  CHECK(worst <= 1.0 / 255.0);
  const auto path2 = (dir / "rt2.png").string();
  tuigan::save_image(back, path2);
  auto back2 = tuigan::load_image<double>(path2);
  CHECK(back2.data == back.data);
  std::filesystem::remove_all(dir);
}

TEST_CASE("missing and malformed files raise distinct errors") {
  auto dir = testutil::tmp_dir("io_errors");
  CHECK_THROWS_AS(tuigan::load_image<double>((dir / "absent.png").string()),
                  tuigan::IoError);
  const auto junk = dir / "junk.png";
  {
    std::ofstream out(junk, std::ios::binary);
    out << "this is not an image at all";
  }
  CHECK_THROWS_AS(tuigan::load_image<double>(junk.string()), tuigan::FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("same-size resample is the identity") {
  auto img = testutil::random_image(9, 11, 5);
  auto out = tuigan::resample(img, 9, 11);
  CHECK(out.data == img.data);
}

TEST_CASE("resampling preserves constant images") {
  auto img = Image<double>::filled(10, 14, 0.37);
  auto up = tuigan::resample(img, 23, 31);
  auto down = tuigan::resample(img, 5, 6);
  for (double v : up.data) CHECK(std::abs(v - 0.37) <= 1e-12);
  for (double v : down.data) CHECK(std::abs(v - 0.37) <= 1e-12);
}

TEST_CASE("checkerboard survives up-down round trip") {
  Image<double> img = Image<double>::filled(2, 2, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) img.at(c, y, x) = ((y + x) % 2 == 0) ? 0.5 : -0.5;
  auto up = tuigan::resample(img, 4, 4);
  auto back = tuigan::resample(up, 2, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    worst = std::max(worst, std::abs(img.data[i] - back.data[i]));
  CHECK(worst <= 0.1);
}

TEST_CASE("resample output stays within the signed range") {
  // Cubic overshoot near sharp edges must be clamped.
  Image<double> img = Image<double>::filled(6, 6, -1.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 3; x < 6; ++x) img.at(c, y, x) = 1.0;
  auto up = tuigan::resample(img, 24, 24);
  for (double v : up.data) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }
}

TEST_CASE("pyramid dimensions follow the rounding rule") {
  auto img = testutil::random_image(250, 250, 1);
  auto pyr = tuigan::build_pyramid(img, 4, 4.0 / 3.0);
  REQUIRE(pyr.num_scales() == 4);
  REQUIRE(pyr.levels.size() == 5);
  const std::int64_t expect[5] = {250, 188, 141, 105, 79};
  for (int n = 0; n < 5; ++n) {
    CHECK(pyr.levels[n].h == expect[n]);
    CHECK(pyr.levels[n].w == expect[n]);
  }
  // Level 0 must be the input itself, untouched.
  CHECK(pyr.levels[0].data == img.data);
}

TEST_CASE("pyramid handles rectangular inputs") {
  auto img = testutil::random_image(200, 120, 2);
  auto pyr = tuigan::build_pyramid(img, 3, 4.0 / 3.0);
  REQUIRE(pyr.num_scales() == 3);
  REQUIRE(pyr.levels.size() == 4);
  CHECK(pyr.levels[1].h == 150);
  CHECK(pyr.levels[1].w == 90);
  for (int n = 1; n <= 3; ++n) {
    CHECK(pyr.levels[n].h < pyr.levels[n - 1].h);
    CHECK(pyr.levels[n].w < pyr.levels[n - 1].w);
  }
}

TEST_CASE("pyramid rejects scales below the minimum side") {
  auto img = testutil::random_image(40, 40, 3);
  CHECK_THROWS_AS(tuigan::build_pyramid(img, 4, 4.0 / 3.0), tuigan::ConfigError);
  CHECK_NOTHROW(tuigan::build_pyramid(img, 3, 4.0 / 3.0));
}

TEST_CASE("limit_size bounds the longer side and keeps aspect") {
  auto img = testutil::random_image(500, 300, 4);
  auto small = tuigan::limit_size(img, 250);
  CHECK(small.h == 250);
  CHECK(small.w == 150);

  auto wide = testutil::random_image(100, 400, 5);
  auto ws = tuigan::limit_size(wide, 200);
  CHECK(ws.h == 50);
  CHECK(ws.w == 200);

  // Already within bounds: untouched.
  auto same = tuigan::limit_size(img, 500);
  CHECK(same.data == img.data);
}

TEST_CASE("tensor/image conversions agree") {
  auto img = testutil::random_image(5, 7, 6);
  auto t = tuigan::to_tensor(img);
  REQUIRE(t.shape() == tuigan::sh3(3, 5, 7));
  auto back = tuigan::to_image(t);
  CHECK(back.data == img.data);
}

TEST_CASE("resample_tensor matches image resample") {
  auto img = testutil::random_image(10, 12, 7);
  auto viaimg = tuigan::resample(img, 17, 23);
  auto viaten = tuigan::to_image(tuigan::resample_tensor(tuigan::to_tensor(img), 17, 23));
  CHECK(viaimg.data == viaten.data);
}
