#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tuigan/common.hpp"
#include "tuigan/tensor.hpp"

namespace tuigan {

// 3-channel image, values in [-1, 1], channel-major [3][h][w].
template <class T>
struct Image {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<T> data;

  static Image filled(std::int64_t h_, std::int64_t w_, T v) {
    return Image{h_, w_, std::vector<T>(static_cast<std::size_t>(3 * h_ * w_), v)};
  }
  T& at(int c, std::int64_t y, std::int64_t x) { return data[(c * h + y) * w + x]; }
  T at(int c, std::int64_t y, std::int64_t x) const { return data[(c * h + y) * w + x]; }
};

template <class T>
void validate_image(const Image<T>& img, const char* what) {
  if (img.h <= 0 || img.w <= 0 ||
      img.data.size() != static_cast<std::size_t>(3 * img.h * img.w))
    throw ShapeError(std::string(what) + ": malformed image buffer");
}

template <class T>
Tensor<T> to_tensor(const Image<T>& img) {
  validate_image(img, "to_tensor");
  return Tensor<T>::from_vec(sh3(3, img.h, img.w), img.data);
}

template <class T>
Image<T> to_image(const Tensor<T>& t) {
  if (t.shape().nd != 3 || t.shape().d[0] != 3)
    throw ShapeError("to_image: expected [3,h,w], got " + t.shape().str());
  return Image<T>{t.shape().d[1], t.shape().d[2], t.values()};
}

namespace detail {

// Keys cubic kernel, a = -0.5 (Catmull-Rom). Exact interpolation: k(0)=1,
// k(1)=k(2)=0, so same-size resampling is the identity.
template <class T>
T cubic_kernel(T t) {
  t = std::abs(t);
  constexpr T a = T(-0.5);
  if (t <= T(1)) return ((a + T(2)) * t - (a + T(3))) * t * t + T(1);
  if (t < T(2)) return ((a * t - T(5) * a) * t + T(8) * a) * t - T(4) * a;
  return T(0);
}

template <class T>
struct TapRow {
  std::int64_t idx[4];
  T w[4];
};

template <class T>
std::vector<TapRow<T>> cubic_taps(std::int64_t src, std::int64_t dst) {
  std::vector<TapRow<T>> taps(static_cast<std::size_t>(dst));
  const T ratio = static_cast<T>(src) / static_cast<T>(dst);
  for (std::int64_t o = 0; o < dst; ++o) {
    const T center = (static_cast<T>(o) + T(0.5)) * ratio - T(0.5);
    const std::int64_t base = static_cast<std::int64_t>(std::floor(center));
    const T frac = center - static_cast<T>(base);
    for (int k = 0; k < 4; ++k) {
      const std::int64_t src_i = base - 1 + k;
      taps[o].idx[k] = std::clamp<std::int64_t>(src_i, 0, src - 1);
      taps[o].w[k] = cubic_kernel(frac - static_cast<T>(k - 1));
    }
  }
  return taps;
}

}  // namespace detail

// Separable bicubic resampling with clamp-to-edge taps and pixel-center
// coordinate mapping; the same kernel serves both up- and downsampling.
// Output is clamped back into [-1, 1].
template <class T>
Image<T> resample(const Image<T>& img, std::int64_t th, std::int64_t tw) {
  validate_image(img, "resample");
  if (th <= 0 || tw <= 0) throw ShapeError("resample: target dims must be positive");

  const auto xtaps = detail::cubic_taps<T>(img.w, tw);
  const auto ytaps = detail::cubic_taps<T>(img.h, th);

  Image<T> out;
  out.h = th;
  out.w = tw;
  out.data.resize(static_cast<std::size_t>(3 * th * tw));

  std::vector<T> rowpass(static_cast<std::size_t>(img.h * tw));
  for (int c = 0; c < 3; ++c) {
    const T* src = img.data.data() + c * img.h * img.w;
    for (std::int64_t y = 0; y < img.h; ++y) {
      const T* srow = src + y * img.w;
      T* drow = rowpass.data() + y * tw;
      for (std::int64_t x = 0; x < tw; ++x) {
        const auto& t = xtaps[x];
        drow[x] = t.w[0] * srow[t.idx[0]] + t.w[1] * srow[t.idx[1]] +
                  t.w[2] * srow[t.idx[2]] + t.w[3] * srow[t.idx[3]];
      }
    }
    T* dst = out.data.data() + c * th * tw;
    for (std::int64_t y = 0; y < th; ++y) {
      const auto& t = ytaps[y];
      const T* r0 = rowpass.data() + t.idx[0] * tw;
      const T* r1 = rowpass.data() + t.idx[1] * tw;
      const T* r2 = rowpass.data() + t.idx[2] * tw;
      const T* r3 = rowpass.data() + t.idx[3] * tw;
      T* drow = dst + y * tw;
      for (std::int64_t x = 0; x < tw; ++x)
        drow[x] = std::clamp(t.w[0] * r0[x] + t.w[1] * r1[x] + t.w[2] * r2[x] +
                                 t.w[3] * r3[x],
                             T(-1), T(1));
    }
  }
  return out;
}

// Resize so the longer side becomes `max_side`, preserving aspect ratio
// (round-half-up on the short side). No-op when already within bounds.
template <class T>
Image<T> limit_size(const Image<T>& img, std::int64_t max_side) {
  validate_image(img, "limit_size");
  const std::int64_t longer = std::max(img.h, img.w);
  if (longer <= max_side) return img;
  const double f = static_cast<double>(max_side) / static_cast<double>(longer);
  const auto scale_dim = [f](std::int64_t d) {
    return std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::floor(static_cast<double>(d) * f + 0.5)));
  };
  return resample(img, img.h >= img.w ? max_side : scale_dim(img.h),
                  img.w > img.h ? max_side : scale_dim(img.w));
}

template <class T>
struct ImagePyramid {
  std::vector<Image<T>> levels;  // index n: 0 = full resolution, back() = coarsest
  T scale_factor = T(0);
  int num_scales() const { return static_cast<int>(levels.size()) - 1; }
};

constexpr std::int64_t kMinPyramidSide = 16;

// levels[0] is the input unchanged; level n is resampled from the original
// with dims round-half-up(dim * (1/s)^n), the factor accumulated by repeated
// multiplication.
template <class T>
ImagePyramid<T> build_pyramid(const Image<T>& img, int n_scales, T scale_factor,
                              std::int64_t min_size = kMinPyramidSide) {
  validate_image(img, "build_pyramid");
  if (n_scales < 0) throw ConfigError("build_pyramid: n_scales must be >= 0");
  if (!(scale_factor > T(1)))
    throw ConfigError("build_pyramid: scale factor must be > 1");

  const T inv = T(1) / scale_factor;
  const auto round_dim = [](T x) {
    return static_cast<std::int64_t>(std::floor(x + T(0.5)));
  };

  T f = T(1);
  std::vector<std::pair<std::int64_t, std::int64_t>> dims;
  for (int n = 0; n <= n_scales; ++n) {
    dims.emplace_back(round_dim(static_cast<T>(img.h) * f),
                      round_dim(static_cast<T>(img.w) * f));
    f *= inv;
  }
  const auto [ch, cw] = dims.back();
  if (std::min(ch, cw) < min_size)
    throw ConfigError("build_pyramid: coarsest level would be " + std::to_string(ch) +
                      "x" + std::to_string(cw) + " (shorter side < " +
                      std::to_string(min_size) +
                      "); reduce the scale count or use a larger image");

  ImagePyramid<T> pyr;
  pyr.scale_factor = scale_factor;
  pyr.levels.reserve(dims.size());
  pyr.levels.push_back(img);
  for (std::size_t n = 1; n < dims.size(); ++n)
    pyr.levels.push_back(resample(img, dims[n].first, dims[n].second));
  return pyr;
}

// Inference-side resize of a generated map held as a tensor. Values only; the
// input must already be detached from any graph.
template <class T>
Tensor<T> resample_tensor(const Tensor<T>& t, std::int64_t th, std::int64_t tw) {
  if (t.requires_grad())
    throw ContractError("resample_tensor: input must not require grad");
  return to_tensor(resample(to_image(t), th, tw));
}

}  // namespace tuigan
