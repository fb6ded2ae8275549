#pragma once

// Scale-level building blocks: a translation net (phi), an attention net
// (psi) that blends the fresh translation with the upsampled coarser result,
// and a patch discriminator. All convs are 3x3, stride 1, zero pad 1, so
// every map keeps its spatial size and receptive fields grow by 2 per conv:
// phi and the discriminator stack 5 convs for an 11x11 patch, psi stacks 4.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tuigan/common.hpp"
#include "tuigan/tensor.hpp"

namespace tuigan {

constexpr double kNormEps = 1e-5;
constexpr std::int64_t kPatchSide = 11;

// frozen_stats stops gradients through the normalization statistics without
// changing any value; gradient-support probes use it so the measured support
// is the conv stack's geometric receptive field rather than the whole image.
enum class NormMode { live, frozen_stats };

template <class T>
struct Conv3x3 {
  std::int64_t in_c = 0, out_c = 0;
  Tensor<T> w;  // [out_c, in_c*9]
  Tensor<T> b;  // [out_c]
};

// Per-channel normalization over spatial positions. With a batch of one this
// is what batch normalization degenerates to; the same live statistics are
// used in training and inference.
template <class T>
struct ChannelNorm {
  Tensor<T> gain;   // [c]
  Tensor<T> shift;  // [c]
};

template <class T>
struct ConvBlock {
  Conv3x3<T> conv;
  ChannelNorm<T> norm;
};

template <class T>
struct PhiNet {
  std::vector<ConvBlock<T>> blocks;
  Conv3x3<T> head;  // -> 3 channels, tanh
  T slope = T(0.2);
};

template <class T>
struct PsiNet {
  std::vector<ConvBlock<T>> blocks;
  Conv3x3<T> head;  // -> 3-channel mask, sigmoid
  T slope = T(0.2);
};

template <class T>
struct Discriminator {
  std::vector<ConvBlock<T>> blocks;
  Conv3x3<T> head;  // -> 1-channel patch score map
  T slope = T(0.2);
};

template <class T>
struct Generator {
  PhiNet<T> phi;
  std::optional<PsiNet<T>> psi;  // absent at the coarsest scale and under the
                                 // no-attention ablation
};

template <class T>
struct ScaleModule {
  int scale_index = -1;
  bool frozen = false;
  Generator<T> g_ab, g_ba;
  Discriminator<T> d_a, d_b;
};

template <class T>
Tensor<T> conv_apply(const Conv3x3<T>& cv, const Tensor<T>& x) {
  if (x.shape().nd != 3 || x.shape().d[0] != cv.in_c)
    throw ShapeError("conv_apply: expected [" + std::to_string(cv.in_c) +
                     ",h,w], got " + x.shape().str());
  const std::int64_t h = x.shape().d[1], w = x.shape().d[2];
  auto y = reshape(matmul(cv.w, im2col3(x)), sh3(cv.out_c, h, w));
  return add(y, chan_bcast(cv.b, h, w));
}

template <class T>
Tensor<T> norm_apply(const ChannelNorm<T>& nm, const Tensor<T>& x, NormMode mode) {
  const std::int64_t h = x.shape().d[1], w = x.shape().d[2];
  const T inv_n = T(1) / static_cast<T>(h * w);
  auto mu = mul_scalar(chan_sum(x), inv_n);
  if (mode == NormMode::frozen_stats) mu = mu.detach();
  auto xc = sub(x, chan_bcast(mu, h, w));
  auto var = mul_scalar(chan_sum(mul(xc, xc)), inv_n);
  if (mode == NormMode::frozen_stats) var = var.detach();
  auto denom = chan_bcast(sqrt_t(add_scalar(var, T(kNormEps))), h, w);
  auto xhat = div(xc, denom);
  return add(mul(xhat, chan_bcast(nm.gain, h, w)), chan_bcast(nm.shift, h, w));
}

template <class T>
Tensor<T> block_apply(const ConvBlock<T>& blk, const Tensor<T>& x, T slope,
                      NormMode mode) {
  return leaky_relu(norm_apply(blk.norm, conv_apply(blk.conv, x), mode), slope);
}

template <class T>
Tensor<T> phi_forward(const PhiNet<T>& phi, const Tensor<T>& x, NormMode mode) {
  Tensor<T> h = x;
  for (const auto& blk : phi.blocks) h = block_apply(blk, h, phi.slope, mode);
  return tanh_t(conv_apply(phi.head, h));
}

template <class T>
Tensor<T> psi_forward(const PsiNet<T>& psi, const Tensor<T>& x, NormMode mode) {
  Tensor<T> h = x;
  for (const auto& blk : psi.blocks) h = block_apply(blk, h, psi.slope, mode);
  return sigmoid_t(conv_apply(psi.head, h));
}

// Patch score map, one score per pixel, [1,h,w]. The input must cover at
// least one full patch.
template <class T>
Tensor<T> discriminator_forward(const Discriminator<T>& d, const Tensor<T>& img,
                                NormMode mode = NormMode::live) {
  if (img.shape().nd != 3 || img.shape().d[0] != 3)
    throw ShapeError("discriminator_forward: expected [3,h,w], got " +
                     img.shape().str());
  if (img.shape().d[1] < kPatchSide || img.shape().d[2] < kPatchSide)
    throw ShapeError("discriminator_forward: input " + img.shape().str() +
                     " is smaller than the " + std::to_string(kPatchSide) + "x" +
                     std::to_string(kPatchSide) + " patch");
  Tensor<T> h = img;
  for (const auto& blk : d.blocks) h = block_apply(blk, h, d.slope, mode);
  return conv_apply(d.head, h);
}

template <class T>
struct GenOut {
  Tensor<T> image;
  Tensor<T> mask;  // undefined when no blending happened
};

// One generator application. Without a coarser result this is a direct
// translation; with one, the fresh translation and the upsampled coarser
// result are blended per pixel: mask * fresh + (1 - mask) * coarse. The mask
// comes from psi when present, a fixed 0.5 otherwise, and mask_override wins
// over both (ablations and blend probes).
template <class T>
GenOut<T> generator_forward(const Generator<T>& gen, const Tensor<T>& source,
                            const std::optional<Tensor<T>>& prev_up = {},
                            NormMode mode = NormMode::live,
                            const std::optional<Tensor<T>>& mask_override = {}) {
  if (source.shape().nd != 3 || source.shape().d[0] != 3)
    throw ShapeError("generator_forward: expected [3,h,w], got " +
                     source.shape().str());
  auto fresh = phi_forward(gen.phi, source, mode);
  if (!prev_up) return {fresh, Tensor<T>()};

  if (prev_up->shape() != source.shape())
    throw ShapeError("generator_forward: coarse result " + prev_up->shape().str() +
                     " does not match source " + source.shape().str());
  const std::int64_t h = source.shape().d[1], w = source.shape().d[2];
  Tensor<T> mask;
  if (mask_override) {
    if (mask_override->shape() != sh3(3, h, w))
      throw ShapeError("generator_forward: mask override shape " +
                       mask_override->shape().str());
    mask = *mask_override;
  } else if (gen.psi) {
    mask = psi_forward(*gen.psi, concat_c<T>({fresh, source, *prev_up}), mode);
  } else {
    mask = Tensor<T>::full(sh3(3, h, w), T(0.5));
  }
  auto inv = sub(Tensor<T>::full(sh3(3, h, w), T(1)), mask);
  return {add(mul(mask, fresh), mul(inv, *prev_up)), mask};
}

namespace detail {

template <class T>
Conv3x3<T> init_conv(Rng& rng, std::int64_t in_c, std::int64_t out_c, T wstd) {
  Conv3x3<T> cv;
  cv.in_c = in_c;
  cv.out_c = out_c;
  std::vector<T> w(static_cast<std::size_t>(out_c * in_c * 9));
  for (auto& v : w) v = static_cast<T>(rng.gaussian(0.0, wstd));
  cv.w = Tensor<T>::from_vec(sh2(out_c, in_c * 9), std::move(w), true);
  cv.b = Tensor<T>::from_vec(sh1(out_c),
                             std::vector<T>(static_cast<std::size_t>(out_c), T(0)),
                             true);
  return cv;
}

template <class T>
ChannelNorm<T> init_norm(Rng& rng, std::int64_t c, T gstd) {
  ChannelNorm<T> nm;
  std::vector<T> g(static_cast<std::size_t>(c));
  for (auto& v : g) v = static_cast<T>(rng.gaussian(1.0, gstd));
  nm.gain = Tensor<T>::from_vec(sh1(c), std::move(g), true);
  nm.shift = Tensor<T>::from_vec(sh1(c),
                                 std::vector<T>(static_cast<std::size_t>(c), T(0)),
                                 true);
  return nm;
}

template <class T>
ConvBlock<T> init_block(Rng& rng, std::int64_t in_c, std::int64_t out_c, T wstd) {
  return ConvBlock<T>{init_conv<T>(rng, in_c, out_c, wstd),
                      init_norm<T>(rng, out_c, wstd)};
}

}  // namespace detail

// Conv weights N(0, 0.02), biases 0, norm gains N(1, 0.02), shifts 0; draws
// happen in a fixed field order from the given stream, so the same seed
// rebuilds identical parameters.
template <class T>
PhiNet<T> init_phi(Rng& rng, int channels, T slope) {
  constexpr T ws = T(0.02);
  PhiNet<T> phi;
  phi.slope = slope;
  phi.blocks.push_back(detail::init_block<T>(rng, 3, channels, ws));
  for (int i = 0; i < 3; ++i)
    phi.blocks.push_back(detail::init_block<T>(rng, channels, channels, ws));
  phi.head = detail::init_conv<T>(rng, channels, 3, ws);
  return phi;
}

template <class T>
PsiNet<T> init_psi(Rng& rng, int channels, T slope) {
  constexpr T ws = T(0.02);
  PsiNet<T> psi;
  psi.slope = slope;
  psi.blocks.push_back(detail::init_block<T>(rng, 9, channels, ws));
  for (int i = 0; i < 2; ++i)
    psi.blocks.push_back(detail::init_block<T>(rng, channels, channels, ws));
  psi.head = detail::init_conv<T>(rng, channels, 3, ws);
  return psi;
}

template <class T>
Discriminator<T> init_discriminator(Rng& rng, int channels, T slope) {
  constexpr T ws = T(0.02);
  Discriminator<T> d;
  d.slope = slope;
  d.blocks.push_back(detail::init_block<T>(rng, 3, channels, ws));
  for (int i = 0; i < 3; ++i)
    d.blocks.push_back(detail::init_block<T>(rng, channels, channels, ws));
  d.head = detail::init_conv<T>(rng, channels, 1, ws);
  return d;
}

template <class T>
Generator<T> init_generator(Rng& rng, int channels, T slope, bool with_psi) {
  Generator<T> g;
  g.phi = init_phi<T>(rng, channels, slope);
  if (with_psi) g.psi = init_psi<T>(rng, channels, slope);
  return g;
}

// with_psi should be false at the coarsest scale (nothing to blend) and under
// the no-attention ablation.
template <class T>
ScaleModule<T> init_scale_module(int scale_index, std::uint64_t seed, int channels,
                                 T slope, bool with_psi) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(scale_index) + 0x1000));
  ScaleModule<T> m;
  m.scale_index = scale_index;
  m.g_ab = init_generator<T>(rng, channels, slope, with_psi);
  m.g_ba = init_generator<T>(rng, channels, slope, with_psi);
  m.d_a = init_discriminator<T>(rng, channels, slope);
  m.d_b = init_discriminator<T>(rng, channels, slope);
  return m;
}

// Fixed-order parameter walk shared by the optimizer, serialization, and the
// freeze logic. Handles are passed by value; they alias the module's storage.
template <class T, class F>
void visit_params(const Conv3x3<T>& cv, const std::string& prefix, F&& f) {
  f(prefix + ".w", cv.w);
  f(prefix + ".b", cv.b);
}

template <class T, class F>
void visit_params(const ChannelNorm<T>& nm, const std::string& prefix, F&& f) {
  f(prefix + ".gain", nm.gain);
  f(prefix + ".shift", nm.shift);
}

template <class T, class F>
void visit_params(const PhiNet<T>& phi, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < phi.blocks.size(); ++i) {
    visit_params(phi.blocks[i].conv, prefix + ".b" + std::to_string(i) + ".conv", f);
    visit_params(phi.blocks[i].norm, prefix + ".b" + std::to_string(i) + ".norm", f);
  }
  visit_params(phi.head, prefix + ".head", f);
}

template <class T, class F>
void visit_params(const PsiNet<T>& psi, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < psi.blocks.size(); ++i) {
    visit_params(psi.blocks[i].conv, prefix + ".b" + std::to_string(i) + ".conv", f);
    visit_params(psi.blocks[i].norm, prefix + ".b" + std::to_string(i) + ".norm", f);
  }
  visit_params(psi.head, prefix + ".head", f);
}

template <class T, class F>
void visit_params(const Discriminator<T>& d, const std::string& prefix, F&& f) {
  for (std::size_t i = 0; i < d.blocks.size(); ++i) {
    visit_params(d.blocks[i].conv, prefix + ".b" + std::to_string(i) + ".conv", f);
    visit_params(d.blocks[i].norm, prefix + ".b" + std::to_string(i) + ".norm", f);
  }
  visit_params(d.head, prefix + ".head", f);
}

template <class T, class F>
void visit_params(const Generator<T>& g, const std::string& prefix, F&& f) {
  visit_params(g.phi, prefix + ".phi", f);
  if (g.psi) visit_params(*g.psi, prefix + ".psi", f);
}

template <class T, class F>
void visit_params(const ScaleModule<T>& m, F&& f) {
  visit_params(m.g_ab, "gab", f);
  visit_params(m.g_ba, "gba", f);
  visit_params(m.d_a, "da", f);
  visit_params(m.d_b, "db", f);
}

template <class T>
std::vector<Tensor<T>> generator_params(const ScaleModule<T>& m) {
  std::vector<Tensor<T>> out;
  visit_params(m.g_ab, "gab", [&](const std::string&, Tensor<T> t) { out.push_back(t); });
  visit_params(m.g_ba, "gba", [&](const std::string&, Tensor<T> t) { out.push_back(t); });
  return out;
}

template <class T>
std::vector<Tensor<T>> discriminator_params(const ScaleModule<T>& m) {
  std::vector<Tensor<T>> out;
  visit_params(m.d_a, "da", [&](const std::string&, Tensor<T> t) { out.push_back(t); });
  visit_params(m.d_b, "db", [&](const std::string&, Tensor<T> t) { out.push_back(t); });
  return out;
}

template <class T>
void set_trainable(const ScaleModule<T>& m, bool on) {
  visit_params<T>(m, [on](const std::string&, Tensor<T> t) { t.set_requires_grad(on); });
}

}  // namespace tuigan
