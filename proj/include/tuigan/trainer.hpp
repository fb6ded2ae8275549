#pragma once

// Coarse-to-fine training. Scales are trained one at a time from the
// coarsest; once a scale finishes it is frozen and only ever evaluated. At
// each finer scale the six chain entries (two translations, two cycle
// reconstructions, two identity maps) condition on the upsampled outputs of
// the already-frozen coarser chain.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tuigan/common.hpp"
#include "tuigan/image.hpp"
#include "tuigan/losses.hpp"
#include "tuigan/networks.hpp"
#include "tuigan/tensor.hpp"

namespace tuigan {

enum class Direction { ab, ba };

inline const char* direction_name(Direction d) { return d == Direction::ab ? "ab" : "ba"; }

template <class T>
struct TrainConfig {
  int n_scales = 4;                 // coarsest scale index; scale 0 is full resolution
  T scale_factor = T(4) / T(3);
  int iters_per_scale = 4000;
  T lr_initial = T(5e-4);
  int lr_decay_interval = 1600;
  T lr_decay_factor = T(0.1);
  LossWeights<T> weights{};
  std::uint64_t seed = 42;
  int d_steps = 1;
  int g_steps = 1;
  std::int64_t min_size = kMinPyramidSide;
  int channels = 32;
  bool use_attention = true;
  std::int64_t max_size = 250;      // input images are bounded to this before training
  T leaky_slope = T(0.2);

  void validate() const {
    if (n_scales < 0) throw ConfigError("n_scales must be >= 0");
    if (!(scale_factor > T(1))) throw ConfigError("scale_factor must be > 1");
    if (iters_per_scale < 0) throw ConfigError("iters_per_scale must be >= 0");
    if (!(lr_initial > T(0))) throw ConfigError("lr_initial must be > 0");
    if (lr_decay_interval <= 0) throw ConfigError("lr_decay_interval must be > 0");
    if (!(lr_decay_factor > T(0) && lr_decay_factor <= T(1)))
      throw ConfigError("lr_decay_factor must lie in (0,1]");
    if (d_steps < 1 || g_steps < 1)
      throw ConfigError("d_steps and g_steps must be >= 1");
    if (min_size < kPatchSide)
      throw ConfigError("min_size must be >= the discriminator patch side (" +
                        std::to_string(kPatchSide) + ")");
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (max_size < min_size) throw ConfigError("max_size must be >= min_size");
    if (!(leaky_slope > T(0) && leaky_slope < T(1)))
      throw ConfigError("leaky_slope must lie in (0,1)");
    weights.validate();
  }
};

// Reduced footprint for fast end-to-end runs; callers resize inputs to 64x64.
// The learning rate is scaled down with the iteration budget: at the full-run
// rate the reconstruction terms hit their floor within ~20 iterations of a
// 200-iteration scale, leaving nothing of the descent to observe.
template <class T>
TrainConfig<T> smoke_config() {
  TrainConfig<T> cfg;
  cfg.n_scales = 2;
  cfg.iters_per_scale = 200;
  cfg.channels = 16;
  cfg.max_size = 64;
  cfg.lr_initial = T(1e-4);
  return cfg;
}

// Step-decayed schedule: lr_initial * factor^floor(iteration / interval).
template <class T>
T lr_at(int iteration, const TrainConfig<T>& cfg) {
  if (iteration < 0) throw ConfigError("lr_at: iteration must be >= 0");
  const int k = iteration / cfg.lr_decay_interval;
  return cfg.lr_initial * static_cast<T>(std::pow(static_cast<double>(cfg.lr_decay_factor), k));
}

template <class T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, T beta1 = T(0.5), T beta2 = T(0.999),
                T eps = T(1e-8))
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
      v_[i].assign(static_cast<std::size_t>(params_[i].numel()), T(0));
    }
  }

  void step(T lr, const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params_.size())
      throw ContractError("optimizer step: gradient count mismatch");
    ++t_;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), t_));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (grads[i].shape() != params_[i].shape())
        throw ShapeError("optimizer step: gradient shape mismatch");
      T* p = params_[i].mutable_data();
      const T* g = grads[i].data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const std::size_t n = m_[i].size();
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
        p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T beta1_, beta2_, eps_;
  long t_ = 0;
};

template <class T>
struct ScaleChain {
  Tensor<T> ab, ba;      // translations of this scale's pyramid levels
  Tensor<T> aba, bab;    // cycle reconstructions
  Tensor<T> aa, bb;      // identity maps (g_ba on a, g_ab on b)
  Tensor<T> mask_ab, mask_ba;  // blend masks; undefined at the coarsest scale
};

template <class T>
struct ChainOutputs {
  int n_scales = 0;
  int down_to = 0;
  std::vector<ScaleChain<T>> scales;  // indexed by scale; valid in [down_to, n_scales]

  const ScaleChain<T>& at(int n) const {
    if (n < down_to || n > n_scales)
      throw ContractError("chain outputs: scale " + std::to_string(n) +
                          " outside computed range [" + std::to_string(down_to) +
                          "," + std::to_string(n_scales) + "]");
    return scales[static_cast<std::size_t>(n)];
  }
};

template <class T>
struct TuiGANModel {
  TrainConfig<T> config;
  std::vector<std::optional<ScaleModule<T>>> scales;  // index = scale

  bool has_scale(int n) const {
    return n >= 0 && n < static_cast<int>(scales.size()) &&
           scales[static_cast<std::size_t>(n)].has_value();
  }
  ScaleModule<T>& scale(int n) {
    if (!has_scale(n)) throw ContractError("scale " + std::to_string(n) + " missing");
    return *scales[static_cast<std::size_t>(n)];
  }
  const ScaleModule<T>& scale(int n) const {
    if (!has_scale(n)) throw ContractError("scale " + std::to_string(n) + " missing");
    return *scales[static_cast<std::size_t>(n)];
  }
};

template <class T>
ScaleModule<T> init_scale_module(int scale_index, std::uint64_t seed,
                                 const TrainConfig<T>& cfg) {
  const bool with_psi = cfg.use_attention && scale_index != cfg.n_scales;
  return init_scale_module<T>(scale_index, seed, cfg.channels, cfg.leaky_slope,
                              with_psi);
}

template <class T>
TuiGANModel<T> make_model(const TrainConfig<T>& cfg) {
  cfg.validate();
  TuiGANModel<T> m;
  m.config = cfg;
  m.scales.resize(static_cast<std::size_t>(cfg.n_scales) + 1);
  return m;
}

namespace detail {

template <class T>
Tensor<T> upsample_to(const Tensor<T>& t, std::int64_t h, std::int64_t w) {
  return resample_tensor(t, h, w);
}

// Walks the chain coarse-to-fine; apply(n, dir, source, prev_up) runs one
// generator application. Templated so tests can substitute stub generators.
template <class T, class Apply>
ChainOutputs<T> run_chain(int n_scales, int down_to, const std::vector<Tensor<T>>& ia,
                          const std::vector<Tensor<T>>& ib, Apply&& apply) {
  if (down_to < 0 || down_to > n_scales)
    throw ContractError("run_chain: down_to out of range");
  ChainOutputs<T> out;
  out.n_scales = n_scales;
  out.down_to = down_to;
  out.scales.resize(static_cast<std::size_t>(n_scales) + 1);
  NoGradGuard inference;
  for (int n = n_scales; n >= down_to; --n) {
    auto& ch = out.scales[static_cast<std::size_t>(n)];
    const auto& a = ia[static_cast<std::size_t>(n)];
    const auto& b = ib[static_cast<std::size_t>(n)];
    if (n == n_scales) {
      auto gab = apply(n, Direction::ab, a, std::optional<Tensor<T>>{});
      auto gba = apply(n, Direction::ba, b, std::optional<Tensor<T>>{});
      ch.ab = gab.image;
      ch.ba = gba.image;
      ch.aba = apply(n, Direction::ba, ch.ab, std::optional<Tensor<T>>{}).image;
      ch.bab = apply(n, Direction::ab, ch.ba, std::optional<Tensor<T>>{}).image;
      ch.aa = apply(n, Direction::ba, a, std::optional<Tensor<T>>{}).image;
      ch.bb = apply(n, Direction::ab, b, std::optional<Tensor<T>>{}).image;
    } else {
      const auto& prev = out.scales[static_cast<std::size_t>(n) + 1];
      const std::int64_t h = a.shape().d[1], w = a.shape().d[2];
      auto up = [&](const Tensor<T>& t) { return upsample_to(t, h, w); };
      auto gab = apply(n, Direction::ab, a, std::optional<Tensor<T>>{up(prev.ab)});
      auto gba = apply(n, Direction::ba, b, std::optional<Tensor<T>>{up(prev.ba)});
      ch.ab = gab.image;
      ch.mask_ab = gab.mask;
      ch.ba = gba.image;
      ch.mask_ba = gba.mask;
      ch.aba =
          apply(n, Direction::ba, ch.ab, std::optional<Tensor<T>>{up(prev.aba)}).image;
      ch.bab =
          apply(n, Direction::ab, ch.ba, std::optional<Tensor<T>>{up(prev.bab)}).image;
      ch.aa = apply(n, Direction::ba, a, std::optional<Tensor<T>>{up(prev.aa)}).image;
      ch.bb = apply(n, Direction::ab, b, std::optional<Tensor<T>>{up(prev.bb)}).image;
    }
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> pyramid_tensors(const ImagePyramid<T>& pyr) {
  std::vector<Tensor<T>> out;
  out.reserve(pyr.levels.size());
  for (const auto& lvl : pyr.levels) out.push_back(to_tensor(lvl));
  return out;
}

}  // namespace detail

// Inference walk over the trained (or at least initialized) scales; no
// gradients are recorded.
template <class T>
ChainOutputs<T> pyramid_forward(const TuiGANModel<T>& model, const ImagePyramid<T>& pyr_a,
                                const ImagePyramid<T>& pyr_b, int down_to,
                                NormMode mode = NormMode::live) {
  const int n_scales = model.config.n_scales;
  if (pyr_a.num_scales() != n_scales || pyr_b.num_scales() != n_scales)
    throw ContractError("pyramid_forward: pyramid depth does not match the model");
  for (int n = n_scales; n >= down_to; --n)
    if (!model.has_scale(n))
      throw ContractError("pyramid_forward: scale " + std::to_string(n) +
                          " is not initialized");
  auto ia = detail::pyramid_tensors(pyr_a);
  auto ib = detail::pyramid_tensors(pyr_b);
  return detail::run_chain<T>(
      n_scales, down_to, ia, ib,
      [&](int n, Direction dir, const Tensor<T>& src,
          const std::optional<Tensor<T>>& prev) {
        const auto& m = model.scale(n);
        return generator_forward(dir == Direction::ab ? m.g_ab : m.g_ba, src, prev,
                                 mode);
      });
}

// Trains scale n in place and freezes it. Requires all coarser scales frozen
// and scale n already initialized (freshly, or restored for retraining).
template <class T>
const ScaleModule<T>& train_scale(
    int n, TuiGANModel<T>& model, const ImagePyramid<T>& pyr_a,
    const ImagePyramid<T>& pyr_b, const TrainConfig<T>& cfg,
    const std::function<void(int, int, const LossReport<T>&)>& on_report = {}) {
  cfg.validate();
  const int n_scales = cfg.n_scales;
  if (n < 0 || n > n_scales) throw ContractError("train_scale: scale out of range");
  if (pyr_a.num_scales() != n_scales || pyr_b.num_scales() != n_scales)
    throw ContractError("train_scale: pyramid depth does not match the config");
  if (!model.has_scale(n))
    throw ContractError("train_scale: scale " + std::to_string(n) +
                        " must be initialized first");
  for (int m = n + 1; m <= n_scales; ++m) {
    if (!model.has_scale(m) || !model.scale(m).frozen)
      throw ContractError("train_scale: coarser scale " + std::to_string(m) +
                          " must be trained and frozen before scale " +
                          std::to_string(n));
  }
  ScaleModule<T>& module = model.scale(n);
  if (module.frozen) throw ContractError("train_scale: scale already frozen");

  const Tensor<T> ia = to_tensor(pyr_a.levels[static_cast<std::size_t>(n)]);
  const Tensor<T> ib = to_tensor(pyr_b.levels[static_cast<std::size_t>(n)]);
  const std::int64_t h = ia.shape().d[1], w = ia.shape().d[2];

  // Conditioning from the frozen coarser chain is constant for the whole
  // scale, so it is computed once; recomputing per iteration would produce
  // bit-identical values.
  std::optional<Tensor<T>> prev_ab, prev_ba, prev_aba, prev_bab, prev_aa, prev_bb;
  if (n < n_scales) {
    auto coarse = pyramid_forward(model, pyr_a, pyr_b, n + 1);
    const auto& pc = coarse.at(n + 1);
    prev_ab = detail::upsample_to(pc.ab, h, w);
    prev_ba = detail::upsample_to(pc.ba, h, w);
    prev_aba = detail::upsample_to(pc.aba, h, w);
    prev_bab = detail::upsample_to(pc.bab, h, w);
    prev_aa = detail::upsample_to(pc.aa, h, w);
    prev_bb = detail::upsample_to(pc.bb, h, w);
  }

  set_trainable(module, true);
  Adam<T> opt_g(generator_params(module));
  Adam<T> opt_d(discriminator_params(module));
  Rng rng(mix_seed(cfg.seed, 0x7261696eULL + static_cast<std::uint64_t>(n)));

  const auto d_a_fn = [&](const Tensor<T>& x) {
    return discriminator_forward(module.d_a, x);
  };
  const auto d_b_fn = [&](const Tensor<T>& x) {
    return discriminator_forward(module.d_b, x);
  };
  const auto build_chain = [&]() {
    ScaleChain<T> ch;
    auto gab = generator_forward(module.g_ab, ia, prev_ab);
    auto gba = generator_forward(module.g_ba, ib, prev_ba);
    ch.ab = gab.image;
    ch.mask_ab = gab.mask;
    ch.ba = gba.image;
    ch.mask_ba = gba.mask;
    ch.aba = generator_forward(module.g_ba, ch.ab, prev_aba).image;
    ch.bab = generator_forward(module.g_ab, ch.ba, prev_bab).image;
    ch.aa = generator_forward(module.g_ba, ia, prev_aa).image;
    ch.bb = generator_forward(module.g_ab, ib, prev_bb).image;
    return ch;
  };

  for (int iter = 0; iter < cfg.iters_per_scale; ++iter) {
    const T lr = lr_at(iter, cfg);
    ScaleChain<T> ch = build_chain();

    T d_obj_val = T(0);
    for (int k = 0; k < cfg.d_steps; ++k) {
      const T alpha_a = static_cast<T>(rng.uniform());
      const T alpha_b = static_cast<T>(rng.uniform());
      auto obj_a = wgan_gp_discriminator_objective<T>(d_a_fn, ia, ch.ba,
                                                      cfg.weights.lambda_pen, alpha_a);
      auto obj_b = wgan_gp_discriminator_objective<T>(d_b_fn, ib, ch.ab,
                                                      cfg.weights.lambda_pen, alpha_b);
      auto d_obj = add(obj_a, obj_b);
      d_obj_val = d_obj.item();
      auto d_params = discriminator_params(module);
      auto d_grads = grad(neg(d_obj), d_params);
      opt_d.step(lr, d_grads);
    }

    LossReport<T> report;
    for (int k = 0; k < cfg.g_steps; ++k) {
      if (k > 0) ch = build_chain();
      auto adv = add(wgan_gp_generator_objective<T>(d_b_fn, ch.ab),
                     wgan_gp_generator_objective<T>(d_a_fn, ch.ba));
      auto cyc = cycle_loss(ia, ch.aba, ib, ch.bab);
      auto idt = identity_loss(ia, ch.aa, ib, ch.bb);
      auto tv = tv_loss(ch.ab, ch.ba);
      Tensor<T> total;
      try {
        total = total_loss(adv, cyc, idt, tv, cfg.weights);
      } catch (const DivergenceError&) {
        throw DivergenceError("training diverged at scale " + std::to_string(n) +
                                  ", iteration " + std::to_string(iter),
                              n, iter);
      }
      auto g_params = generator_params(module);
      auto g_grads = grad(total, g_params);
      opt_g.step(lr, g_grads);
      report = LossReport<T>{adv.item(), cyc.item(), idt.item(),
                             tv.item(),  total.item(), d_obj_val};
    }

    if (!report.finite())
      throw DivergenceError("training diverged at scale " + std::to_string(n) +
                                ", iteration " + std::to_string(iter),
                            n, iter);
    if (on_report) on_report(iter, n, report);
  }

  set_trainable(module, false);
  module.frozen = true;
  return module;
}

template <class T>
struct TrainHooks {
  std::function<void(int, int, const LossReport<T>&)> on_report;
  std::function<void(int, const TuiGANModel<T>&)> on_scale_complete;
  // Returns true and fills the module when a finished scale could be restored.
  std::function<bool(int, ScaleModule<T>&)> try_restore;
};

template <class T>
TuiGANModel<T> train_all(const Image<T>& img_a, const Image<T>& img_b,
                         const TrainConfig<T>& cfg, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  auto pyr_a = build_pyramid(img_a, cfg.n_scales, cfg.scale_factor, cfg.min_size);
  auto pyr_b = build_pyramid(img_b, cfg.n_scales, cfg.scale_factor, cfg.min_size);
  auto model = make_model(cfg);
  for (int n = cfg.n_scales; n >= 0; --n) {
    ScaleModule<T> restored;
    if (hooks.try_restore && hooks.try_restore(n, restored)) {
      if (restored.scale_index != n)
        throw ContractError("restored module carries wrong scale index");
      restored.frozen = true;
      set_trainable(restored, false);
      model.scales[static_cast<std::size_t>(n)] = std::move(restored);
      continue;
    }
    model.scales[static_cast<std::size_t>(n)] =
        init_scale_module(n, cfg.seed, cfg);
    train_scale(n, model, pyr_a, pyr_b, cfg, hooks.on_report);
    if (hooks.on_scale_complete) hooks.on_scale_complete(n, model);
  }
  return model;
}

// Full coarse-to-fine translation of an arbitrary image through one
// direction's generators.
template <class T>
Image<T> translate(const TuiGANModel<T>& model, const Image<T>& img, Direction dir) {
  const auto& cfg = model.config;
  std::vector<int> missing;
  for (int n = 0; n <= cfg.n_scales; ++n)
    if (!model.has_scale(n) || !model.scale(n).frozen) missing.push_back(n);
  if (!missing.empty()) {
    std::string list;
    for (int n : missing) list += (list.empty() ? "" : ", ") + std::to_string(n);
    throw ContractError("translate: model incomplete, missing trained scales " + list);
  }
  auto pyr = build_pyramid(img, cfg.n_scales, cfg.scale_factor, cfg.min_size);

  NoGradGuard inference;
  std::optional<Tensor<T>> prev;
  Tensor<T> out;
  for (int n = cfg.n_scales; n >= 0; --n) {
    const auto src = to_tensor(pyr.levels[static_cast<std::size_t>(n)]);
    std::optional<Tensor<T>> up;
    if (prev)
      up = detail::upsample_to(*prev, src.shape().d[1], src.shape().d[2]);
    const auto& m = model.scale(n);
    out = generator_forward(dir == Direction::ab ? m.g_ab : m.g_ba, src, up).image;
    prev = out;
  }
  return to_image(out);
}

}  // namespace tuigan
