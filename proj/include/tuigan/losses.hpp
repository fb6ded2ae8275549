#pragma once

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>

#include "tuigan/common.hpp"
#include "tuigan/tensor.hpp"

namespace tuigan {

constexpr double kTvEps = 1e-8;

template <class T>
struct LossWeights {
  T lambda_cyc = T(1);
  T lambda_idt = T(1);
  T lambda_tv = T(0.1);
  T lambda_pen = T(0.1);

  void validate() const {
    if (lambda_cyc < T(0) || lambda_idt < T(0) || lambda_tv < T(0) ||
        lambda_pen < T(0))
      throw ConfigError("loss weights must be non-negative");
  }
};

// One training iteration's scalars. adv is the generator-side adversarial
// part (-mean D_B(fake_ab) - mean D_A(fake_ba)); d_objective is the critics'
// ascent objective, logged for diagnosis but not part of total.
template <class T>
struct LossReport {
  T adv = 0, cyc = 0, idt = 0, tv = 0, total = 0, d_objective = 0;

  bool finite() const {
    return std::isfinite(adv) && std::isfinite(cyc) && std::isfinite(idt) &&
           std::isfinite(tv) && std::isfinite(total) && std::isfinite(d_objective);
  }
};

template <class T>
std::string to_log_line(int iteration, int scale, const LossReport<T>& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d %d %.17g %.17g %.17g %.17g %.17g %.17g",
                iteration, scale, static_cast<double>(r.adv),
                static_cast<double>(r.cyc), static_cast<double>(r.idt),
                static_cast<double>(r.tv), static_cast<double>(r.total),
                static_cast<double>(r.d_objective));
  return buf;
}

template <class T>
struct LogRecord {
  int iteration = 0;
  int scale = 0;
  LossReport<T> report;
};

template <class T>
LogRecord<T> parse_log_line(const std::string& line) {
  std::istringstream in(line);
  LogRecord<T> rec;
  double v[6];
  if (!(in >> rec.iteration >> rec.scale >> v[0] >> v[1] >> v[2] >> v[3] >> v[4] >>
        v[5]))
    throw FormatError("malformed loss log line: '" + line + "'");
  rec.report = LossReport<T>{static_cast<T>(v[0]), static_cast<T>(v[1]),
                             static_cast<T>(v[2]), static_cast<T>(v[3]),
                             static_cast<T>(v[4]), static_cast<T>(v[5])};
  return rec;
}

template <class T>
Tensor<T> l1_mean(const Tensor<T>& x, const Tensor<T>& y) {
  detail::check_same_shape("l1_mean", x, y);
  return mean_all(abs_t(sub(x, y)));
}

// Critic ascent objective: mean D(real) - mean D(fake)
//   - lambda_pen * (||d(mean D)/d(interp)|| - 1)^2,
// interp = alpha*real + (1-alpha)*fake. Both images enter as constants; the
// inner gradient is taken w.r.t. the interpolate, and when the surrounding
// context is recording, that gradient is built with its own graph so the
// penalty can be differentiated w.r.t. the critic parameters.
template <class T, class D>
Tensor<T> wgan_gp_discriminator_objective(const D& d, const Tensor<T>& real,
                                          const Tensor<T>& fake, T lambda_pen,
                                          T alpha) {
  detail::check_same_shape("wgan_gp_discriminator_objective", real, fake);
  if (!(alpha >= T(0) && alpha <= T(1)))
    throw ConfigError("interpolation weight must lie in [0,1]");
  if (lambda_pen < T(0)) throw ConfigError("penalty weight must be non-negative");

  auto real_c = real.detach();
  auto fake_c = fake.detach();
  auto s_real = mean_all(d(real_c));
  auto s_fake = mean_all(d(fake_c));

  auto interp =
      add(mul_scalar(real_c, alpha), mul_scalar(fake_c, T(1) - alpha)).detach();
  interp.set_requires_grad(true);

  const bool outer = grad_enabled();
  Tensor<T> gvec;
  {
    GradModeGuard recording(true);
    auto s_interp = mean_all(d(interp));
    gvec = grad(s_interp, {interp}, outer)[0];
  }
  auto gnorm = sqrt_t(sum_all(mul(gvec, gvec)));
  auto excess = add_scalar(gnorm, T(-1));
  auto penalty = mul(excess, excess);
  return sub(sub(s_real, s_fake), mul_scalar(penalty, lambda_pen));
}

// The only part of the adversarial term the generators can move.
template <class T, class D>
Tensor<T> wgan_gp_generator_objective(const D& d, const Tensor<T>& fake) {
  return neg(mean_all(d(fake)));
}

template <class T>
Tensor<T> cycle_loss(const Tensor<T>& ia, const Tensor<T>& iaba, const Tensor<T>& ib,
                     const Tensor<T>& ibab) {
  return add(l1_mean(ia, iaba), l1_mean(ib, ibab));
}

template <class T>
Tensor<T> identity_loss(const Tensor<T>& ia, const Tensor<T>& iaa, const Tensor<T>& ib,
                        const Tensor<T>& ibb) {
  return add(l1_mean(ia, iaa), l1_mean(ib, ibb));
}

// Sum over pixel positions of sqrt(dh^2 + dv^2 + eps), per channel, where the
// forward differences that fall off the last row/column are dropped. Not
// normalized by pixel count.
template <class T>
Tensor<T> tv_term(const Tensor<T>& x, T eps = T(kTvEps)) {
  if (x.shape().nd != 3) throw ShapeError("tv_term: rank-3 tensor required");
  const std::int64_t c = x.shape().d[0], h = x.shape().d[1], w = x.shape().d[2];
  if (h < 2 || w < 2)
    throw ShapeError("tv_term: need at least 2x2 spatial extent, got " +
                     x.shape().str());
  auto dh = sub(crop3(x, 0, c, 0, h, 1, w - 1), crop3(x, 0, c, 0, h, 0, w - 1));
  auto dv = sub(crop3(x, 0, c, 1, h - 1, 0, w), crop3(x, 0, c, 0, h - 1, 0, w));
  auto dh_i = crop3(dh, 0, c, 0, h - 1, 0, w - 1);
  auto dv_i = crop3(dv, 0, c, 0, h - 1, 0, w - 1);
  auto interior =
      sum_all(sqrt_t(add_scalar(add(mul(dh_i, dh_i), mul(dv_i, dv_i)), eps)));
  auto dh_last = crop3(dh, 0, c, h - 1, 1, 0, w - 1);
  auto dv_last = crop3(dv, 0, c, 0, h - 1, w - 1, 1);
  auto rim = add(sum_all(sqrt_t(add_scalar(mul(dh_last, dh_last), eps))),
                 sum_all(sqrt_t(add_scalar(mul(dv_last, dv_last), eps))));
  return add(interior, rim);
}

// Mean difference magnitude per direction: each tv_term sum is divided by its
// c*(h*w - 1) term count so the smoothness weight pulls equally hard at every
// pyramid scale instead of growing with image area.
template <class T>
Tensor<T> tv_loss(const Tensor<T>& translated_ab, const Tensor<T>& translated_ba,
                  T eps = T(kTvEps)) {
  auto mean_tv = [eps](const Tensor<T>& x) {
    const auto& s = x.shape();
    const T count = static_cast<T>(s.d[0] * (s.d[1] * s.d[2] - 1));
    return mul_scalar(tv_term(x, eps), T(1) / count);
  };
  return add(mean_tv(translated_ab), mean_tv(translated_ba));
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& adv, const Tensor<T>& cyc, const Tensor<T>& idt,
                     const Tensor<T>& tv, const LossWeights<T>& w) {
  w.validate();
  auto total = add(add(adv, mul_scalar(cyc, w.lambda_cyc)),
                   add(mul_scalar(idt, w.lambda_idt), mul_scalar(tv, w.lambda_tv)));
  if (!std::isfinite(total.item()))
    throw DivergenceError("loss is not finite", -1, -1);
  return total;
}

}  // namespace tuigan
