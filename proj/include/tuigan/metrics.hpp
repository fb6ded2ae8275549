#pragma once

// Single-image quality metrics. sifid treats each feature-map position as a
// sample and takes the Frechet distance between the two images' feature
// statistics; perceptual_distance averages pointwise feature distances of two
// same-sized images. Both run over a pluggable FeatureExtractor so scores can
// come either from the built-in seeded random conv stack (self-contained,
// offline) or from weights loaded off disk.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "tuigan/checkpoint.hpp"
#include "tuigan/common.hpp"
#include "tuigan/image.hpp"
#include "tuigan/networks.hpp"

namespace tuigan {

template <class T>
struct FeatureMap {
  std::int64_t c = 0, h = 0, w = 0;
  std::vector<T> data;  // [c][h][w]
};

template <class T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  // Tapped maps, shallow to deep. Must be a pure function of the image.
  virtual std::vector<FeatureMap<T>> extract(const Image<T>& img) const = 0;
  // Identifies where the weights came from; echoed into reports.
  virtual std::string descriptor() const = 0;
};

namespace detail {

template <class T>
FeatureMap<T> tensor_to_feature(const Tensor<T>& t) {
  return FeatureMap<T>{t.shape().d[0], t.shape().d[1], t.shape().d[2], t.values()};
}

template <class T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  const std::int64_t c = x.shape().d[0], h = x.shape().d[1], w = x.shape().d[2];
  const std::int64_t h2 = h / 2, w2 = w / 2;
  if (h2 < 1 || w2 < 1) throw ShapeError("avgpool2: input too small");
  std::vector<T> v(static_cast<std::size_t>(c * h2 * w2));
  const T* px = x.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < h2; ++y)
      for (std::int64_t xx = 0; xx < w2; ++xx) {
        const T* p = px + (ch * h + 2 * y) * w + 2 * xx;
        v[(ch * h2 + y) * w2 + xx] =
            (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
      }
  return Tensor<T>::from_vec(sh3(c, h2, w2), std::move(v));
}

enum class ExtractorAct : std::uint8_t { none = 0, lrelu = 1, relu = 2 };

template <class T>
struct ExtractorLayer {
  Conv3x3<T> conv;
  ExtractorAct act = ExtractorAct::lrelu;
  bool pool = false;
  bool tap = false;
};

template <class T>
std::vector<FeatureMap<T>> run_extractor(const std::vector<ExtractorLayer<T>>& layers,
                                         const Image<T>& img) {
  validate_image(img, "feature extractor");
  NoGradGuard inference;
  Tensor<T> h = to_tensor(img);
  std::vector<FeatureMap<T>> taps;
  for (const auto& layer : layers) {
    h = conv_apply(layer.conv, h);
    if (layer.act == ExtractorAct::lrelu) h = leaky_relu(h, T(0.2));
    if (layer.act == ExtractorAct::relu) h = leaky_relu(h, T(0));
    if (layer.pool) h = avgpool2(h);
    if (layer.tap) taps.push_back(tensor_to_feature(h));
  }
  return taps;
}

}  // namespace detail

// Three random 3x3 conv layers with leaky activations and two pooling stages,
// all drawn from the seed at construction. Not a trained perception model,
// but a fixed nonlinear projection with the right metric structure.
template <class T>
class SyntheticExtractor : public FeatureExtractor<T> {
 public:
  explicit SyntheticExtractor(std::uint64_t seed = 2020, int channels = 16)
      : seed_(seed), channels_(channels) {
    if (channels < 1) throw ConfigError("extractor channels must be >= 1");
    Rng rng(mix_seed(seed, 0xfea7ULL));
    const auto make = [&](std::int64_t in_c, std::int64_t out_c, bool pool, bool tap) {
      detail::ExtractorLayer<T> layer;
      layer.conv.in_c = in_c;
      layer.conv.out_c = out_c;
      const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in_c * 9)));
      std::vector<T> w(static_cast<std::size_t>(out_c * in_c * 9));
      for (auto& v : w) v = static_cast<T>(rng.gaussian(0.0, std));
      layer.conv.w = Tensor<T>::from_vec(sh2(out_c, in_c * 9), std::move(w));
      layer.conv.b = Tensor<T>::zeros(sh1(out_c));
      layer.pool = pool;
      layer.tap = tap;
      return layer;
    };
    layers_.push_back(make(3, channels, true, true));
    layers_.push_back(make(channels, channels, true, true));
    layers_.push_back(make(channels, channels, false, true));
  }

  std::vector<FeatureMap<T>> extract(const Image<T>& img) const override {
    return detail::run_extractor(layers_, img);
  }

  std::string descriptor() const override {
    return "synthetic(seed=" + std::to_string(seed_) +
           ",channels=" + std::to_string(channels_) + ",taps=3)";
  }

 private:
  std::uint64_t seed_;
  int channels_;
  std::vector<detail::ExtractorLayer<T>> layers_;
};

constexpr std::uint32_t kExtractorFileVersion = 1;

// Conv-stack weights loaded from disk. Format: magic "TGFX", u32 version,
// u32 layer count, then per layer u32 in_c, u32 out_c, u8 activation
// (0 none, 1 leaky 0.2, 2 relu), u8 pool-after (0/1), u8 tap (0/1),
// f64 weights [out_c][in_c*9], f64 biases [out_c]. Little-endian, 3x3
// stride-1 convs only; the first in_c must be 3 and at least one layer must
// be tapped.
template <class T>
class FileExtractor : public FeatureExtractor<T> {
 public:
  explicit FileExtractor(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open extractor file '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TGFX", 4) != 0)
      throw FormatError("'" + path + "' is not an extractor file");
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kExtractorFileVersion)
      throw FormatError("unsupported extractor file version " +
                        std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(in);
    if (count < 1) throw FormatError("extractor file lists no layers");
    std::int64_t expect_in = 3;
    int taps = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
      detail::ExtractorLayer<T> layer;
      const auto in_c = detail::read_pod<std::uint32_t>(in);
      const auto out_c = detail::read_pod<std::uint32_t>(in);
      if (in_c != expect_in)
        throw FormatError("extractor layer " + std::to_string(i) + " expects " +
                          std::to_string(in_c) + " input channels, needs " +
                          std::to_string(expect_in));
      if (out_c < 1) throw FormatError("extractor layer has no output channels");
      const auto act = detail::read_pod<std::uint8_t>(in);
      if (act > 2) throw FormatError("unknown extractor activation code");
      layer.act = static_cast<detail::ExtractorAct>(act);
      layer.pool = detail::read_pod<std::uint8_t>(in) != 0;
      layer.tap = detail::read_pod<std::uint8_t>(in) != 0;
      layer.conv.in_c = in_c;
      layer.conv.out_c = out_c;
      std::vector<T> w(static_cast<std::size_t>(out_c) * in_c * 9);
      for (auto& v : w) v = static_cast<T>(detail::read_pod<double>(in));
      std::vector<T> b(out_c);
      for (auto& v : b) v = static_cast<T>(detail::read_pod<double>(in));
      layer.conv.w = Tensor<T>::from_vec(sh2(out_c, static_cast<std::int64_t>(in_c) * 9),
                                         std::move(w));
      layer.conv.b = Tensor<T>::from_vec(sh1(out_c), std::move(b));
      if (layer.tap) ++taps;
      expect_in = out_c;
      layers_.push_back(std::move(layer));
    }
    if (taps == 0) throw FormatError("extractor file taps no layer");

    std::ifstream raw(path, std::ios::binary);
    std::ostringstream buf;
    buf << raw.rdbuf();
    const auto bytes = buf.str();
    hash_ = fnv1a64(bytes.data(), bytes.size());
    taps_ = taps;
  }

  std::vector<FeatureMap<T>> extract(const Image<T>& img) const override {
    return detail::run_extractor(layers_, img);
  }

  std::string descriptor() const override {
    char h[32];
    std::snprintf(h, sizeof(h), "%016llx", static_cast<unsigned long long>(hash_));
    return "file:" + std::filesystem::path(path_).filename().string() +
           "(layers=" + std::to_string(layers_.size()) +
           ",taps=" + std::to_string(taps_) + ",fnv=" + h + ")";
  }

 private:
  std::string path_;
  std::vector<detail::ExtractorLayer<T>> layers_;
  std::uint64_t hash_ = 0;
  int taps_ = 0;
};

// Companion writer for the FileExtractor format.
template <class T>
void save_extractor_file(const std::filesystem::path& path,
                         const std::vector<detail::ExtractorLayer<T>>& layers) {
  std::ostringstream out(std::ios::binary);
  out.write("TGFX", 4);
  detail::write_pod<std::uint32_t>(out, kExtractorFileVersion);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& layer : layers) {
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(layer.conv.in_c));
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(layer.conv.out_c));
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(layer.act));
    detail::write_pod<std::uint8_t>(out, layer.pool ? 1 : 0);
    detail::write_pod<std::uint8_t>(out, layer.tap ? 1 : 0);
    for (std::int64_t i = 0; i < layer.conv.w.numel(); ++i)
      detail::write_pod<double>(out, static_cast<double>(layer.conv.w.data()[i]));
    for (std::int64_t i = 0; i < layer.conv.b.numel(); ++i)
      detail::write_pod<double>(out, static_cast<double>(layer.conv.b.data()[i]));
  }
  detail::atomic_write(path, out.str());
}

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using EVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Mean and unbiased covariance over the h*w positions of a feature map.
template <class T>
void feature_stats(const FeatureMap<T>& f, EVec<T>& mu, EMat<T>& sigma) {
  const std::int64_t n = f.h * f.w, c = f.c;
  if (n < 2)
    throw DegenerateStatsError(
        "feature map has fewer than 2 spatial positions; covariance undefined");
  EMat<T> samples(n, c);
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < n; ++p) samples(p, ch) = f.data[ch * n + p];
  mu = samples.colwise().mean();
  EMat<T> centered = samples.rowwise() - mu.transpose();
  sigma = (centered.transpose() * centered) / static_cast<T>(n - 1);
}

template <class T>
EMat<T> psd_sqrt(const EMat<T>& m) {
  Eigen::SelfAdjointEigenSolver<EMat<T>> es((m + m.transpose()) * T(0.5));
  EVec<T> lam = es.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i)
    lam[i] = lam[i] > T(0) ? std::sqrt(lam[i]) : T(0);
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Frechet distance between the per-position feature statistics of the first
// tapped maps: |mu_x - mu_y|^2 + tr(Sx + Sy - 2 (Sx^1/2 Sy Sx^1/2)^1/2).
// The images may differ in size; each contributes its own sample cloud.
template <class T>
T sifid(const Image<T>& img_x, const Image<T>& img_y,
        const FeatureExtractor<T>& extractor) {
  auto fx = extractor.extract(img_x);
  auto fy = extractor.extract(img_y);
  if (fx.empty() || fy.empty()) throw ContractError("extractor produced no taps");
  detail::EVec<T> mux, muy;
  detail::EMat<T> sx, sy;
  detail::feature_stats(fx[0], mux, sx);
  detail::feature_stats(fy[0], muy, sy);
  if (mux.size() != muy.size())
    throw ContractError("extractor tap widths disagree between images");

  const auto rx = detail::psd_sqrt(sx);
  detail::EMat<T> inner = rx * sy * rx;
  Eigen::SelfAdjointEigenSolver<detail::EMat<T>> es(
      (inner + inner.transpose()) * T(0.5));
  T tr_sqrt = T(0);
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const T lam = es.eigenvalues()[i];
    if (lam > T(0)) tr_sqrt += std::sqrt(lam);
  }
  return (mux - muy).squaredNorm() + sx.trace() + sy.trace() - T(2) * tr_sqrt;
}

// Mean over taps of the mean per-position feature distance between two
// same-sized images, each position's L2 difference scaled by 1/sqrt(channels).
template <class T>
T perceptual_distance(const Image<T>& img_x, const Image<T>& img_y,
                      const FeatureExtractor<T>& extractor) {
  if (img_x.h != img_y.h || img_x.w != img_y.w)
    throw ShapeError("perceptual_distance: images are " + std::to_string(img_x.h) +
                     "x" + std::to_string(img_x.w) + " vs " + std::to_string(img_y.h) +
                     "x" + std::to_string(img_y.w) + "; sizes must match");
  auto fx = extractor.extract(img_x);
  auto fy = extractor.extract(img_y);
  if (fx.size() != fy.size() || fx.empty())
    throw ContractError("extractor tap layout disagrees between images");
  T acc = T(0);
  for (std::size_t t = 0; t < fx.size(); ++t) {
    const auto& a = fx[t];
    const auto& b = fy[t];
    if (a.c != b.c || a.h != b.h || a.w != b.w)
      throw ContractError("extractor tap shapes disagree between images");
    const std::int64_t n = a.h * a.w;
    T tap_acc = T(0);
    for (std::int64_t p = 0; p < n; ++p) {
      T d2 = T(0);
      for (std::int64_t ch = 0; ch < a.c; ++ch) {
        const T d = a.data[ch * n + p] - b.data[ch * n + p];
        d2 += d * d;
      }
      tap_acc += std::sqrt(d2 / static_cast<T>(a.c));
    }
    acc += tap_acc / static_cast<T>(n);
  }
  return acc / static_cast<T>(fx.size());
}

template <class T>
struct PairMetrics {
  std::string source, target, translated;
  T sifid_value = 0;
  T pd_value = 0;
};

template <class T>
struct MetricReport {
  std::string extractor_descriptor;
  std::vector<PairMetrics<T>> pairs;
  T mean_sifid = 0;
  T mean_pd = 0;
};

// Manifest: one evaluation per line, three whitespace-separated paths
// (source, target, translated). Blank lines and #-comments are skipped.
// Relative paths resolve against the manifest's directory. sifid compares
// the translation against the target domain; perceptual distance compares it
// against its source.
template <class T>
MetricReport<T> evaluate_run(const std::filesystem::path& manifest_path,
                             const FeatureExtractor<T>& extractor) {
  std::ifstream in(manifest_path);
  if (!in)
    throw ManifestError("cannot open pairs manifest '" + manifest_path.string() + "'");
  const auto base = manifest_path.has_parent_path()
                        ? manifest_path.parent_path()
                        : std::filesystem::path(".");

  struct Row {
    std::string source, target, translated;
  };
  std::vector<Row> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string s, t, r, extra;
    if (!(ls >> s)) continue;  // blank
    if (s[0] == '#') continue;
    if (!(ls >> t >> r) || (ls >> extra))
      throw ManifestError("pairs manifest '" + manifest_path.string() + "' line " +
                          std::to_string(lineno) +
                          ": expected exactly 3 whitespace-separated paths");
    const auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    rows.push_back(Row{resolve(s), resolve(t), resolve(r)});
  }
  if (rows.empty())
    throw ManifestError("pairs manifest '" + manifest_path.string() +
                        "' lists no evaluation pairs");

  std::string missing;
  for (const auto& row : rows)
    for (const auto* p : {&row.source, &row.target, &row.translated})
      if (!std::filesystem::exists(*p)) missing += (missing.empty() ? "" : ", ") + *p;
  if (!missing.empty())
    throw ManifestError("pairs manifest references missing files: " + missing);

  MetricReport<T> report;
  report.extractor_descriptor = extractor.descriptor();
  for (const auto& row : rows) {
    const auto src = load_image<T>(row.source);
    const auto tgt = load_image<T>(row.target);
    const auto out = load_image<T>(row.translated);
    PairMetrics<T> pm;
    pm.source = row.source;
    pm.target = row.target;
    pm.translated = row.translated;
    pm.sifid_value = sifid(out, tgt, extractor);
    pm.pd_value = perceptual_distance(out, src, extractor);
    report.pairs.push_back(std::move(pm));
  }
  for (const auto& pm : report.pairs) {
    report.mean_sifid += pm.sifid_value;
    report.mean_pd += pm.pd_value;
  }
  report.mean_sifid /= static_cast<T>(report.pairs.size());
  report.mean_pd /= static_cast<T>(report.pairs.size());
  return report;
}

template <class T>
std::string format_metric_report(const MetricReport<T>& report) {
  std::ostringstream out;
  out << "extractor: " << report.extractor_descriptor << "\n";
  out << "pairs: " << report.pairs.size() << "\n\n";
  for (std::size_t i = 0; i < report.pairs.size(); ++i) {
    const auto& pm = report.pairs[i];
    out << "pair: " << (i + 1) << "\n";
    out << "source: " << pm.source << "\n";
    out << "target: " << pm.target << "\n";
    out << "translated: " << pm.translated << "\n";
    out << "sifid: " << detail::fmt_double(static_cast<double>(pm.sifid_value)) << "\n";
    out << "pd: " << detail::fmt_double(static_cast<double>(pm.pd_value)) << "\n\n";
  }
  out << "aggregate:\n";
  out << "mean_sifid: " << detail::fmt_double(static_cast<double>(report.mean_sifid))
      << "\n";
  out << "mean_pd: " << detail::fmt_double(static_cast<double>(report.mean_pd)) << "\n";
  return out.str();
}

template <class T>
void write_metric_report(const MetricReport<T>& report,
                         const std::filesystem::path& path) {
  detail::atomic_write(path, format_metric_report(report));
}

}  // namespace tuigan
