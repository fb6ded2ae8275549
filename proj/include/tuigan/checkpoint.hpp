#pragma once

// Run directory layout and on-disk formats.
//
//   <run>/config.toml        flat key = value manifest, written before training
//   <run>/train.log          one line per iteration: iter scale adv cyc idt tv total d_obj
//   <run>/scale_<n>/params.bin
//   <run>/translated_ab.png, translated_ba.png
//
// params.bin: magic "TGCP", u32 version, i32 scale_index, u8 dtype (0 = f64),
// u8 has_psi, u16 reserved, u32 tensor count, then per tensor a length-
// prefixed name, u8 rank, i64 dims, and raw little-endian f64 values in the
// fixed visit_params order. A finished scale is marked by its params.bin
// existing; files are written to a temp name and renamed so a crash never
// leaves a truncated checkpoint behind.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tuigan/common.hpp"
#include "tuigan/image_io.hpp"
#include "tuigan/trainer.hpp"

namespace tuigan {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path root;

  fs::path manifest() const { return root / "config.toml"; }
  fs::path log() const { return root / "train.log"; }
  fs::path scale_dir(int n) const { return root / ("scale_" + std::to_string(n)); }
  fs::path params(int n) const { return scale_dir(n) / "params.bin"; }
  fs::path translated(Direction d) const {
    return root / (std::string("translated_") + direction_name(d) + ".png");
  }
};

namespace detail {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class U>
void write_pod(std::ostream& out, U v) {
  write_bytes(out, &v, sizeof(v));
}

template <class U>
U read_pod(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw FormatError("checkpoint truncated");
  return v;
}

inline void atomic_write(const fs::path& path, const std::string& payload) {
  fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_scale_module(const ScaleModule<T>& module, const fs::path& path) {
  std::ostringstream out(std::ios::binary);
  out.write("TGCP", 4);
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_pod<std::int32_t>(out, module.scale_index);
  detail::write_pod<std::uint8_t>(out, 0);  // dtype f64
  detail::write_pod<std::uint8_t>(out, module.g_ab.psi ? 1 : 0);
  detail::write_pod<std::uint16_t>(out, 0);

  std::uint32_t count = 0;
  visit_params<T>(module, [&](const std::string&, Tensor<T>) { ++count; });
  detail::write_pod<std::uint32_t>(out, count);

  visit_params<T>(module, [&](const std::string& name, Tensor<T> t) {
    detail::write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    detail::write_bytes(out, name.data(), name.size());
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape().nd));
    for (int i = 0; i < t.shape().nd; ++i)
      detail::write_pod<std::int64_t>(out, t.shape().d[i]);
    for (std::int64_t i = 0; i < t.numel(); ++i)
      detail::write_pod<double>(out, static_cast<double>(t.data()[i]));
  });

  detail::atomic_write(path, out.str());
}

// Rebuilds the module skeleton from the config, then fills every parameter
// from the file. Name set, shapes, and the psi flag must all match.
template <class T>
ScaleModule<T> load_scale_module(const fs::path& path, const TrainConfig<T>& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TGCP", 4) != 0)
    throw FormatError("'" + path.string() + "' is not a checkpoint");
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto scale_index = detail::read_pod<std::int32_t>(in);
  const auto dtype = detail::read_pod<std::uint8_t>(in);
  if (dtype != 0) throw FormatError("unsupported checkpoint dtype");
  const auto has_psi = detail::read_pod<std::uint8_t>(in);
  detail::read_pod<std::uint16_t>(in);
  const auto count = detail::read_pod<std::uint32_t>(in);

  auto module = init_scale_module<T>(scale_index, 0, cfg);
  const bool expect_psi = static_cast<bool>(module.g_ab.psi);
  if (expect_psi != (has_psi != 0))
    throw FormatError("checkpoint '" + path.string() +
                      "' disagrees with the config about attention nets");

  std::map<std::string, Tensor<T>> by_name;
  visit_params<T>(module,
                  [&](const std::string& name, Tensor<T> t) { by_name[name] = t; });
  if (count != by_name.size())
    throw FormatError("checkpoint '" + path.string() + "' holds " +
                      std::to_string(count) + " tensors, expected " +
                      std::to_string(by_name.size()));

  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("checkpoint truncated");
    const auto nd = detail::read_pod<std::uint8_t>(in);
    Shape s;
    s.nd = nd;
    for (int k = 0; k < nd; ++k) s.d[k] = detail::read_pod<std::int64_t>(in);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError("checkpoint tensor '" + name + "' has no slot in the model");
    if (it->second.shape() != s)
      throw FormatError("checkpoint tensor '" + name + "' shape " + s.str() +
                        " does not match model " + it->second.shape().str());
    T* dst = it->second.mutable_data();
    for (std::int64_t k = 0; k < s.numel(); ++k)
      dst[k] = static_cast<T>(detail::read_pod<double>(in));
  }
  module.frozen = true;
  set_trainable(module, false);
  return module;
}

// ---- manifest ----

template <class T>
std::map<std::string, std::string> config_to_manifest(const TrainConfig<T>& cfg) {
  std::map<std::string, std::string> kv;
  kv["format_version"] = "1";
  kv["n_scales"] = std::to_string(cfg.n_scales);
  kv["scale_factor"] = detail::fmt_double(static_cast<double>(cfg.scale_factor));
  kv["iters_per_scale"] = std::to_string(cfg.iters_per_scale);
  kv["lr_initial"] = detail::fmt_double(static_cast<double>(cfg.lr_initial));
  kv["lr_decay_interval"] = std::to_string(cfg.lr_decay_interval);
  kv["lr_decay_factor"] = detail::fmt_double(static_cast<double>(cfg.lr_decay_factor));
  kv["lambda_cyc"] = detail::fmt_double(static_cast<double>(cfg.weights.lambda_cyc));
  kv["lambda_idt"] = detail::fmt_double(static_cast<double>(cfg.weights.lambda_idt));
  kv["lambda_tv"] = detail::fmt_double(static_cast<double>(cfg.weights.lambda_tv));
  kv["lambda_pen"] = detail::fmt_double(static_cast<double>(cfg.weights.lambda_pen));
  kv["seed"] = std::to_string(cfg.seed);
  kv["d_steps"] = std::to_string(cfg.d_steps);
  kv["g_steps"] = std::to_string(cfg.g_steps);
  kv["min_size"] = std::to_string(cfg.min_size);
  kv["channels"] = std::to_string(cfg.channels);
  kv["use_attention"] = cfg.use_attention ? "true" : "false";
  kv["max_size"] = std::to_string(cfg.max_size);
  kv["leaky_slope"] = detail::fmt_double(static_cast<double>(cfg.leaky_slope));
  return kv;
}

inline void write_manifest(const fs::path& path,
                           const std::map<std::string, std::string>& kv) {
  std::ostringstream out;
  for (const auto& [k, v] : kv) {
    bool numericish = !v.empty() && v != "true" && v != "false" &&
                      v.find_first_not_of("0123456789+-.eE") == std::string::npos;
    if (numericish || v == "true" || v == "false")
      out << k << " = " << v << "\n";
    else
      out << k << " = \"" << v << "\"\n";
  }
  detail::atomic_write(path, out.str());
}

inline std::map<std::string, std::string> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("manifest '" + path.string() + "' line " +
                        std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"')
      val = val.substr(1, val.size() - 2);
    if (key.empty())
      throw FormatError("manifest '" + path.string() + "' line " +
                        std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

template <class T>
TrainConfig<T> config_from_manifest(const std::map<std::string, std::string>& kv) {
  TrainConfig<T> cfg;
  const auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("manifest is missing key '" + k + "'");
    return it->second;
  };
  try {
    cfg.n_scales = std::stoi(need("n_scales"));
    cfg.scale_factor = static_cast<T>(std::stod(need("scale_factor")));
    cfg.iters_per_scale = std::stoi(need("iters_per_scale"));
    cfg.lr_initial = static_cast<T>(std::stod(need("lr_initial")));
    cfg.lr_decay_interval = std::stoi(need("lr_decay_interval"));
    cfg.lr_decay_factor = static_cast<T>(std::stod(need("lr_decay_factor")));
    cfg.weights.lambda_cyc = static_cast<T>(std::stod(need("lambda_cyc")));
    cfg.weights.lambda_idt = static_cast<T>(std::stod(need("lambda_idt")));
    cfg.weights.lambda_tv = static_cast<T>(std::stod(need("lambda_tv")));
    cfg.weights.lambda_pen = static_cast<T>(std::stod(need("lambda_pen")));
    cfg.seed = std::stoull(need("seed"));
    cfg.d_steps = std::stoi(need("d_steps"));
    cfg.g_steps = std::stoi(need("g_steps"));
    cfg.min_size = std::stoll(need("min_size"));
    cfg.channels = std::stoi(need("channels"));
    cfg.use_attention = need("use_attention") == "true";
    cfg.max_size = std::stoll(need("max_size"));
    cfg.leaky_slope = static_cast<T>(std::stod(need("leaky_slope")));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("manifest value malformed: ") + e.what());
  }
  return cfg;
}

template <class T>
std::vector<std::string> config_differences(const TrainConfig<T>& a,
                                            const TrainConfig<T>& b) {
  auto ka = config_to_manifest(a);
  auto kb = config_to_manifest(b);
  std::vector<std::string> diff;
  for (const auto& [k, v] : ka)
    if (kb.at(k) != v) diff.push_back(k + " (" + v + " vs " + kb.at(k) + ")");
  return diff;
}

// ---- run orchestration ----

// Trains end to end with persistence: manifest first, then per-scale
// checkpoints as they finish, a loss log line per iteration, and the two
// full-resolution translations of the training images at the end. With
// resume=true, finished scales found on disk are loaded instead of retrained
// (the manifest must agree with cfg).
template <class T>
TuiGANModel<T> run_training(const Image<T>& img_a, const Image<T>& img_b,
                            const TrainConfig<T>& cfg, const RunPaths& run,
                            bool resume = false,
                            std::map<std::string, std::string> manifest_extras = {}) {
  cfg.validate();
  fs::create_directories(run.root);

  if (fs::exists(run.manifest())) {
    if (!resume)
      throw ConfigError("'" + run.root.string() +
                        "' already holds a run; pass resume or use a fresh directory");
    auto existing = config_from_manifest<T>(read_manifest(run.manifest()));
    auto diff = config_differences(existing, cfg);
    if (!diff.empty()) {
      std::string msg = "cannot resume: config differs from the run manifest in ";
      for (std::size_t i = 0; i < diff.size(); ++i)
        msg += (i ? ", " : "") + diff[i];
      throw ConfigError(msg);
    }
  }

  auto kv = config_to_manifest(cfg);
  for (auto& [k, v] : manifest_extras) kv[k] = v;
  write_manifest(run.manifest(), kv);

  std::ofstream log(run.log(), std::ios::app);
  if (!log) throw IoError("cannot open '" + run.log().string() + "' for writing");

  TrainHooks<T> hooks;
  hooks.on_report = [&](int iter, int scale, const LossReport<T>& r) {
    log << to_log_line(iter, scale, r) << "\n";
  };
  hooks.on_scale_complete = [&](int n, const TuiGANModel<T>& model) {
    log.flush();
    save_scale_module(model.scale(n), run.params(n));
  };
  if (resume) {
    hooks.try_restore = [&](int n, ScaleModule<T>& out) {
      if (!fs::exists(run.params(n))) return false;
      out = load_scale_module<T>(run.params(n), cfg);
      return true;
    };
  }

  auto model = train_all(img_a, img_b, cfg, hooks);
  log.flush();

  save_image(translate(model, img_a, Direction::ab), run.translated(Direction::ab).string());
  save_image(translate(model, img_b, Direction::ba), run.translated(Direction::ba).string());
  return model;
}

// Loads a finished run for translation or evaluation.
template <class T>
TuiGANModel<T> load_model(const RunPaths& run) {
  if (!fs::exists(run.manifest()))
    throw ConfigError("'" + run.root.string() + "' is not a run directory (no " +
                      run.manifest().filename().string() + ")");
  auto cfg = config_from_manifest<T>(read_manifest(run.manifest()));
  auto model = make_model(cfg);
  std::vector<int> missing;
  for (int n = 0; n <= cfg.n_scales; ++n) {
    if (fs::exists(run.params(n)))
      model.scales[static_cast<std::size_t>(n)] =
          load_scale_module<T>(run.params(n), cfg);
    else
      missing.push_back(n);
  }
  if (!missing.empty()) {
    std::string list;
    for (int n : missing) list += (list.empty() ? "" : ", ") + std::to_string(n);
    throw ConfigError("run '" + run.root.string() +
                      "' is incomplete: missing trained scales " + list);
  }
  return model;
}

}  // namespace tuigan
