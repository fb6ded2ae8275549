#pragma once

// The component-removal study: four cells that each drop one ingredient
// (attention blending, cycle, identity, smoothness) and five that vary the
// pyramid depth 0..4. Every cell is a full training run in its own
// subdirectory; a comparison table collects per-direction scores.

#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tuigan/checkpoint.hpp"
#include "tuigan/metrics.hpp"
#include "tuigan/trainer.hpp"

namespace tuigan {

struct AblationSpec {
  bool disable_attention = false;
  bool disable_cyc = false;
  bool disable_idt = false;
  bool disable_tv = false;
  std::optional<int> override_n_scales;
};

template <class T>
TrainConfig<T> apply_ablation(TrainConfig<T> cfg, const AblationSpec& spec) {
  if (spec.disable_attention) cfg.use_attention = false;
  if (spec.disable_cyc) cfg.weights.lambda_cyc = T(0);
  if (spec.disable_idt) cfg.weights.lambda_idt = T(0);
  if (spec.disable_tv) cfg.weights.lambda_tv = T(0);
  if (spec.override_n_scales) cfg.n_scales = *spec.override_n_scales;
  return cfg;
}

struct AblationCell {
  std::string label;
  AblationSpec spec;
};

// Row order of the comparison table.
inline std::vector<AblationCell> ablation_matrix() {
  std::vector<AblationCell> cells;
  cells.push_back({"no-attention", AblationSpec{.disable_attention = true}});
  cells.push_back({"no-cyc", AblationSpec{.disable_cyc = true}});
  cells.push_back({"no-idt", AblationSpec{.disable_idt = true}});
  cells.push_back({"no-tv", AblationSpec{.disable_tv = true}});
  for (int n = 0; n <= 4; ++n)
    cells.push_back({"n" + std::to_string(n),
                     AblationSpec{.override_n_scales = n}});
  return cells;
}

template <class T>
struct AblationResult {
  std::string label;
  bool ok = false;
  std::string error;
  T sifid_ab = 0, pd_ab = 0, sifid_ba = 0, pd_ba = 0;
};

template <class T>
std::string format_ablation_table(const std::vector<AblationResult<T>>& results) {
  std::ostringstream out;
  out << std::left << std::setw(14) << "cell" << std::setw(14) << "sifid_ab"
      << std::setw(14) << "pd_ab" << std::setw(14) << "sifid_ba" << std::setw(14)
      << "pd_ba" << "\n";
  for (const auto& r : results) {
    out << std::left << std::setw(14) << r.label;
    if (r.ok) {
      const auto num = [](T v) {
        std::ostringstream s;
        s << std::setprecision(6) << static_cast<double>(v);
        return s.str();
      };
      out << std::setw(14) << num(r.sifid_ab) << std::setw(14) << num(r.pd_ab)
          << std::setw(14) << num(r.sifid_ba) << std::setw(14) << num(r.pd_ba);
    } else {
      out << "FAILED: " << r.error;
    }
    out << "\n";
  }
  return out.str();
}

// Runs the requested cells (all when `only` is empty) against a shared base
// config and seed. A failing cell is recorded and does not stop the rest.
template <class T>
std::vector<AblationResult<T>> run_ablation(
    const Image<T>& img_a, const Image<T>& img_b, const TrainConfig<T>& base_cfg,
    const fs::path& out_root, const std::vector<std::string>& only,
    const FeatureExtractor<T>& extractor,
    std::map<std::string, std::string> manifest_extras = {},
    const std::function<void(const std::string&)>& on_progress = {}) {
  auto cells = ablation_matrix();
  if (!only.empty()) {
    std::vector<AblationCell> picked;
    for (const auto& want : only) {
      bool found = false;
      for (const auto& cell : cells)
        if (cell.label == want) {
          picked.push_back(cell);
          found = true;
          break;
        }
      if (!found) {
        std::string known;
        for (const auto& cell : cells)
          known += (known.empty() ? "" : ", ") + cell.label;
        throw ConfigError("unknown ablation cell '" + want + "'; cells are: " + known);
      }
    }
    cells = std::move(picked);
  }

  std::vector<AblationResult<T>> results;
  for (const auto& cell : cells) {
    if (on_progress) on_progress(cell.label);
    AblationResult<T> res;
    res.label = cell.label;
    try {
      const auto cfg = apply_ablation(base_cfg, cell.spec);
      RunPaths run{out_root / cell.label};
      auto extras = manifest_extras;
      extras["ablation_cell"] = cell.label;
      auto model = run_training(img_a, img_b, cfg, run, false, extras);
      const auto tr_ab = translate(model, img_a, Direction::ab);
      const auto tr_ba = translate(model, img_b, Direction::ba);
      res.sifid_ab = sifid(tr_ab, img_b, extractor);
      res.pd_ab = perceptual_distance(tr_ab, img_a, extractor);
      res.sifid_ba = sifid(tr_ba, img_a, extractor);
      res.pd_ba = perceptual_distance(tr_ba, img_b, extractor);
      res.ok = true;
    } catch (const std::exception& e) {
      res.ok = false;
      res.error = e.what();
    }
    results.push_back(std::move(res));
  }

  detail::atomic_write(out_root / "ablation_report.txt",
                       format_ablation_table(results));
  return results;
}

}  // namespace tuigan
