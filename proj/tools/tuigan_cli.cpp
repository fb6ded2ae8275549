// Command-line front end: train / translate / evaluate / ablate.
// Exit codes: 0 success, 1 configuration or I/O problem, 2 training diverged.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tuigan/tuigan.hpp"

namespace fs = std::filesystem;
using Scalar = double;

namespace {

struct TrainFlags {
  std::string image_a, image_b, out, preset;
  bool resume = false;
  bool no_attention = false;
  std::optional<int> n_scales, iters, decay_interval, d_steps, g_steps, channels;
  std::optional<double> scale_factor, lr, decay_factor;
  std::optional<double> lambda_cyc, lambda_idt, lambda_tv, lambda_pen;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> min_size, max_size;
};

std::string default_out_root() {
  const char* env = std::getenv("TUIGAN_OUT_ROOT");
  return env && *env ? env : ".";
}

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool want_resume) {
  cmd->add_option("--image-a", f.image_a, "domain A example image")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--image-b", f.image_b, "domain B example image")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--preset", f.preset, "config preset (smoke: 64x64, 2 scales, 200 iters)")
      ->check(CLI::IsMember({"smoke"}));
  cmd->add_option("--n-scales", f.n_scales, "coarsest scale index");
  cmd->add_option("--scale-factor", f.scale_factor, "pyramid scale factor (> 1)");
  cmd->add_option("--iters", f.iters, "iterations per scale");
  cmd->add_option("--lr", f.lr, "initial learning rate");
  cmd->add_option("--lr-decay-interval", f.decay_interval, "iterations between decays");
  cmd->add_option("--lr-decay-factor", f.decay_factor, "multiplicative decay");
  cmd->add_option("--lambda-cyc", f.lambda_cyc, "cycle weight");
  cmd->add_option("--lambda-idt", f.lambda_idt, "identity weight");
  cmd->add_option("--lambda-tv", f.lambda_tv, "smoothness weight");
  cmd->add_option("--lambda-pen", f.lambda_pen, "gradient penalty weight");
  cmd->add_option("--seed", f.seed, "random seed");
  cmd->add_option("--d-steps", f.d_steps, "critic updates per iteration");
  cmd->add_option("--g-steps", f.g_steps, "generator updates per iteration");
  cmd->add_option("--min-size", f.min_size, "minimum coarsest-side length");
  cmd->add_option("--max-size", f.max_size, "bound on the longer input side");
  cmd->add_option("--channels", f.channels, "hidden width of every net");
  cmd->add_flag("--no-attention", f.no_attention, "blend with a fixed 0.5 mask");
  if (want_resume)
    cmd->add_flag("--resume", f.resume, "continue a run, reusing finished scales");
}

tuigan::TrainConfig<Scalar> resolve_config(const TrainFlags& f) {
  auto cfg = f.preset == "smoke" ? tuigan::smoke_config<Scalar>()
                                 : tuigan::TrainConfig<Scalar>{};
  if (f.n_scales) cfg.n_scales = *f.n_scales;
  if (f.scale_factor) cfg.scale_factor = *f.scale_factor;
  if (f.iters) cfg.iters_per_scale = *f.iters;
  if (f.lr) cfg.lr_initial = *f.lr;
  if (f.decay_interval) cfg.lr_decay_interval = *f.decay_interval;
  if (f.decay_factor) cfg.lr_decay_factor = *f.decay_factor;
  if (f.lambda_cyc) cfg.weights.lambda_cyc = *f.lambda_cyc;
  if (f.lambda_idt) cfg.weights.lambda_idt = *f.lambda_idt;
  if (f.lambda_tv) cfg.weights.lambda_tv = *f.lambda_tv;
  if (f.lambda_pen) cfg.weights.lambda_pen = *f.lambda_pen;
  if (f.seed) cfg.seed = *f.seed;
  if (f.d_steps) cfg.d_steps = *f.d_steps;
  if (f.g_steps) cfg.g_steps = *f.g_steps;
  if (f.min_size) cfg.min_size = *f.min_size;
  if (f.max_size) cfg.max_size = *f.max_size;
  if (f.channels) cfg.channels = *f.channels;
  if (f.no_attention) cfg.use_attention = false;
  cfg.validate();
  return cfg;
}

// Smoke runs square everything to 64x64; full runs only bound the longer side.
tuigan::Image<Scalar> prepare_input(const tuigan::Image<Scalar>& img,
                                    const TrainFlags& f,
                                    const tuigan::TrainConfig<Scalar>& cfg) {
  if (f.preset == "smoke") return tuigan::resample(img, 64, 64);
  return tuigan::limit_size(img, cfg.max_size);
}

std::map<std::string, std::string> input_extras(const TrainFlags& f,
                                                const tuigan::Image<Scalar>& a,
                                                const tuigan::Image<Scalar>& b) {
  return {
      {"image_a", f.image_a},
      {"image_b", f.image_b},
      {"input_height_a", std::to_string(a.h)},
      {"input_width_a", std::to_string(a.w)},
      {"input_height_b", std::to_string(b.h)},
      {"input_width_b", std::to_string(b.w)},
  };
}

std::unique_ptr<tuigan::FeatureExtractor<Scalar>> make_extractor(
    const std::string& spec, std::uint64_t seed) {
  if (spec == "synthetic")
    return std::make_unique<tuigan::SyntheticExtractor<Scalar>>(seed);
  if (spec.rfind("file:", 0) == 0) {
    const std::string path = spec.substr(5);
    if (path.empty())
      throw tuigan::ConfigError("--extractor file: needs a path after the colon");
    return std::make_unique<tuigan::FileExtractor<Scalar>>(path);
  }
  throw tuigan::ConfigError("unknown extractor '" + spec +
                            "'; use synthetic or file:<path>");
}

int cmd_train(const TrainFlags& f) {
  const auto cfg = resolve_config(f);
  const fs::path out =
      f.out.empty() ? fs::path(default_out_root()) / "run" : fs::path(f.out);
  auto img_a = prepare_input(tuigan::load_image<Scalar>(f.image_a), f, cfg);
  auto img_b = prepare_input(tuigan::load_image<Scalar>(f.image_b), f, cfg);

  std::cout << "training " << (cfg.n_scales + 1) << " scales into " << out.string()
            << "\n";
  tuigan::run_training(img_a, img_b, cfg, tuigan::RunPaths{out}, f.resume,
                       input_extras(f, img_a, img_b));
  std::cout << "done; translations written to "
            << (out / "translated_ab.png").string() << " and "
            << (out / "translated_ba.png").string() << "\n";
  return 0;
}

int cmd_translate(const std::string& model_dir, const std::string& input,
                  const std::string& direction, const std::string& out) {
  const auto model = tuigan::load_model<Scalar>(tuigan::RunPaths{model_dir});
  auto img = tuigan::limit_size(tuigan::load_image<Scalar>(input),
                                model.config.max_size);
  const auto dir =
      direction == "ab" ? tuigan::Direction::ab : tuigan::Direction::ba;
  tuigan::save_image(tuigan::translate(model, img, dir), out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_evaluate(const std::string& manifest, std::string out,
                 const std::string& extractor_spec, std::uint64_t extractor_seed) {
  const auto extractor = make_extractor(extractor_spec, extractor_seed);
  const auto report = tuigan::evaluate_run<Scalar>(manifest, *extractor);
  if (out.empty())
    out = (fs::path(manifest).parent_path() / "metric_report.txt").string();
  tuigan::write_metric_report(report, out);
  std::cout << "pairs: " << report.pairs.size() << "\n"
            << "mean_sifid: " << report.mean_sifid << "\n"
            << "mean_pd: " << report.mean_pd << "\n"
            << "report: " << out << "\n";
  return 0;
}

int cmd_ablate(const TrainFlags& f, const std::vector<std::string>& only,
               const std::string& extractor_spec, std::uint64_t extractor_seed) {
  const auto cfg = resolve_config(f);
  const fs::path out =
      f.out.empty() ? fs::path(default_out_root()) / "ablation" : fs::path(f.out);
  auto img_a = prepare_input(tuigan::load_image<Scalar>(f.image_a), f, cfg);
  auto img_b = prepare_input(tuigan::load_image<Scalar>(f.image_b), f, cfg);
  const auto extractor = make_extractor(extractor_spec, extractor_seed);

  const auto results = tuigan::run_ablation(
      img_a, img_b, cfg, out, only, *extractor, input_extras(f, img_a, img_b),
      [](const std::string& label) { std::cout << "cell " << label << "...\n"; });

  std::cout << tuigan::format_ablation_table(results);
  std::cout << "table: " << (out / "ablation_report.txt").string() << "\n";
  for (const auto& r : results)
    if (!r.ok) {
      std::cerr << "cell " << r.label << " failed: " << r.error << "\n";
      return 1;
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unpaired image-to-image translation learned from two images"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model on one image pair");
  add_train_flags(train, train_flags, true);

  std::string tr_model, tr_input, tr_direction, tr_out;
  auto* translate = app.add_subcommand("translate", "apply a trained model");
  translate->add_option("--model", tr_model, "run directory")->required();
  translate->add_option("--input", tr_input, "image to translate")
      ->required()
      ->check(CLI::ExistingFile);
  translate->add_option("--direction", tr_direction, "ab or ba")
      ->required()
      ->check(CLI::IsMember({"ab", "ba"}));
  translate->add_option("--out", tr_out, "output PNG path")->required();

  std::string ev_manifest, ev_out, ev_extractor = "synthetic";
  std::uint64_t ev_seed = 2020;
  auto* evaluate = app.add_subcommand("evaluate", "score translated/target/source triples");
  evaluate->add_option("--manifest", ev_manifest,
                       "file of 'source target translated' path triples")
      ->required()
      ->check(CLI::ExistingFile);
  evaluate->add_option("--out", ev_out, "report path (default: next to the manifest)");
  evaluate->add_option("--extractor", ev_extractor, "synthetic or file:<path>");
  evaluate->add_option("--extractor-seed", ev_seed, "seed for the synthetic extractor");

  TrainFlags ab_flags;
  std::vector<std::string> ab_only;
  std::string ab_extractor = "synthetic";
  std::uint64_t ab_seed = 2020;
  auto* ablate = app.add_subcommand("ablate", "run the component-removal matrix");
  add_train_flags(ablate, ab_flags, false);
  ablate->add_option("--only", ab_only, "run only these cells (repeatable)");
  ablate->add_option("--extractor", ab_extractor, "synthetic or file:<path>");
  ablate->add_option("--extractor-seed", ab_seed, "seed for the synthetic extractor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return cmd_train(train_flags);
    if (*translate) return cmd_translate(tr_model, tr_input, tr_direction, tr_out);
    if (*evaluate) return cmd_evaluate(ev_manifest, ev_out, ev_extractor, ev_seed);
    if (*ablate) return cmd_ablate(ab_flags, ab_only, ab_extractor, ab_seed);
  } catch (const tuigan::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
