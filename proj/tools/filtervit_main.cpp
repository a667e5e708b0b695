// filtervit: train, evaluate, compare, explain, and benchmark the
// importance-filtered attention models from the command line.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#include "fvit/bench.hpp"
#include "fvit/interpret.hpp"
#include "fvit/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fvit;
using nlohmann::json;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// JSON-valued options accept a file path or an inline document
std::string text_or_file(const std::string& arg) {
  if (!arg.empty() && arg.front() == '{') return arg;
  return slurp(arg);
}

void apply_data_override(RunConfig& cfg, const std::string& data) {
  if (data.empty()) return;
  if (data == "synthetic") {
    cfg.data.dataset = "synthetic";
  } else {
    cfg.data.dataset = "cifar10";
    cfg.data.path = data;
  }
}

void print_epoch(const MetricsRow& r) {
  std::cout << "epoch " << std::setw(3) << r.epoch << "  train "
            << std::fixed << std::setprecision(4) << r.train_loss << '/'
            << r.train_acc << "  val " << r.val_loss << '/' << r.val_acc
            << "  lr " << std::setprecision(6) << r.lr << "  "
            << std::setprecision(1) << r.seconds << "s\n"
            << std::defaultfloat << std::setprecision(6);
  std::cout.flush();
}

template <typename Real>
int cmd_train(const RunConfig& cfg, const std::string& out,
              const std::string& resume) {
  auto [train_ds, val_ds] = load_datasets<Real>(cfg);
  std::cout << cfg.model.variant << " variant, "
            << FilterVit<Real>(cfg.model, cfg.train.seed).param_count()
            << " parameters, " << train_ds.size() << " train / "
            << val_ds.size() << " val samples\n";
  auto art = train_run(cfg, out, train_ds, val_ds, resume, print_epoch);
  std::cout << "best val_acc " << art.best_val_acc << " at epoch "
            << art.best_epoch << (art.target_reached ? " (target reached)" : "")
            << "\nwrote " << art.summary_path << '\n';
  return 0;
}

template <typename Real>
int cmd_eval(const std::string& ckpt, const std::string& data) {
  auto loaded = read_checkpoint<Real>(ckpt);
  RunConfig cfg = loaded.meta.config;
  apply_data_override(cfg, data);
  auto [train_ds, val_ds] = load_datasets<Real>(cfg);
  (void)train_ds;
  FilterVit<Real> model(cfg.model, cfg.train.seed);
  restore_model(model, loaded);
  auto r = evaluate(model, val_ds, cfg.data.augment, cfg.train.batch_size);
  json out{{"checkpoint", ckpt},
           {"epoch", loaded.meta.epoch},
           {"samples", val_ds.size()},
           {"loss", r.loss},
           {"accuracy", r.accuracy}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

template <typename Real>
int cmd_ablate(const RunConfig& cfg, const std::vector<uint64_t>& seeds,
               const std::string& out) {
  auto summary = ablation_compare<Real>(cfg, seeds, out);
  std::cout << std::setw(6) << "seed" << std::setw(16) << "filter"
            << std::setw(16) << "dropout" << '\n';
  for (const auto& row : summary["table"]) {
    const uint64_t seed = row["seed"];
    const double filter_acc = row["filter"]["final_val_acc"];
    const double dropout_acc = row["dropout"]["final_val_acc"];
    std::cout << std::setw(6) << seed << std::setw(16) << filter_acc
              << std::setw(16) << dropout_acc << '\n';
  }
  const size_t wins = summary["filter_final_at_least_dropout"];
  std::cout << "filter finished at or above dropout in " << wins << " of "
            << seeds.size() << " seeds\nwrote "
            << (fs::path(out) / "summary.json").string() << '\n';
  return 0;
}

template <typename Real>
int cmd_explain(const std::string& ckpt, const std::string& image,
                const std::string& out, double alpha,
                const std::string& layer) {
  auto loaded = read_checkpoint<Real>(ckpt);
  RunConfig cfg = loaded.meta.config;
  FilterVit<Real> model(cfg.model, cfg.train.seed);
  restore_model(model, loaded);

  const size_t S = cfg.model.image_size;
  auto sized = bilinear_resize(read_ppm<Real>(image), S, S);
  auto ex = extract_masks(
      model, normalize(sized, cfg.data.augment.mean, cfg.data.augment.stdev));
  auto stats = selection_coverage(ex.stages);

  size_t lo = 0, hi = ex.stages.size();
  if (layer != "all") {
    size_t n = 0;
    try {
      n = std::stoul(layer);
    } catch (const std::exception&) {
      throw ContractError("explain: --layer wants a stage number or 'all'");
    }
    if (n < 1 || n > ex.stages.size())
      throw ContractError("explain: stage " + layer + " outside 1.." +
                          std::to_string(ex.stages.size()));
    lo = n - 1;
    hi = n;
  }

  fs::create_directories(out);
  json stages = json::array();
  for (size_t s = lo; s < hi; ++s) {
    const auto path =
        (fs::path(out) / ("stage" + std::to_string(s + 1) + ".ppm")).string();
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw FormatError("explain: cannot write " + path);
    file << render_overlay(sized, ex.stages[s].mask, alpha);
    std::cout << "wrote " << path << '\n';

    json st{{"stage", s + 1},
            {"grid", stats[s].grid},
            {"selected", stats[s].selected_count},
            {"selected_fraction", stats[s].selected_fraction},
            {"selected_mean", stats[s].selected_mean},
            {"overlay", path}};
    if (!stats[s].full) st["unselected_mean"] = stats[s].unselected_mean;
    if (stats[s].overlap_next >= 0)
      st["overlap_with_next"] = stats[s].overlap_next;
    stages.push_back(st);
  }

  const Real* lg = ex.logits.ptr();
  const size_t classes = ex.logits.dim(1);
  json cov{{"checkpoint", ckpt},
           {"image", image},
           {"alpha", alpha},
           {"prediction",
            size_t(std::max_element(lg, lg + classes) - lg)},
           {"stages", stages}};
  const auto cov_path = (fs::path(out) / "coverage.json").string();
  std::ofstream file(cov_path, std::ios::trunc);
  file << cov.dump(2) << '\n';
  std::cout << "wrote " << cov_path << '\n';
  return 0;
}

std::string checkpoint_dtype(const std::string& path) {
  return peek_checkpoint_meta(path).config.train.dtype;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"importance-filtered attention: train, evaluate, compare, "
               "explain, benchmark"};
  app.require_subcommand(1);

  std::string config_arg, out_arg, resume_arg, ckpt_arg, data_arg;
  std::string image_arg, layer_arg = "all", grid_arg, element_arg = "f32";
  std::vector<uint64_t> seeds_arg;
  double alpha_arg = 0.5;

  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config_arg,
                    "run config: JSON file or inline document")
      ->required();
  train->add_option("--out", out_arg, "output directory")->required();
  train->add_option("--resume", resume_arg, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_arg, "checkpoint file")->required();
  eval->add_option("--data", data_arg,
                   "CIFAR-10 file/directory, or 'synthetic'");

  auto* ablate = app.add_subcommand(
      "ablate", "train filter and dropout variants across seeds");
  ablate->add_option("--config", config_arg,
                     "run config: JSON file or inline document")
      ->required();
  ablate->add_option("--seeds", seeds_arg, "comma-separated seeds")
      ->required()
      ->delimiter(',');
  ablate->add_option("--out", out_arg, "output directory")->required();

  auto* explain = app.add_subcommand(
      "explain", "export per-stage importance overlays for one image");
  explain->add_option("--checkpoint", ckpt_arg, "checkpoint file")->required();
  explain->add_option("--image", image_arg, "input image (binary PPM)")
      ->required();
  explain->add_option("--out", out_arg, "output directory")->required();
  explain->add_option("--alpha", alpha_arg, "overlay blend in [0,1]");
  explain->add_option("--layer", layer_arg, "stage number, or 'all'");

  auto* bench = app.add_subcommand(
      "bench", "time attention variants over a grid");
  bench->add_option("--grid", grid_arg, "grid spec: JSON file or inline")
      ->required();
  bench->add_option("--out", out_arg, "CSV output path")->required();
  bench->add_option("--element", element_arg, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = parse_run_config(text_or_file(config_arg));
      return cfg.train.dtype == "f64"
                 ? cmd_train<double>(cfg, out_arg, resume_arg)
                 : cmd_train<float>(cfg, out_arg, resume_arg);
    }
    if (*eval) {
      return checkpoint_dtype(ckpt_arg) == "f64"
                 ? cmd_eval<double>(ckpt_arg, data_arg)
                 : cmd_eval<float>(ckpt_arg, data_arg);
    }
    if (*ablate) {
      RunConfig cfg = parse_run_config(text_or_file(config_arg));
      return cfg.train.dtype == "f64"
                 ? cmd_ablate<double>(cfg, seeds_arg, out_arg)
                 : cmd_ablate<float>(cfg, seeds_arg, out_arg);
    }
    if (*explain) {
      return checkpoint_dtype(ckpt_arg) == "f64"
                 ? cmd_explain<double>(ckpt_arg, image_arg, out_arg, alpha_arg,
                                       layer_arg)
                 : cmd_explain<float>(ckpt_arg, image_arg, out_arg, alpha_arg,
                                      layer_arg);
    }
    auto grid = parse_bench_grid(text_or_file(grid_arg));
    auto report = element_arg == "f64" ? run_bench<double>(grid)
                                       : run_bench<float>(grid);
    std::ofstream csv(out_arg, std::ios::trunc);
    if (!csv) throw FormatError("bench: cannot write " + out_arg);
    csv << bench_csv(report);
    std::cout << bench_table(report) << "wrote " << out_arg << '\n';
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
