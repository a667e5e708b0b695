// Training loop: cosine-scheduled AdamW over shuffled augmented batches,
// per-epoch evaluation, metrics CSV + JSON summary, best/last checkpoints,
// deterministic resume, and the paired-variant ablation driver.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fvit/checkpoint.hpp"
#include "fvit/config.hpp"
#include "fvit/data.hpp"
#include "fvit/model.hpp"
#include "fvit/optim.hpp"

namespace fvit {

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
};

template <typename Real>
size_t argmax_hits(const Tensor<Real>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ContractError("accuracy: logits/labels mismatch");
  const size_t B = logits.dim(0), C = logits.dim(1);
  size_t hits = 0;
  for (size_t b = 0; b < B; ++b) {
    const Real* row = logits.ptr() + b * C;
    hits += size_t(std::max_element(row, row + C) - row) == size_t(labels[b]);
  }
  return hits;
}

template <typename Real>
EvalResult evaluate(FilterVit<Real>& model, const Dataset<Real>& ds,
                    const AugmentConfig& aug, size_t batch_size) {
  if (ds.empty()) throw ContractError("evaluate: empty dataset");
  if (batch_size == 0) throw ContractError("evaluate: batch_size must be >= 1");
  const size_t S = model.cfg.image_size;
  size_t hits = 0;
  double loss_sum = 0;
  std::vector<uint32_t> idx;
  for (size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (size_t i = start; i < std::min(ds.size(), start + batch_size); ++i)
      idx.push_back(uint32_t(i));
    auto [xs, labels] = make_batch(ds, idx, aug, S, false);
    auto logits = model.forward(xs, false, nullptr);
    loss_sum += double(cross_entropy(logits, labels).item()) * double(idx.size());
    hits += argmax_hits(logits, labels);
  }
  return {loss_sum / double(ds.size()), double(hits) / double(ds.size())};
}

template <typename Real>
std::pair<Dataset<Real>, Dataset<Real>> load_datasets(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.dataset == "synthetic") {
    return {synth_dataset<Real>(d.classes, d.train_samples,
                                cfg.model.image_size,
                                mix_seed(cfg.train.seed, 0xDA7A1)),
            synth_dataset<Real>(d.classes, d.val_samples,
                                cfg.model.image_size,
                                mix_seed(cfg.train.seed, 0xDA7A2))};
  }
  namespace fs = std::filesystem;
  if (fs::is_directory(d.path)) {
    Dataset<Real> train, val;
    for (int i = 1; i <= 5; ++i) {
      const fs::path p =
          fs::path(d.path) / ("data_batch_" + std::to_string(i) + ".bin");
      if (!fs::exists(p)) continue;
      auto part = load_cifar10_binary<Real>(p.string());
      train.insert(train.end(), part.begin(), part.end());
    }
    val = load_cifar10_binary<Real>((fs::path(d.path) / "test_batch.bin").string());
    if (train.empty() || val.empty())
      throw FormatError("cifar10: no batch files under " + d.path);
    return {std::move(train), std::move(val)};
  }
  // single file: hold out the tail as validation
  auto all = load_cifar10_binary<Real>(d.path);
  const size_t val_n = std::min(all.size() / 5 + 1, std::max<size_t>(
                                    d.val_samples, 1));
  if (all.size() <= val_n)
    throw ContractError("cifar10: file too small to split");
  Dataset<Real> val(all.end() - long(val_n), all.end());
  all.resize(all.size() - val_n);
  return {std::move(all), std::move(val)};
}

struct TrainArtifacts {
  std::vector<MetricsRow> metrics;
  long best_epoch = -1;
  double best_val_acc = 0;
  bool target_reached = false;
  std::string best_path, last_path, metrics_path, summary_path;
};

namespace detail {

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("metrics: cannot write " + path);
  out << "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n";
  out << std::setprecision(17);
  for (const auto& r : rows)
    out << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ','
        << r.val_loss << ',' << r.val_acc << ',' << r.lr << ',' << r.seconds
        << '\n';
}

template <typename Real>
void abort_if_non_finite(const Tensor<Real>& batch, FilterVit<Real>& model,
                         const Tensor<Real>& logits, const Tensor<Real>& loss,
                         size_t epoch, size_t step) {
  if (std::isfinite(double(loss.item()))) return;
  std::string culprit = "loss";
  if (!all_finite(batch)) {
    culprit = "input batch";
  } else {
    for (auto& p : model.params())
      if (!all_finite(p.tensor)) {
        culprit = p.name;
        break;
      }
    if (culprit == "loss" && !all_finite(logits)) culprit = "logits";
  }
  throw ContractError("training aborted: non-finite " + culprit + " at epoch " +
                      std::to_string(epoch + 1) + ", step " +
                      std::to_string(step + 1));
}

}  // namespace detail

using EpochHook = std::function<void(const MetricsRow&)>;

template <typename Real>
TrainArtifacts train_run(const RunConfig& cfg, const std::string& out_dir,
                         const Dataset<Real>& train_ds,
                         const Dataset<Real>& val_ds,
                         const std::string& resume_path = "",
                         const EpochHook& on_epoch = {}) {
  namespace fs = std::filesystem;
  if (train_ds.empty() || val_ds.empty())
    throw ContractError("train: empty dataset");
  for (const auto& img : train_ds)
    if (img.label < 0 || size_t(img.label) >= cfg.model.num_classes)
      throw ContractError("train: label " + std::to_string(img.label) +
                          " outside the model's " +
                          std::to_string(cfg.model.num_classes) + " classes");
  fs::create_directories(out_dir);

  FilterVit<Real> model(cfg.model, cfg.train.seed);
  auto params = model.params();
  AdamW<Real> opt(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps,
                  cfg.optim.weight_decay, params);
  CosineSchedule sched{cfg.optim.lr_max, cfg.optim.lr_min, cfg.optim.t_max};

  TrainArtifacts art;
  art.best_path = (fs::path(out_dir) / "best.ckpt").string();
  art.last_path = (fs::path(out_dir) / "last.ckpt").string();
  art.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  art.summary_path = (fs::path(out_dir) / "summary.json").string();

  size_t start_epoch = 0;
  if (!resume_path.empty()) {
    auto loaded = read_checkpoint<Real>(resume_path);
    // a resumed run may extend epochs or drop the early-exit target; the lr
    // schedule still has to agree, which pinning t_max guarantees
    RunConfig stored = loaded.meta.config;
    stored.train.epochs = cfg.train.epochs;
    stored.train.target_val_acc = cfg.train.target_val_acc;
    if (to_json(stored) != to_json(cfg))
      throw ContractError("resume: run config differs from the checkpoint's");
    restore_model(model, loaded);
    if (loaded.has_optimizer_state()) restore_optimizer(opt, loaded, params);
    start_epoch = loaded.meta.epoch;
    art.metrics = loaded.meta.metrics;
    art.best_epoch = loaded.meta.best_epoch;
    art.best_val_acc = loaded.meta.best_val_acc;
  }

  const size_t S = cfg.model.image_size;
  const bool needs_selection_rng = cfg.model.variant == "dropout";

  auto save = [&](const std::string& path, size_t completed) {
    CheckpointMeta meta;
    meta.config = cfg;
    meta.epoch = completed;
    meta.opt_steps = opt.steps();
    meta.metrics = art.metrics;
    meta.best_epoch = art.best_epoch;
    meta.best_val_acc = art.best_val_acc;
    auto tensors = params;
    opt.collect_state(params, tensors);
    write_checkpoint(path, meta, tensors);
  };

  for (size_t epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(sched, epoch);
    Rng shuffle_rng(mix_seed(cfg.train.seed, epoch * 3 + 1));
    Rng augment_rng(mix_seed(cfg.train.seed, epoch * 3 + 2));
    Rng selection_rng(mix_seed(cfg.train.seed, epoch * 3 + 3));

    double loss_sum = 0;
    size_t hits = 0, step = 0;
    for (const auto& idx :
         index_batches(train_ds.size(), cfg.train.batch_size, shuffle_rng)) {
      auto [xs, labels] =
          make_batch(train_ds, idx, cfg.data.augment, S, true, &augment_rng);
      if (!all_finite(xs))
        throw ContractError("training aborted: non-finite input batch at "
                            "epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step + 1));
      Tape<Real> tape;
      TapeScope<Real> scope(tape);
      auto logits = model.forward(
          xs, true, needs_selection_rng ? &selection_rng : nullptr);
      auto loss = cross_entropy(logits, labels);
      detail::abort_if_non_finite(xs, model, logits, loss, epoch, step);
      backward(loss);
      opt.step(params, lr);
      for (auto& p : params) p.tensor.zero_grad();
      loss_sum += double(loss.item()) * double(idx.size());
      hits += argmax_hits(logits, labels);
      ++step;
    }

    EvalResult val =
        evaluate(model, val_ds, cfg.data.augment, cfg.train.batch_size);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();

    MetricsRow row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / double(train_ds.size());
    row.train_acc = double(hits) / double(train_ds.size());
    row.val_loss = val.loss;
    row.val_acc = val.accuracy;
    row.lr = lr;
    row.seconds = seconds;
    art.metrics.push_back(row);

    if (val.accuracy > art.best_val_acc || art.best_epoch < 0) {
      art.best_val_acc = val.accuracy;
      art.best_epoch = long(epoch + 1);
      save(art.best_path, epoch + 1);
    }
    save(art.last_path, epoch + 1);
    detail::write_metrics_csv(art.metrics_path, art.metrics);
    if (on_epoch) on_epoch(row);

    if (cfg.train.target_val_acc > 0 &&
        val.accuracy >= cfg.train.target_val_acc) {
      art.target_reached = true;
      break;
    }
  }

  nlohmann::json summary;
  summary["config"] = nlohmann::json::parse(to_json(cfg));
  summary["fingerprint"] =
      config_fingerprint(cfg.model, cfg.train.dtype);
  summary["epochs_completed"] = art.metrics.size();
  summary["best_epoch"] = art.best_epoch;
  summary["best_val_acc"] = art.best_val_acc;
  summary["target_reached"] = art.target_reached;
  if (!art.metrics.empty()) {
    summary["final_val_acc"] = art.metrics.back().val_acc;
    summary["final_train_acc"] = art.metrics.back().train_acc;
  }
  summary["checkpoints"] = {{"best", art.best_path}, {"last", art.last_path}};
  std::ofstream out(art.summary_path, std::ios::trunc);
  out << summary.dump(2) << '\n';
  return art;
}

// Trains the learned-selection and random-selection variants from identical
// initial weights for each seed and collects the paired curves.
template <typename Real>
nlohmann::json ablation_compare(const RunConfig& base,
                                const std::vector<uint64_t>& seeds,
                                const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (seeds.empty()) throw ContractError("ablate: no seeds");
  fs::create_directories(out_dir);
  nlohmann::json series = nlohmann::json::array();
  nlohmann::json table = nlohmann::json::array();
  size_t filter_wins = 0;

  for (uint64_t seed : seeds) {
    nlohmann::json row{{"seed", seed}};
    double final_acc[2] = {0, 0};
    for (const std::string variant : {"filter", "dropout"}) {
      RunConfig cfg = base;
      cfg.model.variant = variant;
      cfg.train.seed = seed;
      const std::string run_dir =
          (fs::path(out_dir) / ("seed" + std::to_string(seed)) / variant)
              .string();
      auto [train_ds, val_ds] = load_datasets<Real>(cfg);

      FilterVit<Real> probe(cfg.model, cfg.train.seed);
      EvalResult pre = evaluate(probe, val_ds, cfg.data.augment,
                                cfg.train.batch_size);

      auto art = train_run(cfg, run_dir, train_ds, val_ds);
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& r : art.metrics)
        curve.push_back({{"epoch", r.epoch},
                         {"train_acc", r.train_acc},
                         {"val_acc", r.val_acc}});
      series.push_back({{"seed", seed},
                        {"variant", variant},
                        {"pretrain_val_loss", pre.loss},
                        {"pretrain_val_acc", pre.accuracy},
                        {"metrics_csv", art.metrics_path},
                        {"curve", curve}});
      row[variant] = {{"final_val_acc", art.metrics.back().val_acc},
                      {"best_val_acc", art.best_val_acc},
                      {"best_epoch", art.best_epoch}};
      final_acc[variant == "dropout"] = art.metrics.back().val_acc;
    }
    filter_wins += final_acc[0] >= final_acc[1];
    table.push_back(row);
  }

  nlohmann::json summary;
  summary["seeds"] = seeds;
  summary["series"] = series;
  summary["table"] = table;
  summary["filter_final_at_least_dropout"] = filter_wins;
  summary["majority_filter"] = filter_wins * 2 > seeds.size();
  std::ofstream out(fs::path(out_dir) / "summary.json", std::ios::trunc);
  out << summary.dump(2) << '\n';
  return summary;
}

}  // namespace fvit
