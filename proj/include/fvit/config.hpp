// Run configuration: plain structs mirroring the JSON schema accepted by the
// CLI, plus parsing/validation and a stable fingerprint for checkpoints.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fvit/errors.hpp"

namespace fvit {

struct ModelConfig {
  size_t image_size = 64;
  size_t in_channels = 3;
  size_t num_classes = 10;
  std::vector<size_t> channels = {16, 24, 48, 64, 96};
  // per-stage token budget; 0 selects the default ceil(H*W/4)
  std::vector<size_t> k = {0, 0, 0};
  std::string variant = "filter";  // "filter" (top-k) or "dropout" (random)
  bool residual_scatter = false;
  size_t scorer_kernel = 3;
  size_t encoder_depth = 2;
  size_t heads = 2;
  size_t mlp_ratio = 2;
  size_t expand_ratio = 4;
  size_t pool_window = 2;
};

struct OptimConfig {
  double lr_max = 5e-4;
  double lr_min = 1e-5;
  size_t t_max = 0;  // 0 = follow train.epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AugmentConfig {
  bool crop = true;
  double scale_min = 0.67;
  double scale_max = 1.0;
  double flip_prob = 0.5;
  std::vector<double> mean = {0.5, 0.5, 0.5};
  std::vector<double> stdev = {0.5, 0.5, 0.5};
};

struct DataConfig {
  std::string dataset = "synthetic";  // "synthetic" or "cifar10"
  std::string path;                   // cifar10: binary batch file
  size_t train_samples = 2000;        // synthetic only
  size_t val_samples = 400;           // synthetic only
  size_t classes = 4;                 // synthetic only
  AugmentConfig augment;
};

struct TrainConfig {
  size_t epochs = 30;
  size_t batch_size = 64;
  uint64_t seed = 42;
  std::string dtype = "f32";  // "f32" or "f64"
  double target_val_acc = 0.0;  // stop once reached; 0 disables
};

struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  DataConfig data;
  TrainConfig train;
};

// Token grid side length feeding filter stage `i` (0-based); the stem plus
// the stage strides halve the input three times total.
inline size_t stage_grid(const ModelConfig& m, size_t i) {
  return m.image_size >> (i + 1);
}

// Resolved token budget for filter stage `i`.
inline size_t stage_k(const ModelConfig& m, size_t i) {
  const size_t hw = stage_grid(m, i) * stage_grid(m, i);
  return m.k[i] == 0 ? (hw + 3) / 4 : m.k[i];
}

// Throw ConfigError naming the offending field; the RunConfig overload also
// resolves optim.t_max.
void validate_model(const ModelConfig& m);
void validate(RunConfig& cfg);

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Deterministic JSON (sorted keys, every field explicit).
std::string to_json(const RunConfig& cfg);

uint64_t fnv1a64(std::string_view s);

// Hash over the model architecture and element type only — everything that
// must match for a checkpoint's tensors to be loadable.
uint64_t config_fingerprint(const ModelConfig& model, const std::string& dtype);

}  // namespace fvit
