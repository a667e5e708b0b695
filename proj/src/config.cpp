#include "fvit/config.hpp"

#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

namespace fvit {
namespace {

using json = nlohmann::json;

void reject_unknown(const json& obj, const std::string& where,
                    const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
}

const json* find(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

void get_uint(const json& obj, const std::string& where, const std::string& key,
              size_t& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_number_integer() ||
      (!v->is_number_unsigned() && v->get<int64_t>() < 0))
    throw ConfigError(where + "." + key + ": expected a non-negative integer");
  out = v->get<size_t>();
}

void get_u64(const json& obj, const std::string& where, const std::string& key,
             uint64_t& out) {
  size_t tmp = out;
  get_uint(obj, where, key, tmp);
  out = tmp;
}

void get_real(const json& obj, const std::string& where, const std::string& key,
              double& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_number())
    throw ConfigError(where + "." + key + ": expected a number");
  out = v->get<double>();
}

void get_bool(const json& obj, const std::string& where, const std::string& key,
              bool& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_boolean())
    throw ConfigError(where + "." + key + ": expected a boolean");
  out = v->get<bool>();
}

void get_str(const json& obj, const std::string& where, const std::string& key,
             std::string& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_string())
    throw ConfigError(where + "." + key + ": expected a string");
  out = v->get<std::string>();
}

void get_uint_list(const json& obj, const std::string& where,
                   const std::string& key, std::vector<size_t>& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_array())
    throw ConfigError(where + "." + key + ": expected an array");
  std::vector<size_t> vals;
  for (const auto& e : *v) {
    if (!e.is_number_integer() ||
        (!e.is_number_unsigned() && e.get<int64_t>() < 0))
      throw ConfigError(where + "." + key +
                        ": expected non-negative integers");
    vals.push_back(e.get<size_t>());
  }
  out = std::move(vals);
}

void get_real_list(const json& obj, const std::string& where,
                   const std::string& key, std::vector<double>& out) {
  const json* v = find(obj, key);
  if (!v) return;
  if (!v->is_array())
    throw ConfigError(where + "." + key + ": expected an array");
  std::vector<double> vals;
  for (const auto& e : *v) {
    if (!e.is_number())
      throw ConfigError(where + "." + key + ": expected numbers");
    vals.push_back(e.get<double>());
  }
  out = std::move(vals);
}

void parse_model(const json& j, ModelConfig& m) {
  reject_unknown(j, "model",
                 {"image_size", "in_channels", "num_classes", "channels", "k",
                  "variant", "residual_scatter", "scorer_kernel",
                  "encoder_depth", "heads", "mlp_ratio", "expand_ratio",
                  "pool_window"});
  get_uint(j, "model", "image_size", m.image_size);
  get_uint(j, "model", "in_channels", m.in_channels);
  get_uint(j, "model", "num_classes", m.num_classes);
  get_uint_list(j, "model", "channels", m.channels);
  get_uint_list(j, "model", "k", m.k);
  get_str(j, "model", "variant", m.variant);
  get_bool(j, "model", "residual_scatter", m.residual_scatter);
  get_uint(j, "model", "scorer_kernel", m.scorer_kernel);
  get_uint(j, "model", "encoder_depth", m.encoder_depth);
  get_uint(j, "model", "heads", m.heads);
  get_uint(j, "model", "mlp_ratio", m.mlp_ratio);
  get_uint(j, "model", "expand_ratio", m.expand_ratio);
  get_uint(j, "model", "pool_window", m.pool_window);
}

void parse_optim(const json& j, OptimConfig& o) {
  reject_unknown(j, "optim",
                 {"lr_max", "lr_min", "t_max", "beta1", "beta2", "eps",
                  "weight_decay"});
  get_real(j, "optim", "lr_max", o.lr_max);
  get_real(j, "optim", "lr_min", o.lr_min);
  get_uint(j, "optim", "t_max", o.t_max);
  get_real(j, "optim", "beta1", o.beta1);
  get_real(j, "optim", "beta2", o.beta2);
  get_real(j, "optim", "eps", o.eps);
  get_real(j, "optim", "weight_decay", o.weight_decay);
}

void parse_augment(const json& j, AugmentConfig& a) {
  reject_unknown(j, "data.augment",
                 {"crop", "scale_min", "scale_max", "flip_prob", "mean",
                  "std"});
  get_bool(j, "data.augment", "crop", a.crop);
  get_real(j, "data.augment", "scale_min", a.scale_min);
  get_real(j, "data.augment", "scale_max", a.scale_max);
  get_real(j, "data.augment", "flip_prob", a.flip_prob);
  get_real_list(j, "data.augment", "mean", a.mean);
  get_real_list(j, "data.augment", "std", a.stdev);
}

void parse_data(const json& j, DataConfig& d) {
  reject_unknown(j, "data",
                 {"dataset", "path", "train_samples", "val_samples", "classes",
                  "augment"});
  get_str(j, "data", "dataset", d.dataset);
  get_str(j, "data", "path", d.path);
  get_uint(j, "data", "train_samples", d.train_samples);
  get_uint(j, "data", "val_samples", d.val_samples);
  get_uint(j, "data", "classes", d.classes);
  if (const json* a = find(j, "augment")) {
    if (!a->is_object())
      throw ConfigError("data.augment: expected an object");
    parse_augment(*a, d.augment);
  }
}

void parse_train(const json& j, TrainConfig& t) {
  reject_unknown(j, "train",
                 {"epochs", "batch_size", "seed", "dtype", "target_val_acc"});
  get_uint(j, "train", "epochs", t.epochs);
  get_uint(j, "train", "batch_size", t.batch_size);
  get_u64(j, "train", "seed", t.seed);
  get_str(j, "train", "dtype", t.dtype);
  get_real(j, "train", "target_val_acc", t.target_val_acc);
}

json model_json(const ModelConfig& m) {
  return json{{"image_size", m.image_size},
              {"in_channels", m.in_channels},
              {"num_classes", m.num_classes},
              {"channels", m.channels},
              {"k", m.k},
              {"variant", m.variant},
              {"residual_scatter", m.residual_scatter},
              {"scorer_kernel", m.scorer_kernel},
              {"encoder_depth", m.encoder_depth},
              {"heads", m.heads},
              {"mlp_ratio", m.mlp_ratio},
              {"expand_ratio", m.expand_ratio},
              {"pool_window", m.pool_window}};
}

}  // namespace

void validate_model(const ModelConfig& m) {
  if (m.image_size < 8 || m.image_size % 8 != 0)
    throw ConfigError("model.image_size: must be a positive multiple of 8");
  if (m.in_channels == 0) throw ConfigError("model.in_channels: must be >= 1");
  if (m.num_classes < 2) throw ConfigError("model.num_classes: must be >= 2");
  if (m.channels.size() != 5)
    throw ConfigError("model.channels: expected 5 stage widths, got " +
                      std::to_string(m.channels.size()));
  for (size_t c : m.channels)
    if (c == 0) throw ConfigError("model.channels: widths must be >= 1");
  if (m.k.size() != 3)
    throw ConfigError("model.k: expected 3 entries (one per filter stage)");
  for (size_t i = 0; i < 3; ++i) {
    const size_t hw = stage_grid(m, i) * stage_grid(m, i);
    if (m.k[i] > hw)
      throw ConfigError("model.k[" + std::to_string(i) + "]: " +
                        std::to_string(m.k[i]) + " exceeds the stage's " +
                        std::to_string(hw) + " positions");
  }
  if (m.variant != "filter" && m.variant != "dropout")
    throw ConfigError("model.variant: expected \"filter\" or \"dropout\"");
  if (m.scorer_kernel == 0 || m.scorer_kernel % 2 == 0)
    throw ConfigError("model.scorer_kernel: must be odd");
  if (m.encoder_depth == 0)
    throw ConfigError("model.encoder_depth: must be >= 1");
  if (m.heads == 0) throw ConfigError("model.heads: must be >= 1");
  if (m.mlp_ratio == 0) throw ConfigError("model.mlp_ratio: must be >= 1");
  if (m.expand_ratio == 0) throw ConfigError("model.expand_ratio: must be >= 1");
  const size_t deep = m.image_size / 8;
  if (m.pool_window == 0 || deep % m.pool_window != 0)
    throw ConfigError("model.pool_window: must divide the deepest grid side " +
                      std::to_string(deep));
  for (size_t i = 0; i < 3; ++i)
    if (m.channels[i + 1] % m.heads != 0)
      throw ConfigError("model.heads: must divide stage width " +
                        std::to_string(m.channels[i + 1]));
}

void validate(RunConfig& cfg) {
  validate_model(cfg.model);
  const ModelConfig& m = cfg.model;

  OptimConfig& o = cfg.optim;
  if (!(o.lr_max > 0) || o.lr_min < 0 || o.lr_min > o.lr_max)
    throw ConfigError("optim: require 0 <= lr_min <= lr_max, lr_max > 0");
  if (o.beta1 < 0 || o.beta1 >= 1 || o.beta2 < 0 || o.beta2 >= 1)
    throw ConfigError("optim: betas must lie in [0,1)");
  if (!(o.eps > 0)) throw ConfigError("optim.eps: must be > 0");
  if (o.weight_decay < 0)
    throw ConfigError("optim.weight_decay: must be >= 0");

  DataConfig& d = cfg.data;
  if (d.dataset != "synthetic" && d.dataset != "cifar10")
    throw ConfigError("data.dataset: expected \"synthetic\" or \"cifar10\"");
  if (d.dataset == "cifar10" && d.path.empty())
    throw ConfigError("data.path: required for cifar10");
  if (d.dataset == "synthetic") {
    if (d.classes < 2) throw ConfigError("data.classes: must be >= 2");
    if (d.train_samples < d.classes || d.val_samples < d.classes)
      throw ConfigError("data: need at least one sample per class per split");
  }
  AugmentConfig& a = d.augment;
  if (!(a.scale_min > 0) || a.scale_min > a.scale_max || a.scale_max > 1)
    throw ConfigError("data.augment: require 0 < scale_min <= scale_max <= 1");
  if (a.flip_prob < 0 || a.flip_prob > 1)
    throw ConfigError("data.augment.flip_prob: must lie in [0,1]");
  if (a.mean.size() != m.in_channels || a.stdev.size() != m.in_channels)
    throw ConfigError("data.augment: mean/std need one entry per channel");
  for (double s : a.stdev)
    if (!(s > 0)) throw ConfigError("data.augment.std: must be > 0");

  TrainConfig& t = cfg.train;
  if (t.epochs == 0) throw ConfigError("train.epochs: must be >= 1");
  if (t.batch_size == 0) throw ConfigError("train.batch_size: must be >= 1");
  if (t.dtype != "f32" && t.dtype != "f64")
    throw ConfigError("train.dtype: expected \"f32\" or \"f64\"");
  if (t.target_val_acc < 0 || t.target_val_acc > 1)
    throw ConfigError("train.target_val_acc: must lie in [0,1]");

  if (o.t_max == 0) o.t_max = t.epochs;
  if (o.t_max < t.epochs)
    throw ConfigError("optim.t_max: shorter than train.epochs");
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  reject_unknown(j, "config", {"model", "optim", "data", "train"});
  RunConfig cfg;
  auto sub = [&](const char* key) -> const json* {
    const json* v = find(j, key);
    if (v && !v->is_object())
      throw ConfigError(std::string(key) + ": expected an object");
    return v;
  };
  if (const json* v = sub("model")) parse_model(*v, cfg.model);
  if (const json* v = sub("optim")) parse_optim(*v, cfg.optim);
  if (const json* v = sub("data")) parse_data(*v, cfg.data);
  if (const json* v = sub("train")) parse_train(*v, cfg.train);
  validate(cfg);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string to_json(const RunConfig& cfg) {
  json j;
  j["model"] = model_json(cfg.model);
  j["optim"] = json{{"lr_max", cfg.optim.lr_max},
                    {"lr_min", cfg.optim.lr_min},
                    {"t_max", cfg.optim.t_max},
                    {"beta1", cfg.optim.beta1},
                    {"beta2", cfg.optim.beta2},
                    {"eps", cfg.optim.eps},
                    {"weight_decay", cfg.optim.weight_decay}};
  j["data"] = json{{"dataset", cfg.data.dataset},
                   {"path", cfg.data.path},
                   {"train_samples", cfg.data.train_samples},
                   {"val_samples", cfg.data.val_samples},
                   {"classes", cfg.data.classes},
                   {"augment", json{{"crop", cfg.data.augment.crop},
                                    {"scale_min", cfg.data.augment.scale_min},
                                    {"scale_max", cfg.data.augment.scale_max},
                                    {"flip_prob", cfg.data.augment.flip_prob},
                                    {"mean", cfg.data.augment.mean},
                                    {"std", cfg.data.augment.stdev}}}};
  j["train"] = json{{"epochs", cfg.train.epochs},
                    {"batch_size", cfg.train.batch_size},
                    {"seed", cfg.train.seed},
                    {"dtype", cfg.train.dtype},
                    {"target_val_acc", cfg.train.target_val_acc}};
  return j.dump(2);
}

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t config_fingerprint(const ModelConfig& model, const std::string& dtype) {
  json j;
  j["dtype"] = dtype;
  j["model"] = model_json(model);
  return fnv1a64(j.dump());
}

}  // namespace fvit
