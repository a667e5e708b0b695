// Checkpoint container: a JSON manifest (run config, fingerprint, progress,
// metric history, tensor directory) followed by concatenated tensor blobs.
#pragma once

#include <cstdint>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fvit/config.hpp"
#include "fvit/errors.hpp"
#include "fvit/model.hpp"
#include "fvit/optim.hpp"
#include "fvit/serialize.hpp"

namespace fvit {

constexpr uint32_t kCheckpointVersion = 1;

struct MetricsRow {
  size_t epoch = 0;
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
  double lr = 0, seconds = 0;
};

struct CheckpointMeta {
  RunConfig config;
  size_t epoch = 0;      // completed epochs
  size_t opt_steps = 0;  // optimizer step counter
  std::vector<MetricsRow> metrics;
  long best_epoch = -1;
  double best_val_acc = 0.0;
};

template <typename Real>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<NamedParam<Real>> tensors;

  const Tensor<Real>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  }
  bool has_optimizer_state() const {
    for (const auto& t : tensors)
      if (t.name.ends_with(".adam_m")) return true;
    return false;
  }
};

namespace detail {

inline const char* dtype_tag(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline nlohmann::json meta_to_json(const CheckpointMeta& meta) {
  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["config"] = nlohmann::json::parse(to_json(meta.config));
  j["fingerprint"] =
      config_fingerprint(meta.config.model, meta.config.train.dtype);
  j["epoch"] = meta.epoch;
  j["opt_steps"] = meta.opt_steps;
  j["best_epoch"] = meta.best_epoch;
  j["best_val_acc"] = meta.best_val_acc;
  auto rows = nlohmann::json::array();
  for (const auto& r : meta.metrics)
    rows.push_back({{"epoch", r.epoch},
                    {"train_loss", r.train_loss},
                    {"train_acc", r.train_acc},
                    {"val_loss", r.val_loss},
                    {"val_acc", r.val_acc},
                    {"lr", r.lr},
                    {"seconds", r.seconds}});
  j["metrics"] = rows;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("version") || !j.contains("config"))
    throw FormatError("checkpoint: malformed manifest");
  if (j["version"].get<uint32_t>() != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " +
                      j["version"].dump());
  CheckpointMeta meta;
  try {
    meta.config = parse_run_config(j["config"].dump());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: embedded config invalid: ") +
                      e.what());
  }
  const uint64_t want =
      config_fingerprint(meta.config.model, meta.config.train.dtype);
  if (j["fingerprint"].get<uint64_t>() != want)
    throw FormatError("checkpoint: fingerprint does not match its config");
  meta.epoch = j["epoch"].get<size_t>();
  meta.opt_steps = j["opt_steps"].get<size_t>();
  meta.best_epoch = j["best_epoch"].get<long>();
  meta.best_val_acc = j["best_val_acc"].get<double>();
  for (const auto& r : j["metrics"]) {
    MetricsRow row;
    row.epoch = r["epoch"].get<size_t>();
    row.train_loss = r["train_loss"].get<double>();
    row.train_acc = r["train_acc"].get<double>();
    row.val_loss = r["val_loss"].get<double>();
    row.val_acc = r["val_acc"].get<double>();
    row.lr = r["lr"].get<double>();
    row.seconds = r["seconds"].get<double>();
    meta.metrics.push_back(row);
  }
  return meta;
}

inline nlohmann::json read_manifest(std::istream& in, const std::string& path) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != "FVCK")
    throw FormatError("checkpoint: " + path + " is not a checkpoint file");
  const uint64_t len = read_u64(in, "manifest length");
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw FormatError("checkpoint: truncated manifest in " + path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw FormatError("checkpoint: corrupt manifest in " + path);
  }
}

}  // namespace detail

template <typename Real>
void write_checkpoint(const std::string& path, const CheckpointMeta& meta,
                      const std::vector<NamedParam<Real>>& tensors) {
  if (meta.config.train.dtype != detail::dtype_tag(dtype_of<Real>()))
    throw ContractError("checkpoint: config dtype " + meta.config.train.dtype +
                        " does not match the tensors being written");
  std::ostringstream blobs(std::ios::binary);
  auto dir = nlohmann::json::array();
  for (const auto& t : tensors) {
    dir.push_back({{"name", t.name}, {"offset", uint64_t(blobs.tellp())}});
    write_tensor(blobs, t.tensor);
  }
  nlohmann::json manifest = detail::meta_to_json(meta);
  manifest["tensors"] = dir;
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  out.write("FVCK", 4);
  detail::write_u64(out, mtext.size());
  out.write(mtext.data(), std::streamsize(mtext.size()));
  const std::string body = blobs.str();
  out.write(body.data(), std::streamsize(body.size()));
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

inline CheckpointMeta peek_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  return detail::meta_from_json(detail::read_manifest(in, path));
}

template <typename Real>
LoadedCheckpoint<Real> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  nlohmann::json manifest = detail::read_manifest(in, path);
  LoadedCheckpoint<Real> out;
  out.meta = detail::meta_from_json(manifest);
  if (out.meta.config.train.dtype != detail::dtype_tag(dtype_of<Real>()))
    throw FormatError("checkpoint: holds " + out.meta.config.train.dtype +
                      " tensors");
  for (const auto& entry : manifest["tensors"]) {
    NamedParam<Real> t;
    t.name = entry["name"].get<std::string>();
    t.tensor = read_tensor<Real>(in);
    out.tensors.push_back(std::move(t));
  }
  return out;
}

// Copies stored values into the model's parameters after checking that the
// architectures match.
template <typename Real>
void restore_model(FilterVit<Real>& model, const LoadedCheckpoint<Real>& ck) {
  const uint64_t want =
      config_fingerprint(model.cfg, ck.meta.config.train.dtype);
  const uint64_t have =
      config_fingerprint(ck.meta.config.model, ck.meta.config.train.dtype);
  if (want != have)
    throw FormatError("checkpoint: built for a different architecture");
  for (auto& p : model.params()) {
    const Tensor<Real>* stored = ck.find(p.name);
    if (!stored)
      throw FormatError("checkpoint: missing tensor " + p.name);
    if (stored->shape() != p.tensor.shape())
      throw FormatError("checkpoint: shape mismatch for " + p.name);
    p.tensor.data() = stored->data();
  }
}

template <typename Real>
void restore_optimizer(AdamW<Real>& opt, const LoadedCheckpoint<Real>& ck,
                       const std::vector<NamedParam<Real>>& params) {
  std::vector<std::vector<Real>> ms, vs;
  for (const auto& p : params) {
    const Tensor<Real>* m = ck.find(p.name + ".adam_m");
    const Tensor<Real>* v = ck.find(p.name + ".adam_v");
    if (!m || !v)
      throw FormatError("checkpoint: missing optimizer state for " + p.name);
    ms.push_back(m->data());
    vs.push_back(v->data());
  }
  opt.restore_state(ck.meta.opt_steps, ms, vs);
}

}  // namespace fvit
