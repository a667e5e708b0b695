#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fvit/checkpoint.hpp"

using namespace fvit;

namespace {

RunConfig tiny_run() {
  RunConfig cfg = parse_run_config(R"({
    "model": {"image_size": 16, "channels": [4, 4, 6, 8, 8],
              "num_classes": 3, "k": [0, 0, 2], "pool_window": 1},
    "data": {"classes": 3, "train_samples": 6, "val_samples": 3},
    "train": {"epochs": 4, "dtype": "f32", "batch_size": 2}
  })");
  return cfg;
}

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

template <typename Real>
void take_steps(FilterVit<Real>& model, AdamW<Real>& opt, size_t n,
                uint64_t seed) {
  auto params = model.params();
  Rng rng(seed);
  auto x = Tensor<Real>::zeros({2, 3, 16, 16});
  std::vector<int> labels = {0, 2};
  for (size_t i = 0; i < n; ++i) {
    fill_uniform(x, rng, 0.0, 1.0);
    Tape<Real> tape;
    TapeScope<Real> scope(tape);
    backward(cross_entropy(model.forward(x, true, nullptr), labels));
    opt.step(params, 1e-3);
    for (auto& p : params) p.tensor.zero_grad();
  }
}

}  // namespace

TEST_CASE("save/load restores weights, outputs, and optimizer bit-for-bit") {
  RunConfig cfg = tiny_run();
  FilterVit<float> model(cfg.model, 31);
  auto params = model.params();
  AdamW<float> opt(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps,
                   cfg.optim.weight_decay, params);
  take_steps(model, opt, 3, 100);

  CheckpointMeta meta;
  meta.config = cfg;
  meta.epoch = 2;
  meta.opt_steps = opt.steps();
  meta.metrics = {{1, 1.5, 0.3, 1.6, 0.25, 5e-4, 2.0},
                  {2, 1.2, 0.5, 1.4, 0.4, 4e-4, 2.1}};
  meta.best_epoch = 2;
  meta.best_val_acc = 0.4;

  auto tensors = params;
  opt.collect_state(params, tensors);
  const std::string path = tmp_path("ck_roundtrip.ckpt");
  write_checkpoint(path, meta, tensors);

  auto loaded = read_checkpoint<float>(path);
  CHECK(loaded.meta.epoch == 2);
  CHECK(loaded.meta.opt_steps == 3);
  CHECK(loaded.meta.best_epoch == 2);
  CHECK(loaded.meta.metrics.size() == 2);
  CHECK(loaded.meta.metrics[1].train_loss == 1.2);
  CHECK(loaded.meta.config.train.seed == cfg.train.seed);
  CHECK(loaded.has_optimizer_state());

  // different seed => different weights until restored
  FilterVit<float> fresh(cfg.model, 77);
  restore_model(fresh, loaded);
  auto fp = fresh.params();
  for (size_t i = 0; i < params.size(); ++i)
    CHECK(fp[i].tensor.data() == params[i].tensor.data());

  auto x = Tensor<float>::zeros({1, 3, 16, 16});
  Rng rng(5);
  fill_uniform(x, rng, 0.0, 1.0);
  CHECK(fresh.forward(x).data() == model.forward(x).data());

  // continuing training from the restored state tracks the original exactly
  AdamW<float> opt2(cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps,
                    cfg.optim.weight_decay, fp);
  restore_optimizer(opt2, loaded, fp);
  CHECK(opt2.steps() == opt.steps());
  take_steps(model, opt, 2, 200);
  take_steps(fresh, opt2, 2, 200);
  auto pa = model.params(), pb = fresh.params();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i].tensor.data() == pb[i].tensor.data());
  std::remove(path.c_str());
}

TEST_CASE("manifest is readable without touching tensor blobs") {
  RunConfig cfg = tiny_run();
  FilterVit<float> model(cfg.model, 1);
  CheckpointMeta meta;
  meta.config = cfg;
  meta.epoch = 4;
  const std::string path = tmp_path("ck_peek.ckpt");
  write_checkpoint(path, meta, model.params());
  CheckpointMeta peeked = peek_checkpoint_meta(path);
  CHECK(peeked.epoch == 4);
  CHECK(peeked.config.model.image_size == 16);
  CHECK(to_json(peeked.config) == to_json(cfg));
  std::remove(path.c_str());
}

TEST_CASE("architecture and dtype mismatches are refused") {
  RunConfig cfg = tiny_run();
  FilterVit<float> model(cfg.model, 1);
  CheckpointMeta meta;
  meta.config = cfg;
  const std::string path = tmp_path("ck_mismatch.ckpt");
  write_checkpoint(path, meta, model.params());

  CHECK_THROWS_AS(read_checkpoint<double>(path), FormatError);

  auto loaded = read_checkpoint<float>(path);
  ModelConfig other = cfg.model;
  other.heads = 1;
  FilterVit<float> wrong(other, 1);
  CHECK_THROWS_AS(restore_model(wrong, loaded), FormatError);

  // dtype disagreement at write time is a programming error
  CheckpointMeta bad = meta;
  bad.config.train.dtype = "f64";
  CHECK_THROWS_AS(write_checkpoint(path, bad, model.params()), ContractError);
  std::remove(path.c_str());
}

TEST_CASE("missing tensors are reported by name") {
  RunConfig cfg = tiny_run();
  FilterVit<float> model(cfg.model, 1);
  CheckpointMeta meta;
  meta.config = cfg;
  auto partial = model.params();
  partial.pop_back();  // drop head.bias
  const std::string path = tmp_path("ck_partial.ckpt");
  write_checkpoint(path, meta, partial);
  auto loaded = read_checkpoint<float>(path);
  FilterVit<float> fresh(cfg.model, 2);
  CHECK_THROWS_WITH_AS(restore_model(fresh, loaded),
                       doctest::Contains("head.bias"), FormatError);
  auto params = model.params();
  AdamW<float> opt(0.9, 0.999, 1e-8, 0.0, params);
  CHECK_THROWS_AS(restore_optimizer(opt, loaded, params), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("corrupt files are rejected") {
  const std::string path = tmp_path("ck_corrupt.ckpt");
  {
    std::ofstream out(path, std::ios::binary);
    out.write("NOPE", 4);
  }
  CHECK_THROWS_AS(peek_checkpoint_meta(path), FormatError);

  RunConfig cfg = tiny_run();
  FilterVit<float> model(cfg.model, 1);
  CheckpointMeta meta;
  meta.config = cfg;
  write_checkpoint(path, meta, model.params());
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 64);
  CHECK_THROWS_AS(read_checkpoint<float>(path), FormatError);
  CHECK_THROWS_AS(peek_checkpoint_meta("/no/such/file.ckpt"), FormatError);
  std::remove(path.c_str());
}
