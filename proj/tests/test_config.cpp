#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "fvit/config.hpp"

using namespace fvit;

TEST_CASE("empty object yields the reference defaults") {
  RunConfig cfg = parse_run_config("{}");
  CHECK(cfg.model.image_size == 64);
  CHECK(cfg.model.channels == std::vector<size_t>{16, 24, 48, 64, 96});
  CHECK(cfg.model.variant == "filter");
  CHECK(cfg.model.num_classes == 10);
  CHECK(cfg.optim.lr_max == 5e-4);
  CHECK(cfg.optim.lr_min == 1e-5);
  CHECK(cfg.optim.weight_decay == 0.01);
  CHECK(cfg.optim.t_max == 30);  // resolved to train.epochs
  CHECK(cfg.train.batch_size == 64);
  CHECK(cfg.train.seed == 42);
  CHECK(cfg.train.dtype == "f32");
  CHECK(cfg.data.dataset == "synthetic");
}

TEST_CASE("stage geometry and default token budget") {
  ModelConfig m;  // 64 px
  CHECK(stage_grid(m, 0) == 32);
  CHECK(stage_grid(m, 1) == 16);
  CHECK(stage_grid(m, 2) == 8);
  CHECK(stage_k(m, 0) == 256);  // ceil(1024/4)
  CHECK(stage_k(m, 1) == 64);
  CHECK(stage_k(m, 2) == 16);
  m.k = {100, 0, 7};
  CHECK(stage_k(m, 0) == 100);
  CHECK(stage_k(m, 2) == 7);
}

TEST_CASE("fields parse from nested json") {
  RunConfig cfg = parse_run_config(R"({
    "model": {"image_size": 32, "variant": "dropout", "k": [64, 0, 4],
              "heads": 4, "residual_scatter": true},
    "optim": {"lr_max": 1e-3, "t_max": 200},
    "data": {"dataset": "synthetic", "classes": 2, "train_samples": 10,
             "val_samples": 4, "augment": {"flip_prob": 0.0, "crop": false}},
    "train": {"epochs": 5, "batch_size": 2, "seed": 7, "dtype": "f64"}
  })");
  CHECK(cfg.model.image_size == 32);
  CHECK(cfg.model.variant == "dropout");
  CHECK(cfg.model.residual_scatter);
  CHECK(cfg.model.k == std::vector<size_t>{64, 0, 4});
  CHECK(stage_k(cfg.model, 1) == 16);  // 8*8/4
  CHECK(cfg.optim.lr_max == 1e-3);
  CHECK(cfg.optim.t_max == 200);
  CHECK(cfg.data.augment.flip_prob == 0.0);
  CHECK_FALSE(cfg.data.augment.crop);
  CHECK(cfg.train.seed == 7);
  CHECK(cfg.train.dtype == "f64");
}

TEST_CASE("unknown keys are rejected with their path") {
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"modle": {}})"),
                       doctest::Contains("modle"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_run_config(R"({"model": {"chanels": [1]}})"),
                       doctest::Contains("chanels"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_run_config(R"({"data": {"augment": {"flip": 1}}})"),
      doctest::Contains("data.augment"), ConfigError);
}

TEST_CASE("malformed values are rejected") {
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[1,2]"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"heads": -2}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"heads": "two"}})"),
                  ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"epochs": 1.5}})"),
                  ConfigError);
}

TEST_CASE("validation names the failing field") {
  auto bad = [](const std::string& body) {
    return parse_run_config(body);
  };
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"image_size": 60}})"),
                       doctest::Contains("image_size"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"channels": [16, 24]}})"),
                       doctest::Contains("channels"), ConfigError);
  // k[0] may not exceed the 32x32 grid of a 64 px model
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"k": [1025, 0, 0]}})"),
                       doctest::Contains("k[0]"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"scorer_kernel": 2}})"),
                       doctest::Contains("scorer_kernel"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"variant": "dense"}})"),
                       doctest::Contains("variant"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"model": {"pool_window": 3}})"),
                       doctest::Contains("pool_window"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"optim": {"lr_min": 1.0}})"),
                       doctest::Contains("lr"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"data": {"dataset": "imagenet"}})"),
                       doctest::Contains("dataset"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"data": {"dataset": "cifar10"}})"),
                       doctest::Contains("path"), ConfigError);
  CHECK_THROWS_WITH_AS(bad(R"({"train": {"dtype": "f16"}})"),
                       doctest::Contains("dtype"), ConfigError);
  CHECK_THROWS_WITH_AS(
      bad(R"({"train": {"epochs": 50}, "optim": {"t_max": 10}})"),
      doctest::Contains("t_max"), ConfigError);
  CHECK_THROWS_WITH_AS(
      bad(R"({"data": {"augment": {"mean": [0.5, 0.5]}}})"),
      doctest::Contains("mean"), ConfigError);
}

TEST_CASE("serialized form parses back to an identical config") {
  RunConfig cfg = parse_run_config(R"({
    "model": {"image_size": 16, "k": [3, 9, 1], "variant": "dropout"},
    "data": {"classes": 3, "train_samples": 9, "val_samples": 3},
    "train": {"epochs": 2, "seed": 99}
  })");
  const std::string text = to_json(cfg);
  RunConfig back = parse_run_config(text);
  CHECK(to_json(back) == text);
  CHECK(back.model.k == cfg.model.k);
  CHECK(back.train.seed == cfg.train.seed);
  CHECK(back.optim.t_max == cfg.optim.t_max);
}

TEST_CASE("fingerprint tracks model and dtype only") {
  RunConfig a = parse_run_config("{}");
  const uint64_t base = config_fingerprint(a.model, a.train.dtype);
  CHECK(base == config_fingerprint(a.model, "f32"));
  CHECK(base != config_fingerprint(a.model, "f64"));

  ModelConfig tweaked = a.model;
  tweaked.heads = 4;
  CHECK(base != config_fingerprint(tweaked, "f32"));

  // training hyperparameters are irrelevant to tensor compatibility
  RunConfig b = parse_run_config(R"({"train": {"epochs": 99, "seed": 1}})");
  CHECK(base == config_fingerprint(b.model, b.train.dtype));
}

TEST_CASE("fnv1a64 matches published test vectors") {
  CHECK(fnv1a64("") == 14695981039346656037ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}
