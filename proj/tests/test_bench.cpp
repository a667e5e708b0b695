#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "fvit/bench.hpp"

using namespace fvit;

TEST_CASE("median of samples") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK(median({7}) == 7.0);
  CHECK(median({2, 2, 2, 9}) == 2.0);
  CHECK_THROWS_AS(median({}), ContractError);
}

TEST_CASE("grid parsing") {
  auto g = parse_bench_grid(std::string("{}"));
  CHECK(g.resolutions == std::vector<size_t>({8, 16}));
  CHECK(g.channels == std::vector<size_t>({16}));
  CHECK(g.k.empty());
  CHECK(g.k_fractions == std::vector<double>({0.25}));
  CHECK(g.variants.size() == 4);
  CHECK(g.reps == 30);
  CHECK(g.warmup == 5);

  // explicit budgets displace the default fraction
  auto gk = parse_bench_grid(std::string(R"({"k": [4, 9]})"));
  CHECK(gk.k == std::vector<size_t>({4, 9}));
  CHECK(gk.k_fractions.empty());

  // both can be given together
  auto gb =
      parse_bench_grid(std::string(R"({"k": [4], "k_fractions": [0.5]})"));
  CHECK(gb.k == std::vector<size_t>({4}));
  CHECK(gb.k_fractions == std::vector<double>({0.5}));

  CHECK_THROWS_WITH_AS(parse_bench_grid(std::string(R"({"reits": [8]})")),
                       doctest::Contains("reits"), ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string("not json")), ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"resolutions": []})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"resolutions": [0]})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"k_fractions": [1.5]})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"k_fractions": [0.0]})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"variants": ["sparse"]})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"scorer_kernel": 2})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"reps": 10})")),
                  ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(R"({"warmup": 2})")),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_bench_grid(std::string(R"({"channels": [6], "heads": 4})")),
      ConfigError);
  CHECK_THROWS_AS(parse_bench_grid(std::string(
                      R"({"resolutions": [9], "pool_window": 2})")),
                  ConfigError);
}

TEST_CASE("budget resolution per resolution") {
  BenchGrid g;
  g.k_fractions = {0.25};
  CHECK(bench_budgets(g, 4) == std::vector<size_t>({4}));

  g.k = {1, 16, 300};
  g.k_fractions.clear();
  CHECK(bench_budgets(g, 4) == std::vector<size_t>({1, 16}));  // 300 dropped

  g.k = {2};
  g.k_fractions = {0.5};
  CHECK(bench_budgets(g, 4) == std::vector<size_t>({2, 8}));

  g.k = {4};
  g.k_fractions = {0.25};
  CHECK(bench_budgets(g, 4) == std::vector<size_t>({4}));  // deduplicated
}

namespace {

BenchGrid tiny_grid() {
  BenchGrid g;
  g.resolutions = {4};
  g.channels = {4};
  g.k_fractions = {0.25, 1.0};
  g.depth = 1;
  g.heads = 2;
  g.pool_window = 2;
  return g;
}

}  // namespace

TEST_CASE("analytic columns are exact and machine-independent") {
  auto rep = run_bench<float>(tiny_grid());
  CHECK(rep.element == "f32");
  CHECK(rep.reps == 30);

  // dense, filtered at K=4 and 16, random at both, pooled
  REQUIRE(rep.rows.size() == 6);
  const auto& dense = rep.rows[0];
  CHECK(dense.variant == "dense");
  CHECK(dense.k == 16);
  CHECK(dense.macs == dense_block_macs(4, 4, 4, 1, 2));
  CHECK(dense.speedup_vs_dense == 1.0);

  for (const auto& row : rep.rows) {
    CHECK(row.median_ms > 0.0);
    CHECK(row.speedup_vs_dense > 0.0);
  }

  // a full-budget filtered block pays dense attention plus the scorer conv
  const auto& full = rep.rows[2];
  CHECK(full.variant == "filtered");
  CHECK(full.k == 16);
  CHECK(full.macs == dense.macs + conv2d_macs(4, 1, 3, 4, 4));

  // filtered and random cost the same arithmetic at equal K
  CHECK(rep.rows[1].variant == "filtered");
  CHECK(rep.rows[3].variant == "random");
  CHECK(rep.rows[1].k == rep.rows[3].k);
  CHECK(rep.rows[1].macs == rep.rows[3].macs);

  // pooled row counts its reduced token set
  const auto& pooled = rep.rows[5];
  CHECK(pooled.variant == "pooled");
  CHECK(pooled.k == 4);
  CHECK(pooled.macs == pooled_block_macs(4, 4, 4, 2, 1, 2));

  // analytic columns reproduce exactly on a second run
  auto again = run_bench<float>(tiny_grid());
  REQUIRE(again.rows.size() == rep.rows.size());
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    CHECK(again.rows[i].res == rep.rows[i].res);
    CHECK(again.rows[i].channels == rep.rows[i].channels);
    CHECK(again.rows[i].variant == rep.rows[i].variant);
    CHECK(again.rows[i].k == rep.rows[i].k);
    CHECK(again.rows[i].macs == rep.rows[i].macs);
  }
}

TEST_CASE("filtered cost grows with K") {
  // analytic count is strictly monotone
  uint64_t prev = 0;
  for (size_t k = 1; k <= 64; ++k) {
    const uint64_t macs = filter_block_macs(8, 8, 8, k, 3, 2, 2);
    CHECK(macs > prev);
    prev = macs;
  }
  CHECK(filter_block_macs(8, 8, 8, 64, 3, 2, 2) ==
        dense_block_macs(8, 8, 8, 2, 2) + conv2d_macs(8, 1, 3, 8, 8));

  // measured medians follow the trend, allowing one noisy inversion
  BenchGrid g;
  g.resolutions = {8};
  g.channels = {8};
  g.k = {4, 16, 64};
  g.variants = {"filtered"};
  g.depth = 1;
  auto rep = run_bench<float>(g);
  REQUIRE(rep.rows.size() == 3);
  size_t inversions = 0;
  for (size_t i = 1; i < rep.rows.size(); ++i)
    if (rep.rows[i].median_ms < rep.rows[i - 1].median_ms) ++inversions;
  CHECK(inversions <= 1);
}

TEST_CASE("report serialization") {
  BenchReport rep;
  rep.rows.push_back({8, 16, "dense", 64, 1234, 0.5, 1.0});
  rep.rows.push_back({8, 16, "filtered", 16, 345, 0.125, 4.0});

  const std::string csv = bench_csv(rep);
  std::istringstream lines(csv);
  std::string line;
  REQUIRE(std::getline(lines, line));
  CHECK(line == "res,channels,variant,K,macs,median_ms,speedup_vs_dense");
  REQUIRE(std::getline(lines, line));
  CHECK(line == "8,16,dense,64,1234,0.5,1");
  REQUIRE(std::getline(lines, line));
  CHECK(line == "8,16,filtered,16,345,0.125,4");
  CHECK(!std::getline(lines, line));

  const std::string table = bench_table(rep);
  CHECK(table.find("reps=30 warmup=5 batch=1") != std::string::npos);
  CHECK(table.find("fps") != std::string::npos);
  CHECK(table.find("filtered") != std::string::npos);
  CHECK(table.find("8000.0") != std::string::npos);  // 1000 / 0.125
}
