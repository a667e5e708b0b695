#pragma once

// Latency and complexity comparison of the attention variants over a grid of
// resolutions, channel widths, and token budgets. Analytic columns come from
// the MAC model and never change between machines; measured columns are
// medians over repeated forward passes on whatever this process runs on.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "fvit/filter_attention.hpp"
#include "fvit/flops.hpp"

namespace fvit {

struct BenchGrid {
  std::vector<size_t> resolutions = {8, 16};
  std::vector<size_t> channels = {16};
  std::vector<size_t> k;                     // absolute token budgets
  std::vector<double> k_fractions = {0.25};  // resolved per resolution
  std::vector<std::string> variants = {"dense", "filtered", "random", "pooled"};
  size_t pool_window = 2;
  size_t depth = 2;
  size_t heads = 2;
  size_t mlp_ratio = 2;
  size_t scorer_kernel = 3;
  size_t reps = 30;
  size_t warmup = 5;
  size_t batch = 1;
  uint64_t seed = 1;
};

struct BenchRow {
  size_t res = 0;
  size_t channels = 0;
  std::string variant;  // dense | filtered | random | pooled
  size_t k = 0;         // tokens entering attention
  uint64_t macs = 0;    // analytic, per sample
  double median_ms = 0;
  double speedup_vs_dense = 0;
};

struct BenchReport {
  size_t reps = 30;
  size_t warmup = 5;
  size_t batch = 1;
  std::string element;  // f32 | f64
  std::vector<BenchRow> rows;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median: no samples");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline std::vector<size_t> grid_sizes(const nlohmann::json& v,
                                      const std::string& key) {
  if (!v.is_array() || v.empty())
    throw ConfigError("bench grid: " + key + " must be a non-empty array");
  std::vector<size_t> out;
  for (const auto& e : v) {
    if (!e.is_number_unsigned() || e.get<uint64_t>() == 0)
      throw ConfigError("bench grid: " + key +
                        " entries must be positive integers");
    out.push_back(e.get<size_t>());
  }
  return out;
}

inline size_t grid_size(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_unsigned() || v.get<uint64_t>() == 0)
    throw ConfigError("bench grid: " + key + " must be a positive integer");
  return v.get<size_t>();
}

}  // namespace detail

inline BenchGrid parse_bench_grid(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("bench grid: expected an object");
  BenchGrid g;
  bool budgets_given = false, fractions_given = false;
  for (const auto& [key, val] : j.items()) {
    if (key == "resolutions") {
      g.resolutions = detail::grid_sizes(val, key);
    } else if (key == "channels") {
      g.channels = detail::grid_sizes(val, key);
    } else if (key == "k") {
      g.k = detail::grid_sizes(val, key);
      budgets_given = true;
    } else if (key == "k_fractions") {
      if (!val.is_array() || val.empty())
        throw ConfigError("bench grid: k_fractions must be a non-empty array");
      g.k_fractions.clear();
      for (const auto& e : val) {
        if (!e.is_number() || e.get<double>() <= 0.0 || e.get<double>() > 1.0)
          throw ConfigError("bench grid: k_fractions entries must be in (0,1]");
        g.k_fractions.push_back(e.get<double>());
      }
      fractions_given = true;
    } else if (key == "variants") {
      if (!val.is_array() || val.empty())
        throw ConfigError("bench grid: variants must be a non-empty array");
      g.variants.clear();
      for (const auto& e : val) {
        const std::string name = e.is_string() ? e.get<std::string>() : "";
        if (name != "dense" && name != "filtered" && name != "random" &&
            name != "pooled")
          throw ConfigError("bench grid: unknown variant '" + name + "'");
        g.variants.push_back(name);
      }
    } else if (key == "pool_window") {
      g.pool_window = detail::grid_size(val, key);
    } else if (key == "depth") {
      g.depth = detail::grid_size(val, key);
    } else if (key == "heads") {
      g.heads = detail::grid_size(val, key);
    } else if (key == "mlp_ratio") {
      g.mlp_ratio = detail::grid_size(val, key);
    } else if (key == "scorer_kernel") {
      g.scorer_kernel = detail::grid_size(val, key);
    } else if (key == "reps") {
      g.reps = detail::grid_size(val, key);
    } else if (key == "warmup") {
      g.warmup = detail::grid_size(val, key);
    } else if (key == "batch") {
      g.batch = detail::grid_size(val, key);
    } else if (key == "seed") {
      if (!val.is_number_unsigned())
        throw ConfigError("bench grid: seed must be a non-negative integer");
      g.seed = val.get<uint64_t>();
    } else {
      throw ConfigError("bench grid: unknown key '" + key + "'");
    }
  }
  if (budgets_given && !fractions_given) g.k_fractions.clear();
  if (g.reps < 30)
    throw ConfigError("bench grid: medians need at least 30 repetitions");
  if (g.warmup < 5)
    throw ConfigError("bench grid: at least 5 warmup runs required");
  if (g.scorer_kernel % 2 == 0)
    throw ConfigError("bench grid: scorer_kernel must be odd");
  for (size_t ch : g.channels)
    if (ch % g.heads != 0)
      throw ConfigError("bench grid: " + std::to_string(g.heads) +
                        " heads do not divide " + std::to_string(ch) +
                        " channels");
  for (const auto& v : g.variants)
    if (v == "pooled")
      for (size_t res : g.resolutions)
        if (res % g.pool_window != 0)
          throw ConfigError("bench grid: pool window " +
                            std::to_string(g.pool_window) + " does not tile " +
                            std::to_string(res) + "x" + std::to_string(res));
  return g;
}

inline BenchGrid parse_bench_grid(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("bench grid: invalid JSON");
  return parse_bench_grid(j);
}

// Token budgets for one resolution: explicit values that fit, plus resolved
// fractions, deduplicated and sorted. Budgets above H*W are dropped rather
// than clamped so a shared grid can span resolutions.
inline std::vector<size_t> bench_budgets(const BenchGrid& g, size_t res) {
  const size_t hw = res * res;
  std::vector<size_t> out;
  for (size_t k : g.k)
    if (k <= hw) out.push_back(k);
  for (double f : g.k_fractions)
    out.push_back(std::min(hw, std::max<size_t>(1, size_t(std::ceil(f * double(hw))))));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

template <typename Real>
BenchReport run_bench(const BenchGrid& g) {
  BenchReport rep;
  rep.reps = g.reps;
  rep.warmup = g.warmup;
  rep.batch = g.batch;
  rep.element = sizeof(Real) == 4 ? "f32" : "f64";

  Rng rng(g.seed);
  volatile double sink = 0;
  auto clock_ms = [&](auto&& fn) {
    for (size_t i = 0; i < g.warmup; ++i) sink = sink + double(fn());
    std::vector<double> samples;
    samples.reserve(g.reps);
    for (size_t i = 0; i < g.reps; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      sink = sink + double(fn());
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return median(samples);
  };

  for (size_t res : g.resolutions) {
    for (size_t ch : g.channels) {
      const size_t hw = res * res;
      auto x = Tensor<Real>::zeros({g.batch, ch, res, res});
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& v : x.data()) v = Real(u(rng));

      // the dense baseline anchors every speedup column, so it is always
      // measured even when its row is not requested
      TransformerEncoder<Real> dense(rng, g.depth, ch, g.heads, g.mlp_ratio);
      auto tokens =
          permute(reshape(x, {g.batch, ch, hw}), {0, 2, 1});
      const double dense_ms =
          clock_ms([&] { return dense.forward(tokens).ptr()[0]; });

      const auto budgets = bench_budgets(g, res);
      for (const auto& variant : g.variants) {
        if (variant == "dense") {
          rep.rows.push_back({res, ch, "dense", hw,
                              dense_block_macs(ch, res, res, g.depth,
                                               g.mlp_ratio),
                              dense_ms, 1.0});
        } else if (variant == "filtered" || variant == "random") {
          for (size_t k : budgets) {
            const auto mode = variant == "filtered" ? SelectionMode::topk
                                                    : SelectionMode::random;
            FilterAttentionBlock<Real> block(rng, ch, res, res, k,
                                             g.scorer_kernel, g.depth, g.heads,
                                             g.mlp_ratio, mode, false);
            Rng sel_rng(g.seed + 0x5EED);
            const bool training = variant == "random";
            const double ms = clock_ms([&] {
              return block.forward(x, training, &sel_rng).ptr()[0];
            });
            rep.rows.push_back({res, ch, variant, k,
                                filter_block_macs(ch, res, res, k,
                                                  g.scorer_kernel, g.depth,
                                                  g.mlp_ratio),
                                ms, dense_ms / ms});
          }
        } else {  // pooled
          PooledAttentionBlock<Real> block(rng, ch, res, res, g.pool_window,
                                           g.depth, g.heads, g.mlp_ratio);
          const double ms = clock_ms([&] { return block.forward(x).ptr()[0]; });
          const size_t tokens_pooled = (res / g.pool_window) * (res / g.pool_window);
          rep.rows.push_back({res, ch, "pooled", tokens_pooled,
                              pooled_block_macs(ch, res, res, g.pool_window,
                                                g.depth, g.mlp_ratio),
                              ms, dense_ms / ms});
        }
      }
    }
  }
  return rep;
}

inline std::string bench_csv(const BenchReport& r) {
  std::ostringstream out;
  out << "res,channels,variant,K,macs,median_ms,speedup_vs_dense\n";
  out << std::setprecision(6);
  for (const auto& row : r.rows)
    out << row.res << ',' << row.channels << ',' << row.variant << ','
        << row.k << ',' << row.macs << ',' << row.median_ms << ','
        << row.speedup_vs_dense << '\n';
  return out.str();
}

inline std::string bench_table(const BenchReport& r) {
  std::ostringstream out;
  out << "reps=" << r.reps << " warmup=" << r.warmup << " batch=" << r.batch
      << " element=" << r.element << '\n';
  out << std::left << std::setw(5) << "res" << std::setw(9) << "chan"
      << std::setw(10) << "variant" << std::right << std::setw(6) << "K"
      << std::setw(12) << "macs" << std::setw(12) << "median_ms"
      << std::setw(10) << "speedup" << std::setw(10) << "fps" << '\n';
  out << std::fixed;
  for (const auto& row : r.rows) {
    out << std::left << std::setw(5) << row.res << std::setw(9) << row.channels
        << std::setw(10) << row.variant << std::right << std::setw(6) << row.k
        << std::setw(12) << row.macs << std::setprecision(4) << std::setw(12)
        << row.median_ms << std::setprecision(2) << std::setw(10)
        << row.speedup_vs_dense << std::setprecision(1) << std::setw(10)
        << (row.median_ms > 0 ? 1000.0 / row.median_ms : 0.0) << '\n';
  }
  return out.str();
}

}  // namespace fvit
