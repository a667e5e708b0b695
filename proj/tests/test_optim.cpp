#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fvit/optim.hpp"

using namespace fvit;

TEST_CASE("cosine schedule hits both endpoints exactly") {
  CosineSchedule s{5e-4, 1e-5, 120};
  CHECK(cosine_lr(s, 0) == 5e-4);
  CHECK(cosine_lr(s, 120) == 1e-5);
  CHECK(cosine_lr(s, 60) == doctest::Approx(2.55e-4).epsilon(1e-9));

  // monotone non-increasing across the whole period
  double prev = cosine_lr(s, 0);
  for (size_t e = 1; e <= 120; ++e) {
    const double lr = cosine_lr(s, e);
    CHECK(lr <= prev);
    prev = lr;
  }

  CHECK_THROWS_AS(cosine_lr(s, 121), ContractError);
  CHECK_THROWS_AS(cosine_lr(CosineSchedule{1e-3, 1e-5, 0}, 0), ConfigError);
  CHECK_THROWS_AS(cosine_lr(CosineSchedule{1e-5, 1e-3, 10}, 0), ConfigError);
}

TEST_CASE("decay exemption covers norms and positional tables") {
  CHECK(decay_exempt("fa1.encoder.layers.0.ln1.scale"));
  CHECK(decay_exempt("stem_norm.shift"));
  CHECK(decay_exempt("fa2.pos"));
  CHECK_FALSE(decay_exempt("head.weight"));
  CHECK_FALSE(decay_exempt("head.bias"));
  CHECK_FALSE(decay_exempt("fa1.scorer.weight"));
}

template <typename Real>
static std::vector<NamedParam<Real>> make_params(
    std::vector<std::pair<std::string, std::vector<Real>>> init) {
  std::vector<NamedParam<Real>> out;
  for (auto& [name, vals] : init) {
    auto t = Tensor<Real>::from({vals.size()}, vals);
    t.set_requires_grad(true);
    out.push_back({name, t});
  }
  return out;
}

TEST_CASE("zero-gradient step scales decayed weights by exactly 1 - lr*wd") {
  auto params = make_params<double>(
      {{"w.weight", {1.0, -2.5, 0.3}}, {"n.scale", {1.0, 0.7, -0.2}}});
  const std::vector<double> w0 = params[0].tensor.data();
  const std::vector<double> s0 = params[1].tensor.data();
  const double lr = 5e-4, wd = 0.01;
  AdamW<double> opt(0.9, 0.999, 1e-8, wd, params);
  opt.step(params, lr);  // no grads populated anywhere
  for (size_t i = 0; i < 3; ++i) {
    CHECK(params[0].tensor.data()[i] == w0[i] * (1.0 - lr * wd));
    CHECK(params[1].tensor.data()[i] == s0[i]);  // exempt: untouched
  }
  CHECK(opt.steps() == 1);
}

TEST_CASE("zero gradient with zero decay is the identity") {
  auto params = make_params<double>({{"w.weight", {0.5, -1.5}}});
  const auto w0 = params[0].tensor.data();
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0, params);
  opt.step(params, 1e-3);
  opt.step(params, 1e-3);
  CHECK(params[0].tensor.data() == w0);
}

TEST_CASE("single step matches the hand-executed update") {
  auto params = make_params<double>({{"w.weight", {1.0}}});
  params[0].tensor.mutable_grad()[0] = 1.0;
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.01, params);
  opt.step(params, 5e-4);

  // scalar walk of the update rule, written out independently
  const double g = 1.0, lr = 5e-4;
  const double decayed = 1.0 * (1.0 - lr * 0.01);
  const double m = 0.1 * g;                // (1-beta1)*g
  const double v = 0.001 * g * g;          // (1-beta2)*g^2
  const double mhat = m / (1.0 - 0.9);     // t = 1
  const double vhat = v / (1.0 - 0.999);
  const double expect = decayed - lr * (mhat / (std::sqrt(vhat) + 1e-8));
  CHECK(params[0].tensor.data()[0] == doctest::Approx(expect).epsilon(1e-15));
  CHECK(params[0].tensor.data()[0] == doctest::Approx(0.999495).epsilon(1e-9));
}

TEST_CASE("constant gradient drives steps toward -lr * sign(g)") {
  auto params = make_params<double>({{"w.weight", {2.0, -3.0}}});
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0, params);
  const double lr = 1e-3;
  double prev0 = 2.0, prev1 = -3.0;
  for (int t = 0; t < 50; ++t) {
    params[0].tensor.mutable_grad()[0] = 0.5;
    params[0].tensor.mutable_grad()[1] = -0.25;
    opt.step(params, lr);
    const double d0 = prev0 - params[0].tensor.data()[0];
    const double d1 = prev1 - params[0].tensor.data()[1];
    // bias correction makes m-hat = g and v-hat = g^2 for constant g,
    // so every step moves by lr/(1 + eps/|g|), regardless of magnitude
    CHECK(d0 == doctest::Approx(lr).epsilon(1e-7));
    CHECK(d1 == doctest::Approx(-lr).epsilon(1e-7));
    prev0 = params[0].tensor.data()[0];
    prev1 = params[0].tensor.data()[1];
  }
}

template <typename Real>
static void decoupling_trajectories_match() {
  const double wd = 0.01;
  const size_t n = 16, steps = 25;
  Rng init(3);
  auto base = Tensor<Real>::zeros({n});
  fill_normal(base, init, 0.0, 1.0);

  auto run = [&](double internal_wd, bool external_decay) {
    auto params = make_params<Real>({{"w.weight", std::vector<Real>(
                                                      base.data())}});
    AdamW<Real> opt(0.9, 0.999, 1e-8, internal_wd, params);
    Rng grads(77);  // same gradient stream for both runs
    CosineSchedule sched{5e-4, 1e-5, 120};
    std::normal_distribution<double> d(0.0, 1.0);
    for (size_t t = 0; t < steps; ++t) {
      auto& g = params[0].tensor.mutable_grad();
      for (auto& v : g) v = Real(d(grads));
      const double lr = cosine_lr(sched, t);
      if (external_decay) {
        auto& w = params[0].tensor.data();
        for (auto& v : w) v = Real(double(v) * (1.0 - lr * wd));
      }
      opt.step(params, lr);
      params[0].tensor.zero_grad();
    }
    return params[0].tensor.data();
  };

  auto with_wd = run(wd, false);
  auto emulated = run(0.0, true);
  CHECK(with_wd == emulated);  // bitwise
}

TEST_CASE("decay decouples from the adaptive term bit-exactly") {
  decoupling_trajectories_match<double>();
  decoupling_trajectories_match<float>();
}

TEST_CASE("optimizer state restores to a bit-identical trajectory") {
  auto fresh = [] {
    return make_params<double>({{"a.weight", {1.0, 2.0, 3.0, 4.0}},
                                {"b.scale", {1.0, 1.0}}});
  };
  auto grads_at = [](std::vector<NamedParam<double>>& ps, size_t t) {
    for (auto& p : ps) {
      auto& g = p.tensor.mutable_grad();
      for (size_t i = 0; i < g.size(); ++i)
        g[i] = 0.1 * double(t + 1) * double(i + 1);
    }
  };

  auto straight = fresh();
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.01, straight);
  for (size_t t = 0; t < 5; ++t) {
    grads_at(straight, t);
    opt.step(straight, 1e-3);
    for (auto& p : straight) p.tensor.zero_grad();
  }

  auto split = fresh();
  AdamW<double> opt1(0.9, 0.999, 1e-8, 0.01, split);
  for (size_t t = 0; t < 3; ++t) {
    grads_at(split, t);
    opt1.step(split, 1e-3);
    for (auto& p : split) p.tensor.zero_grad();
  }
  std::vector<NamedParam<double>> state;
  opt1.collect_state(split, state);
  REQUIRE(state.size() == 4);
  CHECK(state[0].name == "a.weight.adam_m");
  CHECK(state[1].name == "a.weight.adam_v");

  AdamW<double> opt2(0.9, 0.999, 1e-8, 0.01, split);
  opt2.restore_state(opt1.steps(),
                     {state[0].tensor.data(), state[2].tensor.data()},
                     {state[1].tensor.data(), state[3].tensor.data()});
  for (size_t t = 3; t < 5; ++t) {
    grads_at(split, t);
    opt2.step(split, 1e-3);
    for (auto& p : split) p.tensor.zero_grad();
  }
  CHECK(split[0].tensor.data() == straight[0].tensor.data());
  CHECK(split[1].tensor.data() == straight[1].tensor.data());
}

TEST_CASE("optimizer contract violations") {
  auto params = make_params<double>({{"w.weight", {1.0}}});
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.01, params);
  CHECK_THROWS_AS(opt.step(params, -1.0), ContractError);
  auto extra = make_params<double>({{"w.weight", {1.0}}, {"x.weight", {2.0}}});
  CHECK_THROWS_AS(opt.step(extra, 1e-3), ContractError);
}
