#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fvit/serialize.hpp"
#include "fvit/tensor.hpp"
#include "gradcheck.hpp"

using namespace fvit;

// Brute-force references, written independently of the library kernels.
static std::vector<double> matmul_ref(const std::vector<double>& a,
                                      const std::vector<double>& b, size_t m,
                                      size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

TEST_CASE("construction and basic accessors") {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t.dim(1) == 3);
  CHECK(t.data()[4] == 5.0);

  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1, 2, 3}), DimError);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor<double>::scalar(7.5).item() == 7.5);
  CHECK(Tensor<float>::zeros({3, 3}).data()[8] == 0.0f);
  CHECK(Tensor<float>::ones({2}).data()[1] == 1.0f);
}

TEST_CASE("elementwise ops with equal shapes") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {10, 20, 30, 40});
  CHECK(add(a, b).data() == std::vector<double>{11, 22, 33, 44});
  CHECK(sub(b, a).data() == std::vector<double>{9, 18, 27, 36});
  CHECK(mul(a, b).data() == std::vector<double>{10, 40, 90, 160});
  CHECK(div(b, a).data() == std::vector<double>{10, 10, 10, 10});
  CHECK(mul_scalar(a, 3.0).data() == std::vector<double>{3, 6, 9, 12});
  CHECK(add_scalar(a, -1.0).data() == std::vector<double>{0, 1, 2, 3});
}

TEST_CASE("singleton broadcasting") {
  // (2,1,2) * (1,3,1) -> (2,3,2)
  auto a = Tensor<double>::from({2, 1, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({1, 3, 1}, {10, 100, 1000});
  auto c = mul(a, b);
  CHECK(c.shape() == Shape{2, 3, 2});
  CHECK(c.data() == std::vector<double>{10, 20, 100, 200, 1000, 2000, 30, 40,
                                        300, 400, 3000, 4000});

  // trailing alignment: (2,3) + (3,) adds the row vector to each row
  auto m = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto v = Tensor<double>::from({3}, {10, 20, 30});
  CHECK(add(m, v).data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  CHECK_THROWS_AS(add(m, Tensor<double>::from({4}, {1, 2, 3, 4})), DimError);
  CHECK_THROWS_AS(
      mul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3, 2})),
      DimError);
}

TEST_CASE("matmul matches brute force") {
  Rng rng(7);
  auto a = Tensor<double>::zeros({4, 3});
  auto b = Tensor<double>::zeros({3, 5});
  fill_uniform(a, rng, -1.0, 1.0);
  fill_uniform(b, rng, -1.0, 1.0);
  auto c = matmul(a, b);
  auto ref = matmul_ref(a.data(), b.data(), 4, 3, 5);
  REQUIRE(c.shape() == Shape{4, 5});
  for (size_t i = 0; i < ref.size(); ++i)
    CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  CHECK_THROWS_AS(matmul(a, Tensor<double>::zeros({4, 2})), DimError);
}

TEST_CASE("bmm equals per-batch matmul") {
  Rng rng(11);
  auto a = Tensor<double>::zeros({2, 3, 4});
  auto b = Tensor<double>::zeros({2, 4, 2});
  fill_normal(a, rng, 0.0, 1.0);
  fill_normal(b, rng, 0.0, 1.0);
  auto c = bmm(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 2});
  for (size_t i = 0; i < 2; ++i) {
    std::vector<double> ai(a.data().begin() + i * 12,
                           a.data().begin() + (i + 1) * 12);
    std::vector<double> bi(b.data().begin() + i * 8,
                           b.data().begin() + (i + 1) * 8);
    auto ref = matmul_ref(ai, bi, 3, 4, 2);
    for (size_t j = 0; j < ref.size(); ++j)
      CHECK(c.data()[i * 6 + j] == doctest::Approx(ref[j]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(bmm(a, Tensor<double>::zeros({3, 4, 2})), DimError);
}

TEST_CASE("softmax frozen values and normalization") {
  auto x = Tensor<double>::from({3}, {1, 2, 3});
  auto p = softmax(x, 0);
  CHECK(p.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(p.data()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-12));
  CHECK(p.data()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-12));
  CHECK(p.data()[0] + p.data()[1] + p.data()[2] ==
        doctest::Approx(1.0).epsilon(1e-14));

  // large inputs stay finite thanks to max subtraction
  auto big = softmax(Tensor<double>::from({2}, {1000.0, 1001.0}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[1] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));

  // axis handling: rows of a matrix, negative axis
  auto m = Tensor<double>::from({2, 3}, {1, 2, 3, 3, 2, 1});
  auto pm = softmax(m, -1);
  CHECK(pm.data()[0] == doctest::Approx(0.09003057317038046));
  CHECK(pm.data()[3] == doctest::Approx(0.66524095577482190));
  CHECK_THROWS_AS(softmax(m, 2), DimError);
}

TEST_CASE("permute and reshape") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = permute(x, {1, 0});
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});

  auto back = permute(t, {1, 0});
  CHECK(back.data() == x.data());

  auto y = Tensor<double>::from({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  auto z = permute(y, {2, 0, 1});
  CHECK(z.shape() == Shape{2, 2, 2});
  CHECK(z.data() == std::vector<double>{0, 2, 4, 6, 1, 3, 5, 7});

  auto r = reshape(x, {3, 2});
  CHECK(r.data() == x.data());
  CHECK_THROWS_AS(reshape(x, {4, 2}), DimError);
  CHECK_THROWS_AS(permute(x, {0}), DimError);
}

TEST_CASE("gather and scatter") {
  // one sample, two channels, 2x2 map; positions flattened as i*W+j
  auto x = Tensor<double>::from({1, 2, 2, 2}, {0, 1, 2, 3, 10, 11, 12, 13});
  SelectionIndex idx = {{3, 0}};
  auto tok = gather(x, idx);
  REQUIRE(tok.shape() == Shape{1, 2, 2});
  CHECK(tok.data() == std::vector<double>{3, 13, 0, 10});

  auto bumped = add_scalar(tok, 100.0);
  auto out = scatter(x, bumped, idx);
  CHECK(out.shape() == x.shape());
  // replaced positions carry token values, others keep the base
  CHECK(out.data() == std::vector<double>{100, 1, 2, 103, 110, 11, 12, 113});

  CHECK_THROWS_AS(gather(x, SelectionIndex{{0, 4}}), IndexError);
  CHECK_THROWS_AS(gather(x, SelectionIndex{{1, 1}}), IndexError);
  CHECK_THROWS_AS(gather(x, SelectionIndex{{0}, {1}}), IndexError);
  CHECK_THROWS_AS(gather(Tensor<double>::zeros({2, 2}), idx), DimError);
  CHECK_THROWS_AS(scatter(x, tok, SelectionIndex{{3, 0}, {1, 2}}), IndexError);
  CHECK_THROWS_AS(scatter(x, Tensor<double>::zeros({1, 3, 2}), idx), DimError);
}

TEST_CASE("cross entropy values") {
  // uniform logits: loss is ln(num_classes), independent of batch
  auto z = Tensor<double>::zeros({2, 10});
  auto loss = cross_entropy(z, std::vector<int>{0, 7});
  CHECK(loss.item() == doctest::Approx(2.302585092994046).epsilon(1e-12));

  // single row, frozen: -log softmax([1,2,3])[2]
  auto z2 = Tensor<double>::from({1, 3}, {1, 2, 3});
  auto l2 = cross_entropy(z2, std::vector<int>{2});
  CHECK(l2.item() == doctest::Approx(0.4076059644443804).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(z2, std::vector<int>{3}), ContractError);
  CHECK_THROWS_AS(cross_entropy(z2, std::vector<int>{0, 1}), ContractError);
  CHECK_THROWS_AS(cross_entropy(Tensor<double>::zeros({3}), {0}), DimError);
}

TEST_CASE("sum and mean") {
  auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  CHECK(sum(x).item() == 10.0);
  CHECK(mean(x).item() == 2.5);
}

TEST_CASE("tape lifecycle and error contracts") {
  Tape<double> tape;
  CHECK(Tape<double>::current() == nullptr);
  {
    TapeScope<double> scope(tape);
    CHECK(Tape<double>::current() == &tape);
    auto a = Tensor<double>::from({2}, {1, 2}).set_requires_grad(true);
    auto b = mul(a, a);
    CHECK(b.requires_grad());
    CHECK(tape.size() == 1);
    CHECK_THROWS_AS(tape.backward(b), ContractError);  // non-scalar loss
    auto loss = sum(b);
    tape.backward(loss);
    CHECK(a.grad() == std::vector<double>{2, 4});
  }
  CHECK(Tape<double>::current() == nullptr);
  tape.clear();
  CHECK(tape.size() == 0);
  CHECK_THROWS_AS(tape.backward(Tensor<double>::scalar(0.0)), ContractError);
  CHECK_THROWS_AS(backward(Tensor<double>::scalar(0.0)), ContractError);

  // no active tape: ops run forward-only and record nothing
  auto a = Tensor<double>::from({2}, {1, 2}).set_requires_grad(true);
  auto c = mul(a, a);
  CHECK_FALSE(c.requires_grad());
  CHECK(tape.size() == 0);
}

TEST_CASE("gradient accumulates across tensor reuse") {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto a = Tensor<double>::from({3}, {1, 2, 3}).set_requires_grad(true);
  auto loss = sum(add(mul(a, a), a));  // d/da (a^2 + a) = 2a + 1
  tape.backward(loss);
  CHECK(a.grad() == std::vector<double>{3, 5, 7});
}

TEST_CASE("detach blocks gradient flow") {
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto a = Tensor<double>::from({2}, {3, 4}).set_requires_grad(true);
  auto loss = sum(mul(a.detach(), a));
  tape.backward(loss);
  CHECK(a.grad() == std::vector<double>{3, 4});
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Rng rng(123);
    auto a = Tensor<double>::zeros({4, 4});
    fill_normal(a, rng, 0.0, 1.0);
    a.set_requires_grad(true);
    auto loss = sum(mul(softmax(matmul(a, a), -1), a));
    tape.backward(loss);
    return a.grad();
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(g1 == g2);  // bitwise equal
}

TEST_CASE("gradcheck: elementwise and broadcast") {
  Rng rng(31);
  auto a = Tensor<double>::zeros({2, 1, 3});
  auto b = Tensor<double>::zeros({1, 4, 1});
  fill_uniform(a, rng, -1.0, 1.0);
  fill_uniform(b, rng, 0.5, 1.5);  // positive: used as divisor
  auto f = [&] {
    auto t = add(mul(a, b), div(a, b));
    return sum(mul(sigmoid(t), t));
  };
  auto r = gradcheck(f, {&a, &b});
  INFO(r.detail);
  CHECK(r.ok);
}

TEST_CASE("gradcheck: unary functions") {
  // relu6 coordinates sit away from the kinks at 0 and 6
  auto x = Tensor<double>::from({6}, {-2.0, -0.5, 0.5, 3.0, 5.5, 7.0});
  auto fx = [&] { return sum(mul(relu6(x), x)); };
  auto r1 = gradcheck(fx, {&x});
  INFO(r1.detail);
  CHECK(r1.ok);

  auto y = Tensor<double>::from({4}, {0.3, 1.1, 2.7, 0.05});
  auto fy = [&] { return sum(add(mul(log(y), y), sqrt(y))); };
  auto r2 = gradcheck(fy, {&y});
  INFO(r2.detail);
  CHECK(r2.ok);

  Rng rng(5);
  auto z = Tensor<double>::zeros({5});
  fill_normal(z, rng, 0.0, 1.5);
  auto fz = [&] { return sum(add(gelu(z), exp(mul_scalar(z, 0.5)))); };
  auto r3 = gradcheck(fz, {&z});
  INFO(r3.detail);
  CHECK(r3.ok);
}

TEST_CASE("gradcheck: matmul and bmm") {
  Rng rng(17);
  auto a = Tensor<double>::zeros({3, 4});
  auto b = Tensor<double>::zeros({4, 2});
  fill_normal(a, rng, 0.0, 1.0);
  fill_normal(b, rng, 0.0, 1.0);
  auto f = [&] { return sum(sigmoid(matmul(a, b))); };
  auto r = gradcheck(f, {&a, &b});
  INFO(r.detail);
  CHECK(r.ok);

  auto p = Tensor<double>::zeros({2, 2, 3});
  auto q = Tensor<double>::zeros({2, 3, 2});
  fill_normal(p, rng, 0.0, 1.0);
  fill_normal(q, rng, 0.0, 1.0);
  auto g = [&] { return sum(mul(bmm(p, q), bmm(p, q))); };
  auto r2 = gradcheck(g, {&p, &q});
  INFO(r2.detail);
  CHECK(r2.ok);
}

TEST_CASE("gradcheck: softmax, permute, reshape") {
  Rng rng(23);
  auto x = Tensor<double>::zeros({2, 3, 4});
  fill_normal(x, rng, 0.0, 1.0);
  auto w = Tensor<double>::zeros({4, 3, 2});
  fill_normal(w, rng, 0.0, 1.0);
  auto f = [&] {
    auto s = softmax(x, 1);
    auto t = permute(s, {2, 1, 0});
    return sum(mul(reshape(mul(t, w), {24}), reshape(x, {24})));
  };
  auto r = gradcheck(f, {&x, &w});
  INFO(r.detail);
  CHECK(r.ok);
}

TEST_CASE("gradcheck: gather and scatter") {
  Rng rng(41);
  auto x = Tensor<double>::zeros({2, 3, 2, 2});
  fill_normal(x, rng, 0.0, 1.0);
  auto w = Tensor<double>::zeros({2, 2, 3});
  fill_normal(w, rng, 0.0, 1.0);
  SelectionIndex idx = {{1, 3}, {2, 0}};
  auto f = [&] {
    auto tok = gather(x, idx);
    auto mixed = mul(sigmoid(tok), w);
    return sum(mul(scatter(x, mixed, idx), x));
  };
  auto r = gradcheck(f, {&x, &w});
  INFO(r.detail);
  CHECK(r.ok);
}

TEST_CASE("gradcheck: cross entropy") {
  Rng rng(53);
  auto z = Tensor<double>::zeros({3, 5});
  fill_normal(z, rng, 0.0, 2.0);
  std::vector<int> labels = {4, 0, 2};
  auto f = [&] { return cross_entropy(z, labels); };
  auto r = gradcheck(f, {&z});
  INFO(r.detail);
  CHECK(r.ok);
}

TEST_CASE("serialization roundtrip") {
  Rng rng(61);
  auto x = Tensor<double>::zeros({2, 3, 4});
  fill_normal(x, rng, 0.0, 1.0);
  std::stringstream ss;
  write_tensor(ss, x);
  auto y = read_tensor<double>(ss);
  CHECK(y.shape() == x.shape());
  CHECK(y.data() == x.data());  // bit exact

  auto f = Tensor<float>::from({3}, {1.5f, -2.25f, 0.125f});
  std::stringstream sf;
  write_tensor(sf, f);
  auto g = read_tensor<float>(sf);
  CHECK(g.data() == f.data());

  // dtype tag mismatch
  std::stringstream sm;
  write_tensor(sm, x);
  CHECK_THROWS_AS(read_tensor<float>(sm), FormatError);

  // corrupted magic
  std::stringstream sb("GARBAGE.....");
  CHECK_THROWS_AS(read_tensor<double>(sb), FormatError);

  // truncated payload
  std::stringstream st;
  write_tensor(st, x);
  std::string bytes = st.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(read_tensor<double>(cut), FormatError);
}

TEST_CASE("random fills and finiteness") {
  Rng rng(71);
  auto t = Tensor<double>::zeros({1000});
  fill_trunc_normal(t, rng, 0.02);
  double mx = 0.0;
  for (double v : t.data()) mx = std::max(mx, std::abs(v));
  CHECK(mx <= 0.04);  // clipped at two standard deviations
  CHECK(all_finite(t));

  auto bad = Tensor<double>::from({2}, {1.0, std::nan("")});
  CHECK_FALSE(all_finite(bad));

  // same seed, same stream
  Rng r1(9), r2(9);
  auto a = Tensor<double>::zeros({64});
  auto b = Tensor<double>::zeros({64});
  fill_normal(a, r1, 0.0, 1.0);
  fill_normal(b, r2, 0.0, 1.0);
  CHECK(a.data() == b.data());

  // seed mixing separates streams
  CHECK(mix_seed(42, 0) != mix_seed(42, 1));
  CHECK(mix_seed(42, 0) != mix_seed(43, 0));
  CHECK(mix_seed(42, 7) == mix_seed(42, 7));
}
