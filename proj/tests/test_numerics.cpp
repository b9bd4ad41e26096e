#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "sdcot/params.hpp"
#include "sdcot/rng.hpp"
#include "sdcot/tensor.hpp"

using namespace sdcot;

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("rng streams are counter-pure and label-independent") {
  RngStream a(42, "data");
  RngStream b(42, "data");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(42, "init");
  RngStream d(42, "data");
  bool all_equal = true;
  for (int i = 0; i < 32; ++i) {
    if (c.next_u64() != d.next_u64()) all_equal = false;
  }
  CHECK_FALSE(all_equal);

  // draws stay in range
  RngStream e(7, "x");
  for (int i = 0; i < 1000; ++i) {
    const double u = e.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("matmul identity and hand cases") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor v = Tensor::from_values({2, 1}, {3, 4});
  Tensor out = matmul(eye, v);
  CHECK(out.values() == std::vector<double>{3, 4});

  Tensor row = Tensor::from_values({1, 2}, {1, 2});
  CHECK(matmul(row, v).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  try {
    matmul(a, b);
    FAIL("expected dimension error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,2]") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches finite differences") {
  RngStream rng(11, "matmul");
  ParamStore store;
  {
    std::vector<double> av(12), bv(6);
    for (auto& x : av) x = rng.uniform(-1, 1);
    for (auto& x : bv) x = rng.uniform(-1, 1);
    store.create("a", {4, 3}, av);
    store.create("b", {3, 2}, bv);
  }
  auto fn = [](ParamStore& p) { return sum(matmul(p.at("a"), p.at("b"))); };
  CHECK(grad_check(fn, store, 1e-5) <= 1e-6);
}

TEST_CASE("softmax matches a higher-precision oracle") {
  Tensor s = softmax(Tensor::from_values({2}, {0, 0}), 0);
  CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor big = softmax(Tensor::from_values({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.values()[0]));
  CHECK(big.values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big.values()[1] == doctest::Approx(0.0).epsilon(1e-12));

  // independent long double evaluation
  const long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
  const long double z = e1 + e2 + e3;
  Tensor t = softmax(Tensor::from_values({3}, {1, 2, 3}), 0);
  CHECK(std::fabs(t.values()[0] - static_cast<double>(e1 / z)) <= 1e-12);
  CHECK(std::fabs(t.values()[1] - static_cast<double>(e2 / z)) <= 1e-12);
  CHECK(std::fabs(t.values()[2] - static_cast<double>(e3 / z)) <= 1e-12);
}

TEST_CASE("softmax rows sum to one and are permutation-equivariant") {
  RngStream rng(3, "softmax");
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5}, rng);
    Tensor s = softmax(x, 0);
    double total = 0;
    for (double v : s.values()) total += v;
    CHECK(std::fabs(total - 1.0) <= 1e-12);

    // permute inputs, outputs permute identically
    std::vector<double> perm_in(5), perm_expected(5);
    const int perm[5] = {3, 0, 4, 1, 2};
    for (int i = 0; i < 5; ++i) {
      perm_in[i] = x.values()[perm[i]];
      perm_expected[i] = s.values()[perm[i]];
    }
    Tensor sp = softmax(Tensor::from_values({5}, perm_in), 0);
    for (int i = 0; i < 5; ++i) CHECK(std::fabs(sp.values()[i] - perm_expected[i]) <= 1e-12);
  }
}

TEST_CASE("softmax over a chosen axis of a matrix") {
  Tensor x = Tensor::from_values({2, 2}, {0, 0, 1, 1});
  Tensor rows = softmax(x, 1);
  CHECK(rows.at({0, 0}) == doctest::Approx(0.5));
  Tensor cols = softmax(x, 0);
  const double lo = 1.0 / (1.0 + std::exp(1.0));
  CHECK(cols.at({0, 0}) == doctest::Approx(lo).epsilon(1e-14));
  CHECK_THROWS_AS(softmax(x, 2), std::invalid_argument);
}

TEST_CASE("cross entropy hand values and gradient") {
  CHECK(cross_entropy(Tensor::from_values({2}, {0, 0}), 0).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));

  // oracle: -log softmax([10,-10])[0] = log1p(exp(-20))
  const double expected = std::log1p(std::exp(-20.0));
  CHECK(cross_entropy(Tensor::from_values({2}, {10, -10}), 0).item() ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(2.0611536181902037e-9).epsilon(1e-6));

  Tensor logits = Tensor::from_values({2}, {1, 2}, true);
  cross_entropy(logits, 1).backward();
  const double p0 = 1.0 / (1.0 + std::exp(1.0));  // softmax([1,2])[0]
  CHECK(logits.grad()[0] == doctest::Approx(p0).epsilon(1e-12));
  CHECK(logits.grad()[1] == doctest::Approx(-p0).epsilon(1e-12));
  CHECK(logits.grad()[0] == doctest::Approx(0.2689414).epsilon(1e-6));

  CHECK_THROWS_AS(cross_entropy(Tensor::from_values({2}, {0, 0}), 2), std::out_of_range);
}

TEST_CASE("huber branches") {
  Tensor p = Tensor::from_values({3}, {1, 2, 3});
  CHECK(huber(p, p).item() == 0.0);
  CHECK(huber(Tensor::scalar(0.5), Tensor::scalar(0.0), 1.0).item() ==
        doctest::Approx(0.125).epsilon(1e-15));
  CHECK(huber(Tensor::scalar(3.0), Tensor::scalar(0.0), 1.0).item() ==
        doctest::Approx(2.5).epsilon(1e-15));
  CHECK_THROWS_AS(huber(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
}

TEST_CASE("adam zero gradients leave parameters unchanged") {
  ParamStore store;
  store.create("w", {3}, {1.0, -2.0, 0.5});
  store.zero_grads();
  AdamState adam;
  adam.step(store);
  CHECK(store.at("w").values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam single step with unit gradient") {
  ParamStore store;
  store.create("w", {}, {1.0});
  store.at("w").mutable_grad()[0] = 1.0;
  AdamState adam(AdamConfig{0.001});
  adam.step(store);
  // bias-corrected first step moves by ~lr
  CHECK(store.at("w").item() == doctest::Approx(1.0 - 0.001).epsilon(1e-7));
  CHECK(store.at("w").grad()[0] == 0.0);  // zeroed afterward
}

TEST_CASE("adam trace matches an independent scalar implementation") {
  ParamStore store;
  store.create("w", {}, {0.7});
  AdamState adam(AdamConfig{0.01, 0.9, 0.999, 1e-8});

  // independent reference
  double w = 0.7, m = 0, v = 0;
  const double g = 0.3;
  for (int t = 1; t <= 5; ++t) {
    store.at("w").mutable_grad()[0] = g;
    adam.step(store);

    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    w -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::fabs(store.at("w").item() - w) <= 1e-12);
  }
}

TEST_CASE("adam rejects a missing gradient") {
  ParamStore store;
  store.create("w", {2}, {0.0, 0.0});
  AdamState adam;
  CHECK_THROWS_AS(adam.step(store), std::runtime_error);
}

TEST_CASE("grad_check basics") {
  ParamStore store;
  store.create("x", {}, {3.0});
  auto square = [](ParamStore& p) { return mul(p.at("x"), p.at("x")); };
  CHECK(grad_check(square, store, 1e-5) <= 1e-9);

  auto constant = [](ParamStore&) { return Tensor::scalar(5.0); };
  ParamStore store2;
  store2.create("x", {}, {1.0});
  CHECK(grad_check(constant, store2, 1e-5) == 0.0);
}

TEST_CASE("composite op pipeline passes a gradient check") {
  RngStream rng(19, "composite");
  ParamStore store;
  for (const char* name : {"w1", "w2"}) {
    std::vector<double> v(12);
    for (auto& x : v) x = rng.uniform(-0.8, 0.8);
    store.create(name, {4, 3}, v);
  }
  std::vector<double> bias(3);
  for (auto& x : bias) x = rng.uniform(-0.5, 0.5);
  store.create("b", {3}, bias);

  auto fn = [](ParamStore& p) {
    Tensor h = matmul_nt(p.at("w1"), p.at("w2"));        // [4,4]
    Tensor s = add_rowvec(slice_cols(h, 0, 3), p.at("b"));  // [4,3]
    Tensor act = relu(s);
    Tensor sm = softmax(act, 1);
    Tensor picked = gather_rows(sm, {0, 2, 2});
    Tensor pooled = group_max(concat_cols(picked, picked), {{0, 1}, {1, 2}});
    Tensor centered = sub_colvec(pooled, mean_rows(pooled));
    Tensor norms = sqrt_guarded(sum_rows(mul(centered, centered)));
    Tensor e = exp_clamped(scale(mean(norms), 0.5), -4.0, 4.0);
    return add(sum(e), cross_entropy_rows(s, {1, 0, 2, 1}));
  };
  CHECK(grad_check(fn, store, 1e-5) <= 1e-6);
}

TEST_CASE("parameter store round trips bitwise") {
  ParamStore store;
  store.create("layer.w", {2, 2}, {M_PI, -0.0, 1e-308, -123456.789});
  store.create("layer.b", {2}, {0.1 + 0.2, 1.0 / 3.0});
  store.create("scalar", {}, {2.5});

  std::stringstream ss;
  store.save(ss);
  ParamStore loaded = ParamStore::load(ss);
  CHECK(bitwise_equal(store, loaded));
  CHECK(loaded.names() == store.names());

  // double round trip through text is still bit-identical
  std::stringstream ss2;
  loaded.save(ss2);
  CHECK(ss.str() == ss2.str());
}

TEST_CASE("frozen store takes no gradients") {
  ParamStore store;
  store.create("w", {2}, {1.0, 2.0});
  store.freeze_all();
  CHECK(store.all_frozen());

  Tensor loss = sum(mul(store.at("w"), store.at("w")));
  loss.backward();
  CHECK_FALSE(store.at("w").grad_allocated());
}

TEST_CASE("duplicate and malformed parameter names are rejected") {
  ParamStore store;
  store.create("w", {1}, {0.0});
  CHECK_THROWS_AS(store.create("w", {1}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(store.create("bad name", {1}, {0.0}), std::invalid_argument);
}

TEST_CASE("ema update basics and closed form") {
  ParamStore teacher, student;
  teacher.create("w", {}, {0.0});
  student.create("w", {}, {1.0});

  ParamStore t0 = teacher.clone();
  ema_update(t0, student, 0.0);
  CHECK(t0.at("w").item() == 1.0);

  ParamStore t1 = teacher.clone();
  ema_update(t1, student, 1.0);
  CHECK(t1.at("w").item() == 0.0);

  ParamStore t2 = teacher.clone();
  ema_update(t2, student, 0.99);
  CHECK(t2.at("w").item() == doctest::Approx(0.01).epsilon(1e-12));

  // n constant-student updates equal the closed form
  const double alpha = 0.97, phi0 = -0.4, phi = 0.8;
  ParamStore t3;
  t3.create("w", {}, {phi0});
  ParamStore s3;
  s3.create("w", {}, {phi});
  for (int n = 1; n <= 50; ++n) {
    ema_update(t3, s3, alpha);
    const double expected = std::pow(alpha, n) * phi0 + (1.0 - std::pow(alpha, n)) * phi;
    CHECK(std::fabs(t3.at("w").item() - expected) <= 1e-12);
  }

  ParamStore mismatched;
  mismatched.create("other", {}, {0.0});
  CHECK_THROWS_AS(ema_update(mismatched, student, 0.5), std::runtime_error);
}

TEST_CASE("tensor shape bookkeeping") {
  CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), std::invalid_argument);
  Tensor t = Tensor::zeros({3, 4});
  CHECK(t.numel() == 12);
  CHECK_THROWS_AS(t.item(), std::invalid_argument);
}
