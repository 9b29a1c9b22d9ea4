#include <doctest.h>

#include <cmath>

#include "flsim/data.hpp"
#include "flsim/errors.hpp"
#include "flsim/model.hpp"
#include "test_support.hpp"

using namespace flsim;
using namespace flsim::testing;

TEST_CASE("ParamVector arithmetic requires identical layouts") {
  auto a = ParamVector(linear_spec(2, 2).layout());
  auto b = ParamVector(mlp_spec(2, 1, 2).layout());
  CHECK_THROWS_AS(a += b, LayoutError);
  auto c = ParamVector(linear_spec(2, 2).layout());  // equal layout, distinct pointer
  CHECK_NOTHROW(a += c);
  CHECK_THROWS_AS(ParamVector(a.layout(), std::vector<double>(3)), LayoutError);
}

TEST_CASE("mean of two vectors is their midpoint") {
  auto layout = probe_spec({0, 0}).layout();
  std::vector<ParamVector> v{ParamVector(layout, {0, 2}), ParamVector(layout, {4, 6})};
  CHECK(mean(v) == ParamVector(layout, {2, 4}));
  CHECK(weighted_mean(v, std::vector<double>{1, 3}) == ParamVector(layout, {3, 5}));
}

TEST_CASE("init_params") {
  SUBCASE("probe starts at zero") {
    Stream rng(1);
    const auto p = init_params(probe_spec({5, 6, 7}), rng);
    CHECK(p == ParamVector(p.layout(), {0, 0, 0}));
  }
  SUBCASE("linear parameter count") {
    CHECK(linear_spec(4, 3).param_count() == 15);
    Stream rng(1);
    CHECK(init_params(linear_spec(4, 3), rng).size() == 15);
  }
  SUBCASE("deterministic and bounded, zero biases") {
    const auto spec = mlp_spec(9, 4, 3);
    Stream r1(42), r2(42);
    const auto a = init_params(spec, r1);
    const auto b = init_params(spec, r2);
    CHECK(a == b);
    for (const auto& block : a.layout()->blocks()) {
      const auto vals = a.block(block);
      if (block.dims.size() == 1) {
        for (double v : vals) CHECK(v == 0.0);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(block.dims[1]));
        for (double v : vals) CHECK(std::abs(v) <= bound);
      }
    }
  }
  SUBCASE("invalid spec") {
    Stream rng(1);
    CHECK_THROWS_AS(init_params(linear_spec(4, 1), rng), ConfigError);
    CHECK_THROWS_AS(init_params(mlp_spec(4, 0, 3), rng), ConfigError);
    CHECK_THROWS_AS(init_params(probe_spec({}), rng), ConfigError);
  }
}

TEST_CASE("loss_and_grad closed forms") {
  SUBCASE("zero linear model has loss ln C") {
    Stream rng(3);
    const auto spec = linear_spec(6, 10);
    const auto batch = random_batch(6, 10, 17, rng);
    const auto out = loss_and_grad(spec, ParamVector(spec.layout()), batch);
    CHECK(out.loss == doctest::Approx(std::log(10.0)).epsilon(1e-14));
    CHECK(out.loss == doctest::Approx(2.302585092994046));
  }
  SUBCASE("probe 0.5 |theta - a|^2") {
    const auto spec = probe_spec({0, 0});
    const auto out = loss_and_grad(spec, ParamVector(spec.layout(), {1, 2}), Batch{});
    CHECK(out.loss == 2.5);
    CHECK(out.grad == ParamVector(spec.layout(), {1, 2}));
  }
  SUBCASE("overflowing parameters report the block") {
    const auto spec = linear_spec(2, 2);
    ParamVector p(spec.layout());
    p[0] = std::numeric_limits<double>::infinity();
    Batch b;
    b.features = Matrix(1, 2);
    b.features(0, 0) = 1.0;
    b.labels = {1};
    try {
      loss_and_grad(spec, p, b);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK((e.block() == "loss" || e.block() == "weight"));
    }
  }
  SUBCASE("batch mismatches are rejected") {
    const auto spec = linear_spec(3, 2);
    Stream rng(1);
    CHECK_THROWS_AS(loss_and_grad(spec, ParamVector(spec.layout()), random_batch(4, 2, 3, rng)),
                    ConfigError);
    CHECK_THROWS_AS(loss_and_grad(spec, ParamVector(spec.layout()), Batch{}), ConfigError);
  }
}

TEST_CASE("analytic gradients match central differences") {
  Stream rng(2024);
  const ModelSpec specs[] = {linear_spec(4, 3), mlp_spec(5, 4, 3),
                             mlp_spec(5, 4, 3, Activation::tanh), probe_spec({0.5, -1.0, 2.0})};
  for (const auto& spec : specs) {
    CAPTURE(to_string(spec.kind));
    for (int draw = 0; draw < 10; ++draw) {
      const auto params = random_params(spec, rng, 0.7);
      const auto batch = random_batch(spec.input_dim, spec.num_classes, 8, rng);
      const auto analytic = loss_and_grad(spec, params, batch).grad;
      const auto numeric = finite_diff_grad(spec, params, batch, 1e-5);
      CHECK(rel_error(analytic, numeric) < 1e-5);
    }
  }
}

TEST_CASE("finite_diff_grad") {
  SUBCASE("exact on the probe") {
    const auto spec = probe_spec({1.0});
    const auto g = finite_diff_grad(spec, ParamVector(spec.layout(), {3.0}), Batch{}, 1e-4);
    CHECK(std::abs(g[0] - 2.0) < 1e-8);
  }
  SUBCASE("rejects non-positive epsilon") {
    const auto spec = probe_spec({1.0});
    CHECK_THROWS_AS(finite_diff_grad(spec, ParamVector(spec.layout()), Batch{}, 0.0), ConfigError);
  }
  SUBCASE("duplicated sample matches the single sample") {
    Stream rng(5);
    const auto spec = mlp_spec(3, 2, 2);
    const auto params = random_params(spec, rng);
    const auto one = random_batch(3, 2, 1, rng);
    Batch two;
    two.features = Matrix(2, 3);
    for (int r = 0; r < 2; ++r) {
      for (int j = 0; j < 3; ++j) two.features(r, j) = one.features(0, j);
    }
    two.labels = {one.labels[0], one.labels[0]};
    CHECK(finite_diff_grad(spec, params, one, 1e-5) == finite_diff_grad(spec, params, two, 1e-5));
    CHECK(loss_and_grad(spec, params, one).grad == loss_and_grad(spec, params, two).grad);
  }
}

TEST_CASE("loss is invariant to row order and exact under duplication") {
  Stream rng(11);
  const auto spec = mlp_spec(4, 5, 3);
  const auto params = random_params(spec, rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto batch = random_batch(4, 3, 12, rng);
    batch.ids.resize(12);
    std::iota(batch.ids.begin(), batch.ids.end(), std::size_t{100});
    const auto base = loss_and_grad(spec, params, batch);
    CHECK(base.loss >= 0.0);

    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Batch shuffled;
    shuffled.features = Matrix(12, 4);
    for (std::size_t r = 0; r < 12; ++r) {
      for (std::size_t j = 0; j < 4; ++j) shuffled.features(r, j) = batch.features(perm[r], j);
      shuffled.labels.push_back(batch.labels[perm[r]]);
      shuffled.ids.push_back(batch.ids[perm[r]]);
    }
    const auto moved = loss_and_grad(spec, params, shuffled);
    CHECK(moved.loss == base.loss);
    CHECK(moved.grad == base.grad);

    Batch doubled;
    doubled.features = Matrix(24, 4);
    for (std::size_t r = 0; r < 24; ++r) {
      for (std::size_t j = 0; j < 4; ++j) doubled.features(r, j) = batch.features(r % 12, j);
      doubled.labels.push_back(batch.labels[r % 12]);
    }
    const auto twice = loss_and_grad(spec, params, doubled);
    CHECK(twice.loss == doctest::Approx(base.loss).epsilon(1e-13));
    CHECK(rel_error(twice.grad, base.grad) < 1e-13);
  }
}

TEST_CASE("top1_accuracy") {
  Stream rng(9);
  SUBCASE("zero model predicts class 0") {
    const auto spec = linear_spec(3, 4);
    const auto batch = random_batch(3, 4, 50, rng);
    const double freq0 =
        static_cast<double>(std::count(batch.labels.begin(), batch.labels.end(), 0)) / 50.0;
    CHECK(top1_accuracy(spec, ParamVector(spec.layout()), batch) == freq0);
  }
  SUBCASE("single correct sample") {
    const auto spec = linear_spec(1, 2);
    ParamVector p(spec.layout(), {0.0, 0.0, 0.0, 1.0});  // bias favours class 1
    Batch b;
    b.features = Matrix(1, 1);
    b.labels = {1};
    CHECK(top1_accuracy(spec, p, b) == 1.0);
  }
  SUBCASE("separable blobs reach 1.0 after centralized SGD") {
    Stream gen(4);
    const auto data = gen_blobs(3, 4, 20, 0.1, gen);
    const auto spec = linear_spec(4, 3);
    auto params = init_params(spec, gen);
    const auto batch = data.as_batch();
    for (int it = 0; it < 200; ++it) params.axpy(-0.5, loss_and_grad(spec, params, batch).grad);
    // independent recount of argmax hits
    std::size_t hits = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
      const auto z = logits(spec, params, data.features.row(r));
      if (std::max_element(z.begin(), z.end()) - z.begin() == data.labels[r]) ++hits;
    }
    CHECK(hits == data.size());
    CHECK(top1_accuracy(spec, params, batch) == 1.0);
  }
  SUBCASE("probe is unsupported") {
    const auto spec = probe_spec({1});
    CHECK_THROWS_AS(top1_accuracy(spec, ParamVector(spec.layout()), random_batch(1, 2, 1, rng)),
                    UnsupportedOperation);
  }
}
