#include <doctest.h>

#include <cmath>

#include "readmit/cohort.hpp"
#include "readmit/errors.hpp"
#include "readmit/modality.hpp"
#include "readmit/optim.hpp"

using namespace readmit;

TEST_SUITE_BEGIN("optim");

namespace {

// small planted cohort + model wiring shared by the training tests
struct Rig {
  Cohort cohort;
  Model model;
  PreparedBatch batch;
};

Rig make_rig(int n, std::uint64_t seed, double s_ehr = 1.0, double s_img = 1.0,
             double s_note = 1.0) {
  SyntheticSpec spec;
  spec.n_admissions = n;
  spec.seed = seed;
  spec.s_ehr = s_ehr;
  spec.s_img = s_img;
  spec.s_note = s_note;
  spec.d_ehr_raw = 8;
  spec.d_img_raw = 8;
  spec.max_note_tokens = 300;
  Cohort cohort = generate_synthetic_cohort(spec);
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.dropout = 0.1;
  HashingEmbedder emb(16, Rng(seed).child(200).seed());
  Model model(cfg, 8, 8, 16, seed);
  PreparedBatch batch = model.prepare(cohort, emb);
  return {std::move(cohort), std::move(model), std::move(batch)};
}

}  // namespace

TEST_CASE("bce: zero logits give ln 2, saturated-correct goes to zero, oracle") {
  Tensor z = Tensor::zeros({3});
  Tensor y = Tensor::from({3}, {1, 0, 1});
  CHECK(bce_loss(z, y).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor hot = Tensor::from({1}, {20.0});
  Tensor one = Tensor::from({1}, {1.0});
  const double loss = bce_loss(hot, one).item();
  CHECK(loss == doctest::Approx(2.0611536181902037e-9).epsilon(1e-9));
  CHECK(loss > 0.0);

  // direct high-precision evaluation on a random case
  Rng rng(3);
  const int n = 7;
  std::vector<double> zv(n), yv(n);
  for (int i = 0; i < n; ++i) {
    zv[static_cast<std::size_t>(i)] = rng.uniform(-4, 4);
    yv[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  double want = 0.0;
  for (int i = 0; i < n; ++i) {
    const long double s = 1.0L / (1.0L + std::exp(-static_cast<long double>(zv[i])));
    want -= static_cast<double>(yv[i] * std::log(s) + (1.0L - yv[i]) * std::log(1.0L - s));
  }
  want /= n;
  const double got = bce_loss(Tensor::from({n}, zv), Tensor::from({n}, yv)).item();
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("bce respects the inclusion mask and rejects an empty one") {
  Tensor z = Tensor::from({3}, {5, -5, 0});
  Tensor y = Tensor::from({3}, {1, 0, 1});
  Tensor keep_last = Tensor::from({3}, {0, 0, 1});
  CHECK(bce_loss(z, y, keep_last).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor none = Tensor::zeros({3});
  CHECK_THROWS_AS(bce_loss(z, y, none), ContractError);
  Tensor bad = Tensor::from({3}, {1, 0.5, 0});
  CHECK_THROWS_AS(bce_loss(z, bad), ContractError);
}

TEST_CASE("bce loss is nonnegative") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 5;
    std::vector<double> zv(n), yv(n);
    for (int i = 0; i < n; ++i) {
      zv[static_cast<std::size_t>(i)] = rng.uniform(-30, 30);
      yv[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    CHECK(bce_loss(Tensor::from({n}, zv), Tensor::from({n}, yv)).item() >= 0.0);
  }
}

TEST_CASE("adam: bias-corrected first step moves by lr in the gradient direction") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(1);
  ParameterStore store;
  Tensor w = store.create("w", {4}, Init::zeros, rng);
  w.values_mut() = {1.0, -2.0, 3.0, 0.5};
  const auto before = w.values();
  w.grad_mut() = {0.3, -0.7, 0.001, 2.0};
  AdamOptimizer adam(store, 0.01);
  adam.step();
  for (int i = 0; i < 4; ++i) {
    const double g = std::vector<double>{0.3, -0.7, 0.001, 2.0}[static_cast<std::size_t>(i)];
    const double moved = before[static_cast<std::size_t>(i)] - w.values()[static_cast<std::size_t>(i)];
    CHECK(moved == doctest::Approx(0.01 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-3));
  }
  CHECK(w.grad().empty());  // grads consumed
}

TEST_CASE("adam: zero grads leave parameters unchanged") {
  Rng rng(2);
  ParameterStore store;
  Tensor w = store.create("w", {3}, Init::fan_in_uniform, rng);
  const auto before = w.values();
  AdamOptimizer adam(store, 0.05);
  adam.step();  // no grads at all
  CHECK(w.values() == before);
  w.grad_mut() = {0.0, 0.0, 0.0};
  adam.step();
  CHECK(w.values() == before);
}

TEST_CASE("adam on f(w)=w^2 matches an independent simulation and shrinks |w|") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(3);
  ParameterStore store;
  Tensor w = store.create("w", {1}, Init::zeros, rng);
  w.values_mut() = {1.0};
  AdamOptimizer adam(store, 0.1);

  // independent scalar Adam
  double sw = 1.0, m = 0.0, v = 0.0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double prev_abs = 1.0;
  for (int t = 1; t <= 3; ++t) {
    {
      GradientTape tape;
      Tensor loss = mul(w, w);
      tape.backward(loss);
    }
    adam.step();

    const double g = 2.0 * sw;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    sw -= 0.1 * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    CHECK(w.values()[0] == doctest::Approx(sw).epsilon(1e-12));
    CHECK(std::abs(w.values()[0]) < prev_abs);
    prev_abs = std::abs(w.values()[0]);
  }
}

TEST_CASE("adam aborts on non-finite gradients naming the parameter") {
  Rng rng(4);
  ParameterStore store;
  Tensor w = store.create("bad_param", {2}, Init::zeros, rng);
  w.grad_mut() = {1.0, std::nan("")};
  AdamOptimizer adam(store, 0.01);
  CHECK_THROWS_WITH_AS(adam.step(), doctest::Contains("bad_param"), NumericError);
}

TEST_CASE("training with lr=0 keeps parameters bit-identical") {
  Rig rig = make_rig(60, 21);
  const auto before = rig.model.params().snapshot();
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.precision = Precision::f64;
  cfg.early_stop = false;
  const auto result = train_model(rig.model, rig.batch, cfg);
  CHECK_FALSE(result.aborted);
  CHECK(result.history.size() == 3);
  const auto after = rig.model.params().snapshot();
  CHECK(before == after);
}

TEST_CASE("training is deterministic under a fixed seed") {
  TrainConfig cfg;
  cfg.lr = 0.003;
  cfg.epochs = 4;
  cfg.precision = Precision::f64;
  cfg.early_stop = false;
  cfg.seed = 31;

  Rig a = make_rig(60, 31);
  const auto ra = train_model(a.model, a.batch, cfg);
  Rig b = make_rig(60, 31);
  const auto rb = train_model(b.model, b.batch, cfg);
  REQUIRE(ra.history.size() == rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
    CHECK(ra.history[i].val_auc == rb.history[i].val_auc);
  }
  CHECK(a.model.params().snapshot() == b.model.params().snapshot());
}

TEST_CASE("dropout changes training forwards but never inference forwards") {
  Rig rig = make_rig(40, 41);
  Rng r1(1), r2(2);
  const Tensor t1 = rig.model.forward(rig.batch, true, &r1);
  const Tensor t2 = rig.model.forward(rig.batch, true, &r2);
  CHECK(t1.values() != t2.values());
  const Tensor i1 = rig.model.forward(rig.batch, false, nullptr);
  const Tensor i2 = rig.model.forward(rig.batch, false, nullptr);
  CHECK(i1.values() == i2.values());
}

TEST_CASE("training loss trends down over the first 10 epochs on planted signal") {
  Rig rig = make_rig(120, 51);
  TrainConfig cfg;
  cfg.lr = 0.002;
  cfg.epochs = 10;
  cfg.precision = Precision::f64;
  cfg.early_stop = false;
  cfg.seed = 51;
  const auto result = train_model(rig.model, rig.batch, cfg);
  REQUIRE(result.history.size() == 10);
  int rises = 0;
  for (std::size_t i = 1; i < result.history.size(); ++i)
    if (result.history[i].train_loss > result.history[i - 1].train_loss) ++rises;
  CHECK(rises <= 2);
  CHECK(result.history.back().train_loss < result.history.front().train_loss);
}

TEST_CASE("best-validation snapshot is retained and restorable") {
  Rig rig = make_rig(60, 61);
  TrainConfig cfg;
  cfg.lr = 0.003;
  cfg.epochs = 5;
  cfg.precision = Precision::f64;
  cfg.early_stop = false;
  cfg.seed = 61;
  const auto result = train_model(rig.model, rig.batch, cfg);
  CHECK(result.best_epoch >= 1);
  CHECK(result.best_val_auc > 0.0);
  double best_seen = 0.0;
  for (const auto& e : result.history) best_seen = std::max(best_seen, e.val_auc);
  CHECK(result.best_val_auc == best_seen);
  rig.model.params().restore(result.best_params);  // shape-compatible by construction
}

TEST_SUITE_END();
