#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "prefcurate/btrm.hpp"

using namespace prefcurate;
using namespace prefcurate::btrm;

namespace {

// Pairs ordered by a hidden direction u, so a linear scorer is a perfect oracle.
struct Separable {
  EmbeddingVector u;
  std::vector<std::pair<EmbeddingVector, EmbeddingVector>> data;  // chosen, rejected
  std::vector<PairRef> refs;

  Separable(std::uint64_t seed, std::size_t n, std::size_t dim, const EmbeddingVector* shared_u = nullptr) {
    std::mt19937_64 rng(seed);
    u = shared_u ? *shared_u : testutil::random_vec(rng, dim);
    auto util = [&](const EmbeddingVector& e) {
      double s = 0;
      for (std::size_t i = 0; i < dim; ++i) s += u.values[i] * e.values[i];
      return s;
    };
    data.reserve(n);
    while (data.size() < n) {
      auto a = testutil::random_vec(rng, dim, 1.0 / std::sqrt(double(dim)));
      auto b = testutil::random_vec(rng, dim, 1.0 / std::sqrt(double(dim)));
      if (util(a) == util(b)) continue;
      if (util(a) < util(b)) std::swap(a, b);
      data.emplace_back(a, b);
    }
    for (auto& [c, r] : data) refs.push_back(PairRef{&c, &r});
  }
};

RewardModel random_model(std::mt19937_64& rng, Arch arch, std::size_t dim) {
  auto m = arch == Arch::linear ? RewardModel::linear(dim) : RewardModel::mlp(dim, 5, rng());
  std::normal_distribution<double> g(0, 0.5);
  for (auto& p : m.params) p = g(rng);
  return m;
}

TrainConfig strong() {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.momentum = 0.9;
  c.epochs = 50;
  c.eval_interval = 10;
  return c;
}

}  // namespace

TEST_SUITE("btrm") {
  TEST_CASE("scoring basics") {
    EmbeddingVector e{{0.5, -2.0, 1.0}};
    auto m = RewardModel::linear(3);
    CHECK(score(m, e) == 0.0);
    m.params = {1, 2, 3};
    CHECK(score(m, e) == doctest::Approx(0.5 - 4 + 3));
    auto mlp = RewardModel::mlp(3, 4, 9);
    CHECK(mlp.params.size() == RewardModel::param_count(Arch::mlp, 3, 4));
    CHECK(score(mlp, e) == score(mlp, e));
    CHECK(RewardModel::mlp(3, 4, 9) == mlp);
  }

  TEST_CASE("sigmoid values and overflow safety") {
    CHECK(sigmoid(0) == 0.5);
    CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(sigmoid(-50) > 0);
    CHECK(std::isfinite(softplus_neg(-800)));
    CHECK(softplus_neg(-800) == doctest::Approx(800));
    CHECK(softplus_neg(800) >= 0);
    CHECK(softplus_neg(0) == doctest::Approx(std::log(2.0)));
  }

  TEST_CASE("zero model has loss ln 2 and accuracy 0") {
    Separable w(1, 30, 6);
    auto m = RewardModel::linear(6);
    auto lg = pairwise_loss(m, w.refs);
    CHECK(lg.loss == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(pairwise_accuracy(m, w.refs) == 0.0);
  }

  TEST_CASE("analytic gradient matches finite differences") {
    std::mt19937_64 rng(11);
    double worst = 0;
    for (int i = 0; i < 40; ++i) {
      auto arch = i % 2 ? Arch::mlp : Arch::linear;
      Separable w(rng(), 1 + rng() % 12, 5);
      auto m = random_model(rng, arch, 5);
      auto analytic = pairwise_loss(m, w.refs).gradient;
      worst = std::max(worst, oracle::max_relative_error(analytic, oracle::fd_gradient(m, w.refs)));
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("duplicating the batch leaves loss and gradient unchanged") {
    std::mt19937_64 rng(2);
    Separable w(3, 10, 4);
    auto m = random_model(rng, Arch::mlp, 4);
    auto doubled = w.refs;
    doubled.insert(doubled.end(), w.refs.begin(), w.refs.end());
    auto a = pairwise_loss(m, w.refs), b = pairwise_loss(m, doubled);
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
    for (std::size_t i = 0; i < a.gradient.size(); ++i)
      CHECK(a.gradient[i] == doctest::Approx(b.gradient[i]).epsilon(1e-12));
  }

  TEST_CASE("antisymmetry and shift invariance") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100; ++i) {
      auto m = random_model(rng, i % 2 ? Arch::mlp : Arch::linear, 4);
      auto a = testutil::random_vec(rng, 4), b = testutil::random_vec(rng, 4);
      CHECK(predict_pair(m, a, b).p + predict_pair(m, b, a).p == doctest::Approx(1.0).epsilon(1e-9));
    }
    // A constant bias feature adds the same amount to every score.
    for (int i = 0; i < 100; ++i) {
      auto m = random_model(rng, Arch::linear, 4);
      auto biased = RewardModel::linear(5);
      std::copy(m.params.begin(), m.params.end(), biased.params.begin());
      biased.params[4] = 3.7;
      auto a = testutil::random_vec(rng, 4), b = testutil::random_vec(rng, 4);
      auto a5 = a, b5 = b;
      a5.values.push_back(1.0);
      b5.values.push_back(1.0);
      CHECK(std::abs(predict_pair(m, a, b).p - predict_pair(biased, a5, b5).p) < 1e-9);
    }
  }

  TEST_CASE("negating the model turns accuracy a into 1 - a") {
    std::mt19937_64 rng(6);
    Separable w(7, 200, 8);
    for (int i = 0; i < 10; ++i) {
      auto m = random_model(rng, Arch::linear, 8);
      auto neg = m;
      for (auto& p : neg.params) p = -p;
      CHECK(pairwise_accuracy(neg, w.refs) == doctest::Approx(1 - pairwise_accuracy(m, w.refs)));
    }
    auto oracle_model = RewardModel::linear(8);
    oracle_model.params = w.u.values;
    CHECK(pairwise_accuracy(oracle_model, w.refs) == 1.0);
  }

  TEST_CASE("learning rate schedules") {
    TrainConfig c;
    c.learning_rate = 1.0;
    CHECK(learning_rate_at(c, 0, 10) == doctest::Approx(1.0));
    CHECK(learning_rate_at(c, 5, 10) == doctest::Approx(0.5));
    c.schedule = Schedule::constant;
    CHECK(learning_rate_at(c, 9, 10) == 1.0);
    c.schedule = Schedule::linear_decay;
    c.warmup_fraction = 0.2;
    CHECK(learning_rate_at(c, 0, 10) < learning_rate_at(c, 1, 10));
    c.learning_rate = -1;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("separable world trains to near-perfect accuracy") {
    Separable train_set(21, 2000, 16);
    Separable gold(22, 500, 16, &train_set.u);
    const auto& gold_refs = gold.refs;
    auto r = train(train_set.refs, gold_refs, strong());
    CHECK(r.best_gold_accuracy >= 0.97);
    CHECK(r.best_gold_accuracy >= r.final_gold_accuracy);
    CHECK(pairwise_accuracy(r.best, gold_refs) == doctest::Approx(r.best_gold_accuracy));
  }

  TEST_CASE("training is deterministic for a fixed seed") {
    Separable w(31, 300, 8);
    auto c = strong();
    c.epochs = 5;
    c.rng_seed = 4;
    auto a = train(w.refs, w.refs, c), b = train(w.refs, w.refs, c);
    CHECK(a.final_model == b.final_model);
    CHECK(a.best == b.best);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].loss == b.history[i].loss);
    c.rng_seed = 5;
    CHECK_FALSE(train(w.refs, w.refs, c).final_model == a.final_model);

    c.arch = Arch::mlp;
    c.hidden_dim = 4;
    c.learning_rate = 0.1;
    CHECK(train(w.refs, w.refs, c).final_model == train(w.refs, w.refs, c).final_model);
  }

  TEST_CASE("full-batch loss on separable data never increases") {
    Separable w(41, 400, 8);
    TrainConfig c;
    c.learning_rate = 0.5;
    c.batch_size = 400;
    c.schedule = Schedule::constant;
    c.epochs = 60;
    auto r = train(w.refs, w.refs, c);
    REQUIRE(r.epoch_losses.size() == 60);
    for (std::size_t i = 1; i < r.epoch_losses.size(); ++i) CHECK(r.epoch_losses[i] <= r.epoch_losses[i - 1] + 1e-6);
  }

  TEST_CASE("argmax selection keeps the earliest best checkpoint") {
    Separable w(51, 200, 8);
    auto c = strong();
    c.epochs = 20;
    c.eval_interval = 1;
    auto r = train(w.refs, w.refs, c);
    double best = -1;
    int first = -1;
    for (const auto& h : r.history)
      if (h.gold_acc && *h.gold_acc > best) {
        best = *h.gold_acc;
        first = h.step;
      }
    CHECK(r.best_gold_accuracy == best);
    CHECK(r.best_step == first);
  }

  TEST_CASE("diverging runs throw") {
    Separable w(61, 50, 4);
    TrainConfig c;
    c.learning_rate = 1e308;
    c.epochs = 3;
    c.batch_size = 8;
    CHECK_THROWS_AS(train(w.refs, w.refs, c), TrainingDiverged);
  }

  TEST_CASE("checkpoint round trip is bit-exact") {
    testutil::TempDir dir("btrm");
    std::mt19937_64 rng(8);
    auto m = random_model(rng, Arch::mlp, 6);
    m.trained_on = "unit";
    save_checkpoint(dir.path / "m.ckpt", m, 3, 0.875);
    auto ck = load_checkpoint(dir.path / "m.ckpt");
    CHECK(ck.model == m);
    CHECK(ck.iteration == 3);
    CHECK(ck.gold_accuracy == 0.875);
    CHECK_THROWS(load_checkpoint(dir.path / "nope.ckpt"));
  }

  TEST_CASE("train config json round trip") {
    auto c = strong();
    c.arch = Arch::mlp;
    c.schedule = Schedule::constant;
    auto back = train_config_from_json(to_json(c));
    CHECK(back.learning_rate == c.learning_rate);
    CHECK(back.arch == Arch::mlp);
    CHECK(back.schedule == Schedule::constant);
    CHECK(back.momentum == 0.9);
  }
}
