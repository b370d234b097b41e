#include <numeric>
#include <set>

#include "doctest.h"
#include "evtforce/train_eval.hpp"
#include "test_support.hpp"

using namespace evtforce;
using namespace evtforce::train;

namespace {

vit::ViTConfig tiny() {
  vit::ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.in_channels = 1;
  c.embed_dim = 16;
  c.depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  return c;
}

/// Frames whose label is the bright fraction of the top half.
FrameDataset toy_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> rows(0, 8);
  FrameDataset ds;
  for (std::size_t k = 0; k < n; ++k) {
    Frame f(1, 16, 16);
    const int r = rows(rng);
    for (int y = 0; y < r; ++y) {
      for (int x = 0; x < 16; ++x) f.at(0, y, x) = 1.0f;
    }
    ds.frames.push_back(f);
    ds.labels.push_back(1.6 * r / 8.0);
    ds.provenance.push_back("toy");
  }
  return ds;
}

bool same_values(const vit::ViTModel<float>& a, const vit::ViTModel<float>& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::ranges::equal(pa[i].second->data(), pb[i].second->data())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("split_indices: sizes, cover, determinism") {
  auto s = split_indices(1000, {}, 1);
  CHECK(s.train.size() == 700);
  CHECK(s.val.size() == 150);
  CHECK(s.test.size() == 150);

  auto all = split_indices(10, {1.0, 0.0, 0.0}, 3);
  CHECK(all.train.size() == 10);
  CHECK(all.val.empty());
  CHECK(all.test.empty());

  auto again = split_indices(1000, {}, 1);
  CHECK(again.train == s.train);
  CHECK(again.val == s.val);
  CHECK(again.test == s.test);
  CHECK(split_indices(1000, {}, 2).train != s.train);

  CHECK_THROWS_AS(split_indices(0, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(split_dataset(FrameDataset{}, {}, 1), std::invalid_argument);
}

TEST_CASE("split_indices: disjoint cover for many sizes and seeds") {
  for (std::size_t n = 1; n < 60; n += 3) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto s = split_indices(n, {0.6, 0.25, 0.15}, seed);
      std::set<std::size_t> seen;
      for (const auto* part : {&s.train, &s.val, &s.test}) {
        for (auto i : *part) CHECK(seen.insert(i).second);
      }
      CHECK(seen.size() == n);
      CHECK(*seen.rbegin() == n - 1);
      CHECK(s.val.size() == std::size_t(std::floor(0.25 * n + 1e-9)));
      CHECK(s.test.size() == std::size_t(std::floor(0.15 * n + 1e-9)));
    }
  }
}

TEST_CASE("mse_loss: values and gradient") {
  using T = ad::Tensor<double>;
  auto p = T::from({2, 1}, {0.48, 1.53}, true);
  auto y = T::from({2, 1}, {0.50, 1.50});
  CHECK(mse_loss(p, y).item() == doctest::Approx(0.00065).epsilon(1e-12));
  CHECK(mse_loss(y, y).item() == 0.0);

  ad::backward(mse_loss(p, y));
  CHECK(p.grad()[0] == doctest::Approx(2 * (0.48 - 0.50) / 2).epsilon(1e-12));
  CHECK(p.grad()[1] == doctest::Approx(2 * (1.53 - 1.50) / 2).epsilon(1e-12));

  std::mt19937_64 rng(1);
  auto q = testing::random_tensor(rng, {7, 1});
  auto t = testing::random_tensor(rng, {7, 1}, false);
  CHECK(testing::gradient_error({&q}, [&] { return mse_loss(q, t); }) <= 1e-6);

  CHECK_THROWS_AS(mse_loss(T::zeros({2, 1}), T::zeros({3, 1})), ad::ShapeError);
  CHECK_THROWS_AS(mse_loss(T::zeros({0, 1}), T::zeros({0, 1})), ad::ShapeError);
}

TEST_CASE("adam_step: zero gradient and zero learning rate leave parameters alone") {
  auto p = ad::Tensor<double>::from({3}, {1.0, -2.0, 3.0}, true);
  std::vector<ad::Tensor<double>*> params = {&p};
  auto state = AdamState<double>::for_parameters(params);
  std::vector<double> zero(3, 0.0);
  for (int i = 0; i < 10; ++i) adam_step<double>(params, {zero}, state, AdamHyper{});
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, -2, 3});
  CHECK(state.step == 10);

  AdamHyper frozen;
  frozen.learning_rate = 0;
  std::vector<double> g = {0.3, -4.0, 1e3};
  adam_step<double>(params, {g}, state, frozen);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, -2, 3});
}

TEST_CASE("adam_step: first step moves each coordinate by -lr sign(g)") {
  for (double factor : {1.0, 1e-3, 250.0}) {
    auto p = ad::Tensor<double>::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    std::vector<ad::Tensor<double>*> params = {&p};
    auto state = AdamState<double>::for_parameters(params);
    std::vector<double> g = {0.5 * factor, -2.0 * factor, 3.0 * factor, -0.01 * factor};
    adam_step<double>(params, {g}, state, AdamHyper{});
    const double before[] = {0.1, 0.2, 0.3, 0.4};
    for (int i = 0; i < 4; ++i) {
      const double moved = p.data()[i] - before[i];
      CHECK(std::abs(std::abs(moved) - 0.001) <= 1e-6);
      CHECK((moved < 0) == (g[i] > 0));
    }
    CHECK(state.step == 1);
  }
}

TEST_CASE("adam_step: shape mismatches") {
  auto p = ad::Tensor<double>::from({2}, {0, 0}, true);
  std::vector<ad::Tensor<double>*> params = {&p};
  auto state = AdamState<double>::for_parameters(params);
  std::vector<double> wrong(3, 1.0);
  CHECK_THROWS_AS(adam_step<double>(params, {wrong}, state, AdamHyper{}), ad::ShapeError);
  CHECK_THROWS_AS(adam_step<double>(params, {}, state, AdamHyper{}), ad::ShapeError);
}

TEST_CASE("compute_metrics: identities") {
  std::vector<double> y = {0.5, 1.5};
  auto perfect = compute_metrics(y, y);
  CHECK(perfect.rmse == 0.0);
  CHECK(*perfect.r2 == 1.0);
  CHECK(perfect.mape == 0.0);
  CHECK(perfect.n == 2);

  auto spot = compute_metrics(std::vector<double>{0.48, 1.53}, y);
  CHECK(spot.rmse == doctest::Approx(std::sqrt(0.00065)).epsilon(1e-12));
  CHECK(spot.rmse == doctest::Approx(0.02550).epsilon(2e-4));

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1.6);
  std::vector<double> t(100), p(100);
  for (auto& v : t) v = u(rng);
  for (auto& v : p) v = u(rng);
  const double mean = std::accumulate(t.begin(), t.end(), 0.0) / t.size();
  auto m = compute_metrics(std::vector<double>(100, mean), t);
  CHECK(std::abs(*m.r2) <= 1e-12);
  CHECK(*compute_metrics(p, t).r2 <= 1.0);

  auto flat = compute_metrics(std::vector<double>{1, 2}, std::vector<double>{1, 1});
  CHECK_FALSE(flat.r2.has_value());
  CHECK(flat.to_json()["r2"].is_null());

  auto floored = compute_metrics(std::vector<double>{0.01}, std::vector<double>{0.0});
  CHECK(floored.mape == doctest::Approx(0.01 / 0.05));

  auto j = spot.to_json();
  CHECK(j.contains("rmse_n"));
  CHECK(j["n"] == 2);
  CHECK_THROWS_AS(compute_metrics(std::vector<double>{}, std::vector<double>{}),
                  std::invalid_argument);
}

TEST_CASE("mse equals rmse squared") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = testing::random_tensor(rng, {13, 1}, false);
    auto y = testing::random_tensor(rng, {13, 1}, false);
    auto m = compute_metrics(std::vector<double>(p.data().begin(), p.data().end()),
                             std::vector<double>(y.data().begin(), y.data().end()));
    CHECK(mse_loss<double>(p, y).item() == doctest::Approx(m.rmse * m.rmse).epsilon(1e-12));
  }
}

TEST_CASE("TrainConfig validation names the key") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  try {
    c.validate();
    FAIL("expected failure");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).starts_with("train.batch_size"));
  }
  c = {};
  c.split = {0.5, 0.3, 0.3};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("train: zero epochs returns the initial model") {
  auto ds = toy_dataset(20, 1);
  auto split = split_dataset(ds, {}, 1);
  auto init = vit::init_params<float>(tiny(), 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  auto r = train::train(init, ds, split, cfg);
  CHECK(r.log.empty());
  CHECK(r.best_epoch == 0);
  CHECK(same_values(r.best, init));
  CHECK(same_values(r.last, init));
}

TEST_CASE("train: learns the toy task and is bit-reproducible") {
  auto ds = toy_dataset(120, 2);
  auto split = split_dataset(ds, {}, 5);
  auto init = vit::init_params<float>(tiny(), 3);
  TrainConfig cfg;
  cfg.epochs = 25;
  cfg.seed = 9;
  auto a = train::train(init, ds, split, cfg);
  REQUIRE(a.log.size() == 25);
  CHECK(a.log.back().train_mse * 10 < a.initial_train_mse);
  CHECK(a.log.front().val_mse.has_value());
  double best_val = 1e9;
  for (const auto& e : a.log) best_val = std::min(best_val, *e.val_mse);
  CHECK(a.best_epoch >= 1);
  CHECK(*a.log[a.best_epoch - 1].val_mse == best_val);

  auto b = train::train(init, ds, split, cfg);
  CHECK(log_to_csv(a.log) == log_to_csv(b.log));
  CHECK(same_values(a.best, b.best));
  CHECK(same_values(init, vit::init_params<float>(tiny(), 3)));

  auto m = evaluate(a.best, ds, split.test);
  CHECK(m.n == split.test.size());
  CHECK(m.rmse < 0.5);
}

TEST_CASE("train: empty training split is an error") {
  auto ds = toy_dataset(5, 1);
  Split split;
  split.val = {0, 1};
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train::train(vit::init_params<float>(tiny(), 1), ds, split, cfg),
                  std::invalid_argument);
}

TEST_CASE("log_to_csv layout") {
  std::vector<EpochLog> log = {{1, 0.5, 0.25}, {2, 0.125, std::nullopt}};
  CHECK(log_to_csv(log) == "epoch,train_mse,val_mse\n1,0.5,0.25\n2,0.125,\n");
}

TEST_CASE("predict: chunk size does not change results beyond rounding") {
  auto ds = toy_dataset(10, 4);
  auto m = vit::init_params<float>(tiny(), 2);
  std::vector<std::size_t> idx(10);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto a = predict(m, ds, idx, 3);
  auto b = predict(m, ds, idx, 64);
  for (std::size_t i = 0; i < idx.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
}
