#include <cmath>
#include <random>
#include <vector>

#include "calib2stage/checkpoint.hpp"
#include "calib2stage/errors.hpp"
#include "calib2stage/metrics.hpp"
#include "calib2stage/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace calib2stage;
using calib2stage::testing::random_tensor;

namespace {

Model gaussian_model(std::size_t f_in = 2, std::size_t z = 2, std::size_t k = 2, std::uint64_t seed = 1) {
  ModelSpec s = ModelSpec::dense_mlp(f_in, {3}, k);
  s.head = HeadKind::gaussian;
  s.z_dim = z;
  return Model(s, seed);
}

TrainData separable_blobs(std::size_t n, std::uint64_t seed) {
  const auto centers = circle_centers(2, 3.0);
  const Dataset ds = gen_blobs(n, 2, centers, 0.5, 0.0, seed);
  auto [train, val] = train_val_split(ds, {0.15, seed, true});
  return {train, val};
}

double accuracy(const Model& m, const Dataset& ds) { return evaluate(m, ds, {}).accuracy; }

}  // namespace

TEST_CASE("cross entropy examples") {
  Tape tape;
  const std::vector<int> y0{0};
  CHECK(cross_entropy(Tensor::matrix({{50, 0, 0}}), y0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cross_entropy(Tensor::matrix({{0.3, 0.3, 0.3, 0.3}}), std::vector<int>{3}) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));

  const Tensor logits = Tensor::matrix({{1.0, 2.0}, {0.5, -1.0}});
  const std::vector<int> y{0, 1};
  const double row0 = std::log(std::exp(1.0) + std::exp(2.0)) - 1.0;
  const double row1 = std::log(std::exp(0.5) + std::exp(-1.0)) + 1.0;
  CHECK(cross_entropy(logits, y) == doctest::Approx((row0 + row1) / 2).epsilon(1e-14));
  CHECK(cross_entropy_loss(tape.constant(logits), y).value()[0] ==
        doctest::Approx((row0 + row1) / 2).epsilon(1e-14));

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 2}), ContractError);
  CHECK_THROWS_AS(cross_entropy_loss(tape.constant(logits), std::vector<int>{-1, 0}), ContractError);
}

TEST_CASE("elbo hand instance with Z = 2, K = 2") {
  Model m = gaussian_model();
  m.param("theta.mu1.weight").fill(0.0);
  m.param("theta.mu1.bias") = Tensor::vector({1.0, -0.5});
  m.param("theta.sigma1.weight").fill(0.0);
  m.param("theta.sigma1.bias") = Tensor::vector({0.0, -1.0});
  m.param("nu.logits.weight") = Tensor::matrix({{0.7, -0.2}, {0.1, 0.9}});
  m.param("nu.logits.bias") = Tensor::vector({0.05, -0.05});

  const std::vector<double> mu{1.0, -0.5};
  const std::vector<double> var{0.5, 1.0 / (1.0 + std::exp(1.0))};
  const std::vector<std::vector<std::vector<double>>> eps{{{0.3, -1.2}, {-0.4, 0.8}},
                                                          {{1.1, 0.0}, {0.2, -0.6}}};
  const std::vector<int> y{0, 1};

  double ce = 0;
  for (const auto& sample : eps) {
    for (int r = 0; r < 2; ++r) {
      const double z0 = mu[0] + std::sqrt(var[0]) * sample[r][0];
      const double z1 = mu[1] + std::sqrt(var[1]) * sample[r][1];
      const double l0 = z0 * 0.7 + z1 * 0.1 + 0.05;
      const double l1 = z0 * -0.2 + z1 * 0.9 - 0.05;
      ce += std::log(std::exp(l0) + std::exp(l1)) - (y[r] == 0 ? l0 : l1);
    }
  }
  ce /= 4.0;  // 2 samples x 2 rows
  double kl = 0;
  for (int i = 0; i < 2; ++i) kl += 0.5 * (mu[i] * mu[i] + var[i] - 1.0 - std::log(var[i]));
  const double hand = ce + 0.5 * kl;  // kl_scale 1/Z, same KL on both rows

  std::vector<Tensor> eps_t;
  for (const auto& s : eps) eps_t.push_back(Tensor::matrix({{s[0][0], s[0][1]}, {s[1][0], s[1][1]}}));
  std::mt19937_64 rng(2);
  const Tensor features = random_tensor({2, 3}, rng);

  Tape tape;
  BoundModel bound(m, tape);
  const ElboTerms terms = elbo_loss(bound, tape.constant(features), y, 0.5, eps_t);
  CHECK(terms.loss.value()[0] == doctest::Approx(hand).epsilon(1e-10));
  CHECK(std::abs(terms.loss.value()[0] - hand) < 1e-10);
  CHECK(std::abs(elbo_value(m, features, y, 0.5, eps_t) - hand) < 1e-10);
}

TEST_CASE("elbo without its KL term is the cross entropy of the MC logits") {
  const Model m = gaussian_model(2, 4, 3, 7);
  std::mt19937_64 rng(3);
  const Tensor features = random_tensor({5, 3}, rng);
  const std::vector<int> y{0, 2, 1, 1, 0};
  const Tensor eps = standard_normal({5, 4}, rng);

  Tape tape;
  BoundModel bound(m, tape);
  const ElboTerms terms = elbo_loss(bound, tape.constant(features), y, 0.25, {eps});

  const GaussianPosterior q = posterior_values(m, features);
  Tensor z = q.mu;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += q.sigma[i] * eps[i];
  const double ce = cross_entropy(m.logits_from_latent(z), y);
  CHECK(std::abs(terms.ce.value()[0] - ce) < 1e-12);
  CHECK(std::abs(terms.loss.value()[0] - 0.25 * terms.kl.value()[0] - ce) < 1e-12);
}

TEST_CASE("elbo gradient matches finite differences for every head parameter") {
  Model m = gaussian_model(2, 3, 3, 11);
  m.group(GroupName::beta).trainable = false;
  std::mt19937_64 rng(4);
  const Tensor features = random_tensor({4, 3}, rng);
  const std::vector<int> y{2, 0, 1, 2};
  const std::vector<Tensor> eps{standard_normal({4, 3}, rng), standard_normal({4, 3}, rng)};
  const double kl_scale = 1.0 / 3.0;

  Tape tape;
  BoundModel bound(m, tape);
  const ElboTerms terms = elbo_loss(bound, tape.constant(features), y, kl_scale, eps);
  const GradientMap grads = tape.backward(terms.loss);

  std::size_t checked = 0;
  for (const auto& key : m.param_keys()) {
    if (key.rfind("beta.", 0) == 0) {
      CHECK(grads.count(key) == 0);
      continue;
    }
    REQUIRE(grads.count(key) == 1);
    const Tensor& g = grads.at(key);
    for (std::size_t i = 0; i < g.size(); ++i) {
      Model plus = m, minus = m;
      plus.param(key)[i] += 1e-5;
      minus.param(key)[i] -= 1e-5;
      const double fd = (elbo_value(plus, features, y, kl_scale, eps) -
                         elbo_value(minus, features, y, kl_scale, eps)) / 2e-5;
      const double err = std::abs(fd - g[i]);
      const double rel = err / std::max(std::abs(fd), std::abs(g[i]));
      CHECK_MESSAGE((rel < 1e-4 || err < 1e-7), key << "[" << i << "] fd " << fd << " tape " << g[i]);
      ++checked;
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::map<std::string, Tensor> p{{"w", Tensor::vector({1.5, -2.0})}};
    AdamState st;
    adam_step(p, {{"w", Tensor({2}, 0.0)}}, st, 1e-4);
    CHECK(p.at("w") == Tensor::vector({1.5, -2.0}));
    CHECK(st.t == 1);
  }
  SUBCASE("first step moves each element by lr against the gradient sign") {
    const double lr = 1e-4;
    std::map<std::string, Tensor> p{{"w", Tensor::vector({0.3, 0.3, 0.3})}};
    AdamState st;
    adam_step(p, {{"w", Tensor::vector({2.5, -0.01, 40.0})}}, st, lr);
    CHECK(std::abs((0.3 - p.at("w")[0]) - lr) < 1e-6 * lr);
    CHECK(std::abs((p.at("w")[1] - 0.3) - lr) < 1e-6 * lr);
    CHECK(std::abs((0.3 - p.at("w")[2]) - lr) < 1e-6 * lr);
  }
  SUBCASE("three steps on w^2 follow the reference recursion") {
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double w = 1.0, mom = 0.0, vel = 0.0;
    std::vector<double> expected;
    for (int t = 1; t <= 3; ++t) {
      const double g = 2.0 * w;
      mom = b1 * mom + (1 - b1) * g;
      vel = b2 * vel + (1 - b2) * g * g;
      w -= lr * (mom / (1 - std::pow(b1, t))) / (std::sqrt(vel / (1 - std::pow(b2, t))) + eps);
      expected.push_back(w);
    }
    std::map<std::string, Tensor> p{{"w", Tensor::vector({1.0})}};
    AdamState st;
    for (int t = 0; t < 3; ++t) {
      const Tensor g = Tensor::vector({2.0 * p.at("w")[0]});
      adam_step(p, {{"w", g}}, st, lr);
      CHECK(std::abs(p.at("w")[0] - expected[t]) < 1e-12);
    }
    CHECK(st.t == 3);
  }
  SUBCASE("frozen parameters are rejected") {
    Model m = gaussian_model();
    m.group(GroupName::beta).trainable = false;
    AdamState st;
    const std::string key = "beta.dense0.weight";
    CHECK_THROWS_AS(adam_step(m, {{key, Tensor(m.param(key).shape(), 1.0)}}, st, 1e-3), ContractError);
    std::map<std::string, Tensor> p{{"w", Tensor::vector({1.0})}};
    CHECK_THROWS_AS(adam_step(p, {{"v", Tensor::vector({1.0})}}, st, 1e-3), ContractError);
  }
}

TEST_CASE("early stopping keeps the best model") {
  const Model a = gaussian_model(2, 2, 2, 1), b = gaussian_model(2, 2, 2, 2);
  EarlyStopState s;
  CHECK(s.update(1.0, a, 1));
  CHECK_FALSE(s.update(1.5, b, 2));
  CHECK_FALSE(s.update(1.0, b, 3));  // ties do not count as improvement
  CHECK(s.best_val_loss == 1.0);
  CHECK(s.best_epoch == 1);
  CHECK(s.epochs_since_improve == 2);
  CHECK(s.exhausted(2));
  CHECK(s.best_model->param("nu.logits.weight") == a.param("nu.logits.weight"));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.max_epochs == 40);
  CHECK(c.patience == 10);
  CHECK(c.kl_weight(32) == 1.0 / 32.0);
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.kl_scale = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_loss_mode("elbo") == LossMode::elbo);
  CHECK_THROWS_AS(parse_loss_mode("mse"), ConfigError);
}

TEST_CASE("stage 1 fits separable blobs and returns the best-validation model") {
  const TrainData data = separable_blobs(400, 3);
  TrainConfig cfg;
  cfg.max_epochs = 200;
  cfg.batch_size = 16;
  cfg.seed = 5;
  const Model init(ModelSpec::dense_mlp(2, {16, 16}, 2), 5);
  const TrainResult r = run_stage1(init, data, cfg);
  CHECK(accuracy(r.checkpoint.model, data.train) > 99.0);
  CHECK(r.checkpoint.stage == StageTag::stage1);
  CHECK(r.history.size() <= 200);

  // The returned model attains the minimum of the validation history.
  double best = r.history.front().val_loss;
  for (const auto& e : r.history) best = std::min(best, e.val_loss);
  CHECK(r.best_val_loss == best);
  CHECK(r.history[r.best_epoch - 1].val_loss == best);
  const double recomputed = cross_entropy(r.checkpoint.model.logits(data.val.features), data.val.labels);
  CHECK(recomputed == doctest::Approx(best).epsilon(1e-12));

  SUBCASE("deterministic for a fixed seed") {
    const TrainResult again = run_stage1(init, data, cfg);
    CHECK(checkpoint_to_string(again.checkpoint) == checkpoint_to_string(r.checkpoint));
  }
  SUBCASE("rejects the elbo loss") {
    TrainConfig bad = cfg;
    bad.loss_mode = LossMode::elbo;
    CHECK_THROWS_AS(run_stage1(init, data, bad), ConfigError);
  }
}

TEST_CASE("patience stops early and returns an earlier model") {
  // Noisy labels make the validation loss turn upward once the net overfits.
  const Dataset ds = gen_blobs(200, 2, circle_centers(2, 1.0), 1.0, 0.3, 4);
  auto [train, val] = train_val_split(ds, {0.15, 4, true});
  const TrainData data{train, val};
  TrainConfig cfg;
  cfg.max_epochs = 500;
  cfg.patience = 1;
  cfg.learning_rate = 0.05;  // large enough to make validation loss bounce
  cfg.batch_size = 8;
  const TrainResult r = run_stage1(Model(ModelSpec::dense_mlp(2, {32}, 2), 1), data, cfg);
  REQUIRE(r.history.size() < 500);
  CHECK(r.best_epoch == r.history.size() - 1);
  CHECK(r.history.back().val_loss >= r.best_val_loss);
}

TEST_CASE("stage 2 keeps beta bit-identical") {
  const TrainData data = separable_blobs(300, 6);
  TrainConfig c1;
  c1.max_epochs = 20;
  c1.batch_size = 32;
  c1.learning_rate = 1e-2;
  const TrainResult s1 = run_stage1(Model(ModelSpec::dense_mlp(2, {12}, 2), 2), data, c1);
  const auto beta_hash = group_hash(s1.checkpoint.model, GroupName::beta);

  for (HeadKind head : {HeadKind::deterministic, HeadKind::gaussian}) {
    TrainConfig c2;
    c2.batch_size = 32;
    c2.seed = 9;
    c2.learning_rate = 1e-2;
    c2.loss_mode = head == HeadKind::gaussian ? LossMode::elbo : LossMode::ce;
    const TrainResult s2 = run_stage2(s1.checkpoint, data, c2, head, 4);
    const Model& m = s2.checkpoint.model;
    CHECK(group_hash(m, GroupName::beta) == beta_hash);
    CHECK_FALSE(m.group(GroupName::beta).trainable);
    CHECK(m.param("beta.dense0.weight") == s1.checkpoint.model.param("beta.dense0.weight"));
    CHECK(m.spec().head == head);
    CHECK(m.spec().z_dim == 4);
    CHECK(s2.history.size() <= 40);
    CHECK(s2.checkpoint.stage == (head == HeadKind::gaussian ? StageTag::vtst : StageTag::tst));
    CHECK(s2.checkpoint.seed == 9);
    CHECK(accuracy(m, data.val) > 90.0);

    const TrainResult again = run_stage2(s1.checkpoint, data, c2, head, 4);
    CHECK(checkpoint_to_string(again.checkpoint) == checkpoint_to_string(s2.checkpoint));
  }

  TrainConfig mismatch;
  mismatch.loss_mode = LossMode::ce;
  CHECK_THROWS_AS(run_stage2(s1.checkpoint, data, mismatch, HeadKind::gaussian, 4), ConfigError);
  Checkpoint not_stage1 = s1.checkpoint;
  not_stage1.stage = StageTag::e2e;
  CHECK_THROWS_AS(run_stage2(not_stage1, data, {}, HeadKind::deterministic, 4), ContractError);
}

TEST_CASE("end-to-end models match the two-stage architecture") {
  const TrainData data = separable_blobs(200, 8);
  const ModelSpec spec = ModelSpec::dense_mlp(2, {8}, 2);
  TrainConfig cfg;
  cfg.max_epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 4;
  const TrainResult e2e = run_end_to_end(spec, data, cfg, HeadKind::deterministic, 4);
  CHECK(e2e.checkpoint.stage == StageTag::e2e);
  for (auto g : {GroupName::beta, GroupName::theta, GroupName::nu}) {
    CHECK(e2e.checkpoint.model.group(g).trainable);
  }
  const Model two_stage = Model(spec, 1).reinit_head(2, HeadKind::deterministic, 4);
  CHECK(e2e.checkpoint.model.parameter_count() == two_stage.parameter_count());

  cfg.loss_mode = LossMode::elbo;
  const TrainResult var = run_end_to_end(spec, data, cfg, HeadKind::gaussian, 4);
  CHECK(var.checkpoint.stage == StageTag::var_e2e);
  CHECK(var.checkpoint.model.parameter_count() ==
        Model(spec, 1).reinit_head(2, HeadKind::gaussian, 4).parameter_count());
  const TrainResult again = run_end_to_end(spec, data, cfg, HeadKind::gaussian, 4);
  CHECK(checkpoint_to_string(again.checkpoint) == checkpoint_to_string(var.checkpoint));
}

TEST_CASE("the small CNN learns oriented bars") {
  const Dataset ds = gen_bar_images(600, 4, 16, 0.1, 1);
  const Dataset test = gen_bar_images(400, 4, 16, 0.1, 2);
  auto [train, val] = train_val_split(ds, {0.15, 1, true});
  TrainConfig cfg;
  cfg.max_epochs = 60;
  cfg.batch_size = 16;
  cfg.seed = 3;
  const TrainResult r = run_stage1(Model(ModelSpec::small_cnn({3, 16, 16}, 4), 3), {train, val}, cfg);
  CHECK(accuracy(r.checkpoint.model, test) > 90.0);
}

TEST_CASE("temperature scaling") {
  SUBCASE("uniform logits keep T = 1") {
    const Tensor logits({6, 3}, 0.7);
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    CHECK(fit_temperature(logits, y).T == 1.0);
  }

  std::mt19937_64 rng(21);
  const std::size_t n = 300, k = 4;
  Tensor logits({n, k});
  std::vector<int> y(n);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, 3);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = cls(rng);
    for (std::size_t j = 0; j < k; ++j) logits.at(i, j) = 3.0 * noise(rng) + (static_cast<int>(j) == y[i] ? 4.0 : 0.0);
  }
  const TemperatureScale t = fit_temperature(logits, y);
  CHECK(t.T > kMinTemperature);
  CHECK(t.T < kMaxTemperature);
  CHECK(nll_at_temperature(logits, y, t.T) <= nll_at_temperature(logits, y, 1.0));

  // The fitted T minimizes NLL over a fine grid, up to grid resolution.
  double grid_best = 1e300, grid_t = 0;
  for (double lt = std::log(0.05); lt <= std::log(20.0); lt += 1e-3) {
    const double v = nll_at_temperature(logits, y, std::exp(lt));
    if (v < grid_best) grid_best = v, grid_t = std::exp(lt);
  }
  CHECK(std::abs(std::log(t.T / grid_t)) < 2e-3);
  CHECK(nll_at_temperature(logits, y, t.T) <= grid_best + 1e-9);

  SUBCASE("scaling the logits scales T") {
    for (double c : {0.5, 2.0, 3.0}) {
      Tensor scaled = logits;
      for (auto& v : scaled.data()) v *= c;
      const TemperatureScale tc = fit_temperature(scaled, y);
      CHECK(std::abs(std::log(tc.T / (c * t.T))) < 2e-3);
      CHECK(nll_at_temperature(scaled, y, tc.T) == doctest::Approx(nll_at_temperature(logits, y, t.T)).epsilon(1e-8));
    }
  }
  SUBCASE("argmax is unchanged") {
    const Tensor before = softmax_rows(logits);
    const Tensor after = softmax_at_temperature(logits, t.T);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(argmax(std::span<const double>(before.raw() + i * k, k)) ==
            argmax(std::span<const double>(after.raw() + i * k, k)));
    }
    CHECK(evaluate_probs(before, y).accuracy == evaluate_probs(after, y).accuracy);
  }
}
