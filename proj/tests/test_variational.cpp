#include <cmath>
#include <random>

#include "calib2stage/errors.hpp"
#include "calib2stage/variational.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace calib2stage;
using calib2stage::testing::random_tensor;

namespace {

Model gaussian_model(std::size_t z = 3, std::size_t k = 4, std::uint64_t seed = 1) {
  ModelSpec s = ModelSpec::dense_mlp(2, {6}, k);
  s.head = HeadKind::gaussian;
  s.z_dim = z;
  return Model(s, seed);
}

// Forces the sigma branch output to a constant raw value.
void set_raw_sigma(Model& m, double raw) {
  m.param("theta.sigma1.weight").fill(0.0);
  m.param("theta.sigma1.bias").fill(raw);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("posterior variance is log-sigmoid bounded") {
  Model m = gaussian_model();
  const Tensor features({2, 6}, 0.4);

  set_raw_sigma(m, 0.0);
  GaussianPosterior q = posterior_values(m, features);
  for (double s : q.sigma.data()) {
    CHECK(s * s == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  }

  set_raw_sigma(m, -10.0);
  q = posterior_values(m, features);
  // sigmoid(-10) = 1 / (1 + e^10) = 4.5397868702434395e-05
  for (double s : q.sigma.data()) CHECK(s * s == doctest::Approx(4.5397868702434395e-05).epsilon(1e-12));

  for (double raw : {5.0, 20.0, 40.0, 700.0}) {
    set_raw_sigma(m, raw);
    q = posterior_values(m, features);
    for (double s : q.sigma.data()) {
      CHECK(s <= 1.0);
      CHECK(s * s == doctest::Approx(sigmoid(raw)).epsilon(1e-12));
    }
  }
}

TEST_CASE("variance bound holds over random heads and inputs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Model m = gaussian_model(5, 3, rng());
    const GaussianPosterior q = posterior_values(m, random_tensor({16, 6}, rng, -20.0, 20.0));
    for (double s : q.sigma.data()) {
      CHECK(s > 0.0);
      CHECK(s * s <= 1.0);
    }
  }
}

TEST_CASE("kl_standard_normal examples") {
  CHECK(kl_standard_normal(GaussianPosterior{Tensor({1, 3}, 0.0), Tensor({1, 3}, 1.0)})[0] == 0.0);
  CHECK(kl_standard_normal(GaussianPosterior{Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 1}})})[0] ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(kl_standard_normal(GaussianPosterior{Tensor::matrix({{1, 0}}), Tensor::matrix({{1, 0}})}),
                  ContractError);

  // Tape version agrees with the plain one.
  Tape tape;
  const Tensor mu = Tensor::matrix({{0.3, -1.2}, {2.0, 0.0}});
  const Tensor log_var = Tensor::matrix({{-0.5, -2.0}, {0.0, -0.1}});
  Tensor sigma = log_var;
  for (auto& v : sigma.data()) v = std::exp(0.5 * v);
  const Tensor a = kl_standard_normal(tape.constant(mu), tape.constant(log_var)).value();
  const Tensor b = kl_standard_normal(GaussianPosterior{mu, sigma});
  for (std::size_t i = 0; i < 2; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-13));
}

TEST_CASE("KL is non-negative and zero only at the prior") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> sd(1e-3, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor mu = random_tensor({1, 4}, rng, -3.0, 3.0);
    Tensor sigma({1, 4});
    for (auto& v : sigma.data()) v = sd(rng);
    CHECK(kl_standard_normal(GaussianPosterior{mu, sigma})[0] > 0.0);
  }
}

TEST_CASE("closed-form KL matches a Monte Carlo estimate within 3 standard errors") {
  std::mt19937_64 rng(2025);
  std::uniform_real_distribution<double> sd(0.1, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int samples = 100000;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t z = 1 + trial % 6;
    Tensor mu = random_tensor({1, z}, rng, -2.0, 2.0);
    Tensor sigma({1, z});
    for (auto& v : sigma.data()) v = sd(rng);
    const double closed = kl_standard_normal(GaussianPosterior{mu, sigma})[0];
    double s = 0.0, s2 = 0.0;
    for (int n = 0; n < samples; ++n) {
      double log_ratio = 0.0;
      for (std::size_t i = 0; i < z; ++i) {
        const double e = normal(rng);
        const double x = mu[i] + sigma[i] * e;
        log_ratio += -std::log(sigma[i]) - 0.5 * e * e + 0.5 * x * x;
      }
      s += log_ratio;
      s2 += log_ratio * log_ratio;
    }
    const double mean = s / samples;
    const double se = std::sqrt((s2 / samples - mean * mean) / samples);
    CHECK(std::abs(mean - closed) <= 3.0 * se);
  }
}

TEST_CASE("reparam_sample") {
  Model m = gaussian_model();
  Tape tape;
  BoundModel bound(m, tape);
  const PosteriorVars q = posterior_params(bound, tape.constant(Tensor({2, 6}, 0.2)));
  const LatentSample zero = reparam_sample(q, Tensor(q.mu.shape(), 0.0));
  CHECK(zero.z.value() == q.mu.value());

  std::mt19937_64 rng(5);
  const LatentSample s = reparam_sample(q, rng);
  for (std::size_t i = 0; i < s.eps.size(); ++i) {
    CHECK(s.z.value()[i] == q.mu.value()[i] + q.sigma.value()[i] * s.eps[i]);
  }
}

TEST_CASE("reparameterized sample mean converges to mu") {
  std::mt19937_64 rng(77);
  const Tensor mu = Tensor::matrix({{0.7, -1.3, 0.0}});
  const Tensor sigma = Tensor::matrix({{0.2, 1.0, 0.5}});
  const int draws = 100000;
  Tensor total({1, 3}, 0.0);
  for (int n = 0; n < draws; ++n) {
    Tape tape;
    const PosteriorVars q{tape.constant(mu), tape.constant(Tensor({1, 3}, 0.0)), tape.constant(sigma)};
    const LatentSample s = reparam_sample(q, rng);
    for (std::size_t i = 0; i < 3; ++i) total[i] += s.z.value()[i];
  }
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(total[i] / draws - mu[i]) <= 3.0 * sigma[i] / std::sqrt(double(draws)));
  }
}

TEST_CASE("reparameterization gradients: dz/dmu = 1, dz/dsigma = eps") {
  std::mt19937_64 rng(9);
  const Tensor eps = random_tensor({2, 3}, rng, -1.5, 1.5);
  auto r = testing::grad_check({random_tensor({2, 3}, rng), random_tensor({2, 3}, rng, 0.1, 1.0)},
                               [&](Tape& t, const std::vector<Var>& v) {
                                 const PosteriorVars q{v[0], v[0], v[1]};
                                 return testing::weighted_sum(t, reparam_sample(q, eps).z);
                               });
  CHECK_MESSAGE(r.ok, r.worst);

  Tape tape;
  auto mu = tape.variable(Tensor({2, 3}, 0.1));
  auto sigma = tape.variable(Tensor({2, 3}, 0.5));
  tape.backward(sum(reparam_sample(PosteriorVars{mu, mu, sigma}, eps).z));
  CHECK(tape.gradient_of(mu) == Tensor({2, 3}, 1.0));
  CHECK(tape.gradient_of(sigma) == eps);
}

TEST_CASE("predictive_mc examples") {
  std::mt19937_64 rng(4);
  Model m = gaussian_model(3, 4, 8);
  const Tensor x = random_tensor({5, 2}, rng);

  SUBCASE("degenerate posterior equals the softmax of the mean") {
    set_raw_sigma(m, -50.0);
    const Tensor mu = posterior_values(m, m.features(x)).mu;
    const Tensor expect = softmax_rows(m.logits_from_latent(mu));
    for (std::size_t mval : {1, 7, 30}) {
      const Tensor p = predictive_mc(m, x, PredictConfig{mval, 1, 3});
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - expect[i]) <= 1e-8);
    }
  }

  SUBCASE("m = 2 with a fixed eps pair is the average of two softmax rows") {
    const Tensor f = m.features(x);
    const GaussianPosterior q = posterior_values(m, f);
    const Tensor e1 = random_tensor({5, 3}, rng), e2 = random_tensor({5, 3}, rng);
    const Tensor p = predictive_with_eps(m, f, std::vector<Tensor>{e1, e2});
    const Tensor& w = m.param("nu.logits.weight");
    const Tensor& b = m.param("nu.logits.bias");
    for (std::size_t r = 0; r < 5; ++r) {
      double expect[4] = {0, 0, 0, 0};
      for (const Tensor* e : {&e1, &e2}) {
        double logits[4], mx = -1e300, denom = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
          logits[k] = b[k];
          for (std::size_t i = 0; i < 3; ++i) logits[k] += (q.mu.at(r, i) + q.sigma.at(r, i) * e->at(r, i)) * w.at(i, k);
          mx = std::max(mx, logits[k]);
        }
        for (double l : logits) denom += std::exp(l - mx);
        for (std::size_t k = 0; k < 4; ++k) expect[k] += 0.5 * std::exp(logits[k] - mx) / denom;
      }
      for (std::size_t k = 0; k < 4; ++k) CHECK(p.at(r, k) == doctest::Approx(expect[k]).epsilon(1e-12));
    }
  }

  SUBCASE("rows sum to one and m = 1 is reproducible") {
    const Tensor p = predictive_mc(m, x, PredictConfig{10, 1, 2});
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += p.at(r, k);
      CHECK(std::abs(s - 1.0) <= 1e-10);
    }
    CHECK(predictive_mc(m, x, PredictConfig{1, 1, 42}) == predictive_mc(m, x, PredictConfig{1, 1, 42}));
  }

  SUBCASE("results do not depend on how the set is batched") {
    const PredictConfig cfg{6, 1, 11};
    const Tensor whole = predictive_mc(m, x, cfg);
    const Tensor head = predictive_mc(m, x.slice_rows(0, 2), cfg, 0);
    const Tensor tail = predictive_mc(m, x.slice_rows(2, 5), cfg, 2);
    for (std::size_t i = 0; i < head.size(); ++i) CHECK(head[i] == whole[i]);
    for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == whole[head.size() + i]);
  }
}

TEST_CASE("MC predictive variance shrinks with more samples") {
  Model m = gaussian_model(4, 3, 21);
  set_raw_sigma(m, 1.0);  // wide posterior
  const Tensor x = Tensor::matrix({{0.5, -0.4}});
  auto max_prob_variance = [&](std::size_t mval) {
    std::vector<double> v;
    for (std::uint64_t rep = 0; rep < 40; ++rep) {
      const Tensor p = predictive_mc(m, x, PredictConfig{mval, 1, 1000 + rep});
      v.push_back(*std::max_element(p.raw(), p.raw() + 3));
    }
    double mean = 0.0, var = 0.0;
    for (double a : v) mean += a / v.size();
    for (double a : v) var += (a - mean) * (a - mean) / (v.size() - 1);
    return var;
  };
  CHECK(max_prob_variance(100) < max_prob_variance(1));
}
