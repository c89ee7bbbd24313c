#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "calib2stage/errors.hpp"
#include "calib2stage/metrics.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace calib2stage;

namespace {

struct BruteCalibration {
  double ece = 0.0, mce = 0.0;
  std::vector<std::size_t> counts;
};

// Sort, then walk bins using the literal edge test (k-1)/10 < c <= k/10.
BruteCalibration brute_ece(std::vector<double> conf, std::vector<char> hit) {
  std::vector<std::size_t> order(conf.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return conf[a] < conf[b]; });
  BruteCalibration r;
  const double n = static_cast<double>(conf.size());
  for (int k = 1; k <= 10; ++k) {
    const double lo = (k - 1) / 10.0, hi = k / 10.0;
    double cs = 0, hs = 0;
    std::size_t c = 0;
    for (auto i : order) {
      const bool in = (conf[i] > lo && conf[i] <= hi) || (k == 1 && conf[i] == 0.0);
      if (!in) continue;
      ++c;
      cs += conf[i];
      hs += hit[i];
    }
    r.counts.push_back(c);
    if (c == 0) continue;
    const double gap = std::abs(hs / c - cs / c);
    r.ece += c / n * gap * 100.0;
    r.mce = std::max(r.mce, gap * 100.0);
  }
  return r;
}

double all_pairs_auroc(const std::vector<double>& in, const std::vector<double>& out) {
  double s = 0;
  for (double a : in)
    for (double b : out) s += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return s / (static_cast<double>(in.size()) * static_cast<double>(out.size()));
}

Tensor probs_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor({rows.size(), rows.front().size()}, flat);
}

}  // namespace

TEST_CASE("prediction uses lowest-index argmax") {
  const std::vector<double> p{0.4, 0.4, 0.2};
  Prediction a = make_prediction(p, 0);
  CHECK(a.confidence == 0.4);
  CHECK(a.correct);
  CHECK_FALSE(make_prediction(p, 1).correct);
}

TEST_CASE("ece hand fixture") {
  const std::vector<double> conf{0.6, 0.6, 0.9, 0.9};
  const std::vector<char> hit{1, 0, 1, 1};
  const CalibrationResult r = ece_mce(conf, hit);
  CHECK(r.ece == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(r.mce == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(r.bins[5].count == 2);
  CHECK(r.bins[8].count == 2);
  CHECK_FALSE(r.bins[0].accuracy.has_value());
}

TEST_CASE("ece extremes") {
  const std::vector<double> ones(7, 1.0);
  CHECK(ece_mce(ones, std::vector<char>(7, 1)).ece == 0.0);
  CHECK(ece_mce(ones, std::vector<char>(7, 1)).mce == 0.0);
  CHECK(ece_mce(ones, std::vector<char>(7, 0)).ece == 100.0);
  CHECK(ece_mce(ones, std::vector<char>(7, 0)).mce == 100.0);
  CHECK_THROWS_AS(ece_mce(std::vector<double>{}, std::vector<char>{}), ContractError);
  CHECK_THROWS_AS(ece_mce(std::span<const Prediction>{}), ContractError);
}

TEST_CASE("bin edges are right-closed") {
  CHECK(confidence_bin(0.0) == 0);
  CHECK(confidence_bin(0.1) == 0);
  CHECK(confidence_bin(std::nextafter(0.1, 1.0)) == 1);
  CHECK(confidence_bin(0.3) == 2);
  CHECK(confidence_bin(0.7) == 6);
  CHECK(confidence_bin(1.0) == 9);
  for (int k = 1; k <= 10; ++k) CHECK(confidence_bin(k / 10.0) == static_cast<std::size_t>(k - 1));
}

TEST_CASE("ece matches brute-force binning on random fixtures") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(1, 60), edge(0, 10), pick(0, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.6);
  double worst = 0;
  for (int f = 0; f < 1000; ++f) {
    const int n = len(rng);
    std::vector<double> conf(n);
    std::vector<char> hit(n);
    for (int i = 0; i < n; ++i) {
      // A quarter of the confidences land exactly on bin edges.
      conf[i] = pick(rng) == 0 ? edge(rng) / 10.0 : u(rng);
      hit[i] = coin(rng);
    }
    const CalibrationResult r = ece_mce(conf, hit);
    const BruteCalibration b = brute_ece(conf, hit);
    worst = std::max({worst, std::abs(r.ece - b.ece), std::abs(r.mce - b.mce)});
    std::size_t total = 0;
    for (std::size_t k = 0; k < kCalibrationBins; ++k) {
      REQUIRE(r.bins[k].count == b.counts[k]);
      total += r.bins[k].count;
    }
    CHECK(total == static_cast<std::size_t>(n));
    CHECK(r.ece <= r.mce + 1e-12);
    CHECK(r.mce <= 100.0);
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("nll") {
  CHECK(nll(probs_rows({{1, 0}, {0, 1}}), std::vector<int>{0, 1}) == 0.0);
  CHECK(nll(probs_rows({{0.25, 0.25, 0.25, 0.25}}), std::vector<int>{2}) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  const double hand = -(std::log(0.7) + std::log(0.4)) / 2.0;
  CHECK(nll(probs_rows({{0.7, 0.3}, {0.6, 0.4}}), std::vector<int>{0, 1}) ==
        doctest::Approx(hand).epsilon(1e-15));
  // Clamped: a zero probability on the true class costs -ln(1e-12).
  CHECK(nll(probs_rows({{1, 0}}), std::vector<int>{1}) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("predictive entropy") {
  CHECK(predictive_entropy(std::vector<double>(10, 0.1)) == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  CHECK(predictive_entropy(std::vector<double>{0, 1, 0}) == 0.0);
  const double hand = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
  CHECK(predictive_entropy(std::vector<double>{0.5, 0.25, 0.25}) == doctest::Approx(hand).epsilon(1e-15));
  CHECK(hand == doctest::Approx(1.0397207708399179));
}

TEST_CASE("auroc examples") {
  CHECK(auroc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.2, 0.1}) == 1.0);
  CHECK(auroc(std::vector<double>(5, 0.3), std::vector<double>(4, 0.3)) == 0.5);
  CHECK(auroc(std::vector<double>{0.9, 0.4}, std::vector<double>{0.6, 0.3}) == 0.75);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector<double>{0.1}), ContractError);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1}, std::vector<double>{}), ContractError);
}

TEST_CASE("auroc equals all-pairs counting with ties") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(1, 200), level(0, 20);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> in(len(rng)), out(len(rng));
    // Coarse levels make ties common.
    for (auto& v : in) v = level(rng) / 20.0 + 0.1;
    for (auto& v : out) v = level(rng) / 20.0;
    REQUIRE(auroc(in, out) == all_pairs_auroc(in, out));
  }
}

TEST_CASE("fpr at 95 tpr") {
  std::vector<double> in(19, 0.9);
  in.push_back(0.1);
  std::vector<double> out{0.95, 0.95};
  out.insert(out.end(), 8, 0.5);
  CHECK(fpr_at_95_tpr(in, out) == doctest::Approx(0.2).epsilon(1e-15));

  CHECK(fpr_at_95_tpr(std::vector<double>{0.9, 0.8}, std::vector<double>{0.2, 0.1}) == 0.0);
  CHECK(fpr_at_95_tpr(std::vector<double>(4, 0.5), std::vector<double>(3, 0.5)) == 1.0);
  CHECK_THROWS_AS(fpr_at_95_tpr(std::vector<double>{}, std::vector<double>{0.1}), ContractError);
}

TEST_CASE("ood report scores") {
  const Tensor in = probs_rows({{0.9, 0.1}, {0.8, 0.2}});
  const Tensor out = probs_rows({{0.5, 0.5}, {0.6, 0.4}});
  for (OodScore s : {OodScore::max_softmax, OodScore::negative_entropy}) {
    const OodReport r = ood_report(in, out, s);
    CHECK(r.auroc == 1.0);
    CHECK(r.fpr95 == 0.0);
    CHECK(parse_ood_score(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_ood_score("energy"), ConfigError);
}

TEST_CASE("evaluate_probs matches a composed hand oracle") {
  const std::vector<std::vector<double>> rows{
      {0.70, 0.20, 0.10}, {0.05, 0.90, 0.05}, {0.30, 0.30, 0.40}, {0.55, 0.40, 0.05},
      {0.10, 0.10, 0.80}, {0.34, 0.33, 0.33}, {0.00, 1.00, 0.00}, {0.60, 0.30, 0.10},
      {0.25, 0.50, 0.25}, {0.15, 0.15, 0.70}};
  const std::vector<int> labels{0, 1, 0, 1, 2, 0, 1, 2, 1, 2};
  const EvalReport r = evaluate_probs(probs_rows(rows), labels);

  double hits = 0, ll = 0;
  std::vector<double> conf;
  std::vector<char> hit;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto best = std::max_element(rows[i].begin(), rows[i].end());
    conf.push_back(*best);
    hit.push_back(static_cast<int>(best - rows[i].begin()) == labels[i]);
    hits += hit.back();
    ll -= std::log(std::max(rows[i][labels[i]], 1e-12));
  }
  const BruteCalibration b = brute_ece(conf, hit);
  CHECK(r.n == 10);
  CHECK(r.accuracy == doctest::Approx(hits * 10.0));
  CHECK(r.accuracy == doctest::Approx(70.0));
  CHECK(r.nll == doctest::Approx(ll / 10.0).epsilon(1e-14));
  CHECK(r.ece == doctest::Approx(b.ece).epsilon(1e-12));
  CHECK(r.mce == doctest::Approx(b.mce).epsilon(1e-12));
  CHECK(r.ece <= r.mce);
  CHECK(r.confidences == conf);

  std::size_t mass = 0;
  for (auto c : r.entropy_histogram.counts) mass += c;
  CHECK(mass == 10);
  CHECK(r.entropy_histogram.counts.front() == 1);  // the one-hot row
  CHECK(r.entropies[6] == 0.0);
  CHECK(r.entropy_histogram.max_entropy == doctest::Approx(std::log(3.0)));
}

TEST_CASE("evaluate over models") {
  std::mt19937_64 rng(3);
  Dataset ds;
  ds.features = calib2stage::testing::random_tensor({40, 2}, rng);
  ds.num_classes = 3;
  for (int i = 0; i < 40; ++i) ds.labels.push_back(i % 3);
  ds.name = "fixture";

  SUBCASE("deterministic head ignores m") {
    const Model m(ModelSpec::dense_mlp(2, {5}, 3), 4);
    const EvalReport a = evaluate(m, ds, {.m = 1});
    const EvalReport b = evaluate(m, ds, {.m = 10, .seed = 9});
    CHECK(a.confidences == b.confidences);
    CHECK(a.ece == b.ece);
    CHECK(a.nll == b.nll);
  }
  SUBCASE("gaussian head uses the MC predictive") {
    ModelSpec s = ModelSpec::dense_mlp(2, {5}, 3);
    s.head = HeadKind::gaussian;
    s.z_dim = 4;
    const Model m(s, 4);
    const PredictConfig cfg{.m = 10, .seed = 2};
    const EvalReport r = evaluate(m, ds, cfg);
    const EvalReport oracle = evaluate_probs(predictive_mc(m, ds.features, cfg), ds.labels);
    CHECK(r.confidences == oracle.confidences);
    CHECK(r.nll == oracle.nll);
    CHECK(r.ece <= r.mce);
  }
  SUBCASE("class count mismatch") {
    const Model m(ModelSpec::dense_mlp(2, {5}, 4), 4);
    CHECK_THROWS_AS(evaluate(m, ds, {}), DimensionError);
  }
  SUBCASE("input width mismatch") {
    const Model m(ModelSpec::dense_mlp(3, {5}, 3), 4);
    CHECK_THROWS_AS(evaluate(m, ds, {}), DimensionError);
  }
}
