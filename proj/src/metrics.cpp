#include "calib2stage/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "calib2stage/errors.hpp"

namespace calib2stage {

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Prediction make_prediction(std::span<const double> probs, int label) {
  Prediction p;
  p.probs.assign(probs.begin(), probs.end());
  p.label = label;
  const std::size_t k = argmax(probs);
  p.confidence = probs[k];
  p.correct = static_cast<int>(k) == label;
  return p;
}

std::size_t confidence_bin(double confidence) {
  const double bins = static_cast<double>(kCalibrationBins);
  auto upper = [bins](std::size_t k) { return static_cast<double>(k + 1) / bins; };
  auto lower = [bins](std::size_t k) { return static_cast<double>(k) / bins; };
  double guess = std::ceil(confidence * bins) - 1.0;
  std::size_t k = guess <= 0.0 ? 0 : std::min<std::size_t>(static_cast<std::size_t>(guess), kCalibrationBins - 1);
  // Correct rounding in confidence * 10 against the exact edges k / 10.
  while (k + 1 < kCalibrationBins && confidence > upper(k)) ++k;
  while (k > 0 && confidence <= lower(k)) --k;
  return k;
}

CalibrationResult ece_mce(std::span<const double> confidences, std::span<const char> correct) {
  if (confidences.empty()) throw ContractError("ece_mce needs at least one prediction");
  if (confidences.size() != correct.size()) throw DimensionError("ece_mce: length mismatch");
  CalibrationResult r;
  std::array<double, kCalibrationBins> conf_sum{}, hit_sum{};
  for (std::size_t k = 0; k < kCalibrationBins; ++k) {
    r.bins[k].lower = static_cast<double>(k) / kCalibrationBins;
    r.bins[k].upper = static_cast<double>(k + 1) / kCalibrationBins;
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const std::size_t k = confidence_bin(confidences[i]);
    ++r.bins[k].count;
    conf_sum[k] += confidences[i];
    hit_sum[k] += correct[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(confidences.size());
  for (std::size_t k = 0; k < kCalibrationBins; ++k) {
    auto& bin = r.bins[k];
    if (bin.count == 0) continue;
    const double c = static_cast<double>(bin.count);
    bin.mean_confidence = conf_sum[k] / c;
    bin.accuracy = hit_sum[k] / c;
    const double gap = std::abs(*bin.accuracy - bin.mean_confidence);
    r.ece += (c / n) * gap;
    r.mce = std::max(r.mce, gap);
  }
  r.ece *= 100.0;
  r.mce *= 100.0;
  return r;
}

CalibrationResult ece_mce(std::span<const Prediction> preds) {
  std::vector<double> conf;
  std::vector<char> hit;
  for (const auto& p : preds) {
    conf.push_back(p.confidence);
    hit.push_back(p.correct ? 1 : 0);
  }
  return ece_mce(conf, hit);
}

double nll(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) throw DimensionError("nll: shape mismatch");
  if (labels.empty()) throw ContractError("nll of an empty set");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    s -= std::log(std::max(probs.at(i, static_cast<std::size_t>(labels[i])), kNllFloor));
  }
  return s / static_cast<double>(labels.size());
}

double predictive_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double auroc(std::span<const double> in_scores, std::span<const double> out_scores) {
  if (in_scores.empty() || out_scores.empty()) throw ContractError("auroc needs non-empty score lists");
  std::vector<double> out(out_scores.begin(), out_scores.end());
  std::sort(out.begin(), out.end());
  // Twice the Mann-Whitney U, kept integral so the result is exact.
  unsigned long long twice_u = 0;
  for (double s : in_scores) {
    const auto lo = std::lower_bound(out.begin(), out.end(), s);
    const auto hi = std::upper_bound(lo, out.end(), s);
    twice_u += 2ull * static_cast<unsigned long long>(lo - out.begin()) +
               static_cast<unsigned long long>(hi - lo);
  }
  return static_cast<double>(twice_u) /
         (2.0 * static_cast<double>(in_scores.size()) * static_cast<double>(out_scores.size()));
}

double fpr_at_95_tpr(std::span<const double> in_scores, std::span<const double> out_scores) {
  if (in_scores.empty() || out_scores.empty()) throw ContractError("fpr95 needs non-empty score lists");
  std::vector<double> in(in_scores.begin(), in_scores.end());
  std::sort(in.begin(), in.end(), std::greater<>());
  // Smallest count k with k / n >= 0.95, in integers.
  const std::size_t k = (95 * in.size() + 99) / 100;
  const double tau = in[k - 1];
  const auto fp = std::count_if(out_scores.begin(), out_scores.end(), [tau](double s) { return s >= tau; });
  return static_cast<double>(fp) / static_cast<double>(out_scores.size());
}

std::string_view to_string(OodScore s) {
  return s == OodScore::max_softmax ? "max_softmax" : "negative_entropy";
}

OodScore parse_ood_score(std::string_view s) {
  if (s == "max_softmax") return OodScore::max_softmax;
  if (s == "negative_entropy") return OodScore::negative_entropy;
  throw ConfigError("unknown OOD score '" + std::string(s) + "'");
}

std::vector<double> ood_scores(const Tensor& probs, OodScore score) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> row(probs.raw() + i * k, k);
    out[i] = score == OodScore::max_softmax ? row[argmax(row)] : -predictive_entropy(row);
  }
  return out;
}

OodReport ood_report(const Tensor& in_probs, const Tensor& out_probs, OodScore score) {
  const auto in = ood_scores(in_probs, score);
  const auto out = ood_scores(out_probs, score);
  return {auroc(in, out), fpr_at_95_tpr(in, out), score};
}

EvalReport evaluate_probs(const Tensor& probs, std::span<const int> labels) {
  if (labels.empty()) throw DataError("evaluation set is empty");
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw DimensionError("evaluate: probability rows do not match labels");
  }
  const std::size_t n = labels.size(), k = probs.dim(1);
  EvalReport r;
  r.n = n;
  std::vector<char> hit(n);
  r.confidences.resize(n);
  r.entropies.resize(n);
  r.entropy_histogram.max_entropy = std::log(static_cast<double>(k));
  r.entropy_histogram.counts.assign(kEntropyBins, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> row(probs.raw() + i * k, k);
    const std::size_t pred = argmax(row);
    r.confidences[i] = row[pred];
    hit[i] = static_cast<int>(pred) == labels[i];
    correct += hit[i];
    r.entropies[i] = predictive_entropy(row);
    const double frac = r.entropies[i] / r.entropy_histogram.max_entropy;
    const auto bin = static_cast<std::size_t>(std::clamp(frac, 0.0, 1.0) * kEntropyBins);
    ++r.entropy_histogram.counts[std::min(bin, kEntropyBins - 1)];
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
  const CalibrationResult cal = ece_mce(r.confidences, hit);
  r.ece = cal.ece;
  r.mce = cal.mce;
  r.bins = cal.bins;
  r.nll = nll(probs, labels);
  return r;
}

Tensor predict_probs(const Model& model, const Tensor& features, const PredictConfig& cfg) {
  constexpr std::size_t kChunk = 512;
  const std::size_t n = features.dim(0);
  Tensor probs({n, model.spec().num_classes});
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    const Tensor x = features.slice_rows(start, end);
    const Tensor p = model.spec().head == HeadKind::gaussian
                         ? predictive_mc(model, x, cfg, start)
                         : softmax_rows(model.logits(x));
    std::copy(p.raw(), p.raw() + p.size(), probs.raw() + start * probs.dim(1));
  }
  return probs;
}

EvalReport evaluate(const Model& model, const Dataset& ds, const PredictConfig& cfg) {
  ds.validate();
  if (ds.num_classes != model.spec().num_classes) {
    throw DimensionError("dataset has " + std::to_string(ds.num_classes) + " classes, model has " +
                         std::to_string(model.spec().num_classes));
  }
  return evaluate_probs(predict_probs(model, ds.features, cfg), ds.labels);
}

}  // namespace calib2stage
