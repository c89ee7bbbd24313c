#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "calib2stage/data.hpp"
#include "calib2stage/model.hpp"
#include "calib2stage/tensor.hpp"
#include "calib2stage/variational.hpp"

namespace calib2stage {

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

struct Prediction {
  std::vector<double> probs;
  int label = 0;
  double confidence = 0.0;  // max(probs)
  bool correct = false;     // argmax(probs) == label
};

Prediction make_prediction(std::span<const double> probs, int label);

inline constexpr std::size_t kCalibrationBins = 10;

struct ReliabilityBin {
  double lower = 0.0;  // bin is (lower, upper]; the first bin also holds 0
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  std::optional<double> accuracy;  // empty when count == 0
};

using ReliabilityBins = std::array<ReliabilityBin, kCalibrationBins>;

struct CalibrationResult {
  double ece = 0.0;  // percent
  double mce = 0.0;  // percent
  ReliabilityBins bins;
};

// 0-based bin index of a confidence: bin k holds (k/10, (k+1)/10], 0 -> bin 0.
std::size_t confidence_bin(double confidence);

// Throws ContractError on an empty list.
CalibrationResult ece_mce(std::span<const Prediction> preds);
CalibrationResult ece_mce(std::span<const double> confidences, std::span<const char> correct);

inline constexpr double kNllFloor = 1e-12;

// Mean of -ln p(true label), p clamped at 1e-12. probs is [n x K].
double nll(const Tensor& probs, std::span<const int> labels);

// -sum p ln p with 0 ln 0 = 0.
double predictive_entropy(std::span<const double> probs);

// Mann-Whitney: P(in > out) + 1/2 P(in == out), exact. Higher = more in-distribution.
double auroc(std::span<const double> in_scores, std::span<const double> out_scores);

// FPR at the largest threshold tau with TPR(score >= tau) >= 0.95.
double fpr_at_95_tpr(std::span<const double> in_scores, std::span<const double> out_scores);

enum class OodScore { max_softmax, negative_entropy };
std::string_view to_string(OodScore s);
OodScore parse_ood_score(std::string_view s);

// Per-row OOD score for [n x K] probabilities.
std::vector<double> ood_scores(const Tensor& probs, OodScore score);

struct OodReport {
  double auroc = 0.0;
  double fpr95 = 0.0;
  OodScore score = OodScore::max_softmax;
};

OodReport ood_report(const Tensor& in_probs, const Tensor& out_probs, OodScore score);

struct EntropyHistogram {
  double max_entropy = 0.0;  // ln K; bins split [0, ln K] evenly
  std::vector<std::size_t> counts;
};

inline constexpr std::size_t kEntropyBins = 20;

struct EvalReport {
  std::size_t n = 0;
  double accuracy = 0.0;  // percent
  double ece = 0.0;       // percent
  double mce = 0.0;       // percent
  double nll = 0.0;       // nats
  ReliabilityBins bins;
  std::vector<double> entropies;
  EntropyHistogram entropy_histogram;
  std::vector<double> confidences;
};

EvalReport evaluate_probs(const Tensor& probs, std::span<const int> labels);

// Predictive probabilities for every example: softmax for deterministic heads,
// the MC predictive with cfg.m samples for gaussian heads.
Tensor predict_probs(const Model& model, const Tensor& features, const PredictConfig& cfg);

// Throws DataError on an empty dataset, DimensionError on shape mismatch.
EvalReport evaluate(const Model& model, const Dataset& ds, const PredictConfig& cfg);

}  // namespace calib2stage
