#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calib2stage/autograd.hpp"
#include "calib2stage/checkpoint.hpp"
#include "calib2stage/data.hpp"
#include "calib2stage/model.hpp"
#include "calib2stage/variational.hpp"

namespace calib2stage {

enum class LossMode { ce, elbo };
std::string_view to_string(LossMode m);
LossMode parse_loss_mode(std::string_view s);

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 40;
  LossMode loss_mode = LossMode::ce;
  // KL weight; unset means 1 / Z.
  std::optional<double> kl_scale;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::size_t train_m = 1;

  double kl_weight(std::size_t z_dim) const {
    return kl_scale ? *kl_scale : 1.0 / static_cast<double>(z_dim);
  }
  // Throws ConfigError.
  void validate() const;
};

// Train and validation parts of one split. Stage 1 and Stage 2 must be given
// the same object.
struct TrainData {
  Dataset train;
  Dataset val;
};

// ---- losses ----------------------------------------------------------------

// Mean over the batch of -log_softmax(logits)[label]. Out-of-range labels
// throw ContractError.
Var cross_entropy_loss(const Var& logits, std::span<const int> labels);
double cross_entropy(const Tensor& logits, std::span<const int> labels);

struct ElboTerms {
  Var loss;  // ce + kl_scale * kl
  Var ce;    // (1/m) sum_j CE(logits(z_j))
  Var kl;    // batch mean of KL(q || N(0, I))
  std::vector<Tensor> eps;
};

// Negative KL-rescaled ELBO for a gaussian head on a feature batch, one
// [batch x Z] noise tensor per MC sample.
ElboTerms elbo_loss(BoundModel& model, const Var& features, std::span<const int> labels,
                    double kl_scale, std::vector<Tensor> eps);
ElboTerms elbo_loss(BoundModel& model, const Var& features, std::span<const int> labels,
                    double kl_scale, std::size_t samples, std::mt19937_64& rng);

// Plain-value ELBO loss with the given noise.
double elbo_value(const Model& model, const Tensor& features, std::span<const int> labels,
                  double kl_scale, std::span<const Tensor> eps);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// One bias-corrected step on every parameter named in grads.
void adam_step(std::map<std::string, Tensor>& params, const GradientMap& grads, AdamState& state,
               double lr);
// Model version; a gradient for a frozen parameter is a ContractError.
void adam_step(Model& model, const GradientMap& grads, AdamState& state, double lr);

// ---- early stopping --------------------------------------------------------

struct EarlyStopState {
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::optional<Model> best_model;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_improve = 0;

  // Records an epoch's validation loss; keeps a copy of the model on strict
  // improvement. Returns true when it improved.
  bool update(double val_loss, const Model& model, std::size_t epoch);
  bool exhausted(std::size_t patience) const { return epochs_since_improve >= patience; }
};

// ---- procedures ------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // the best-validation model
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Whole network with CE; all groups trainable.
TrainResult run_stage1(Model model, const TrainData& data, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

// Freezes beta, reinitializes theta and nu with cfg.seed, and trains the head
// on cached features. HeadKind::deterministic trains with CE (TST),
// HeadKind::gaussian with the ELBO (V-TST).
TrainResult run_stage2(const Checkpoint& stage1, const TrainData& data, const TrainConfig& cfg,
                       HeadKind head, std::size_t z_dim, const EpochCallback& on_epoch = {});

// Stage-2 architecture trained from scratch in one stage with every group
// trainable: CE for a deterministic head (e2e), ELBO for a gaussian head (var_e2e).
TrainResult run_end_to_end(ModelSpec spec, const TrainData& data, const TrainConfig& cfg,
                           HeadKind head, std::size_t z_dim, const EpochCallback& on_epoch = {});

// ---- temperature scaling ---------------------------------------------------

struct TemperatureScale {
  double T = 1.0;
};

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

double nll_at_temperature(const Tensor& logits, std::span<const int> labels, double T);
Tensor softmax_at_temperature(const Tensor& logits, double T);

// Golden-section search on log T over [0.05, 20]. Falls back to T = 1 when it
// is at least as good as the search result.
TemperatureScale fit_temperature(const Tensor& val_logits, std::span<const int> val_labels);

}  // namespace calib2stage
