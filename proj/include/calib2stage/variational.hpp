#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "calib2stage/autograd.hpp"
#include "calib2stage/model.hpp"

namespace calib2stage {

// Diagonal Gaussian q(z|x) on a tape. The variance is bounded by 1:
// log_var = log_sigmoid(raw) so sigma^2 lies in (0, 1].
struct PosteriorVars {
  Var mu;       // [batch x Z]
  Var log_var;  // [batch x Z]
  Var sigma;    // exp(log_var / 2)
};

// Plain-value posterior, sigma in (0, 1].
struct GaussianPosterior {
  Tensor mu;
  Tensor sigma;
};

struct LatentSample {
  Var z;       // mu + sigma * eps
  Tensor eps;  // the standard-normal draw used
};

struct PredictConfig {
  std::size_t m = 1;        // MC samples at prediction time
  std::size_t train_m = 1;  // MC samples per step during training
  std::uint64_t seed = 0;
};

// mu = MLP_mu(features); log sigma^2 = log_sigmoid(MLP_sigma(features)).
PosteriorVars posterior_params(BoundModel& model, const Var& features);

// Per-example KL(q || N(0, I)) = 1/2 sum_i (mu_i^2 + sigma_i^2 - 1 - ln sigma_i^2) -> [batch].
Var kl_standard_normal(const Var& mu, const Var& log_var);
// Plain evaluation; throws ContractError when any sigma <= 0.
Tensor kl_standard_normal(const GaussianPosterior& q);

// Standard-normal tensor of the given shape.
Tensor standard_normal(const Shape& shape, std::mt19937_64& rng);

// z = mu + sigma * eps with gradients to mu and sigma.
LatentSample reparam_sample(const PosteriorVars& q, Tensor eps);
LatentSample reparam_sample(const PosteriorVars& q, std::mt19937_64& rng);

// MC estimate of E_q[softmax(logits(z))] over cfg.m samples, averaged in
// probability space. Example r of the batch draws its noise from a stream
// keyed by (cfg.seed, index_offset + r), so results do not depend on batching.
Tensor predictive_mc(const Model& model, const Tensor& x, const PredictConfig& cfg,
                     std::size_t index_offset = 0);
Tensor predictive_mc_from_features(const Model& model, const Tensor& features,
                                   const PredictConfig& cfg, std::size_t index_offset = 0);

// Same estimate with caller-supplied noise: one [batch x Z] tensor per sample.
Tensor predictive_with_eps(const Model& model, const Tensor& features, std::span<const Tensor> eps);

// Posterior for a feature batch, evaluated without gradients.
GaussianPosterior posterior_values(const Model& model, const Tensor& features);

}  // namespace calib2stage
