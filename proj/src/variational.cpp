#include "calib2stage/variational.hpp"

#include <cmath>

#include "calib2stage/errors.hpp"
#include "calib2stage/rng.hpp"

namespace calib2stage {

PosteriorVars posterior_params(BoundModel& model, const Var& features) {
  if (model.model().spec().head != HeadKind::gaussian) {
    throw ContractError("posterior_params requires a gaussian head");
  }
  Var mu = model.head_branch("mu", features);
  Var log_var = log_sigmoid(model.head_branch("sigma", features));
  Var sigma = exp(scale(log_var, 0.5));
  return {mu, log_var, sigma};
}

Var kl_standard_normal(const Var& mu, const Var& log_var) {
  Var terms = sub(add_scalar(add(square(mu), exp(log_var)), -1.0), log_var);
  return scale(row_sum(terms), 0.5);
}

Tensor kl_standard_normal(const GaussianPosterior& q) {
  if (q.mu.shape() != q.sigma.shape() || q.mu.rank() != 2) {
    throw DimensionError("posterior mu/sigma must share a [batch x Z] shape");
  }
  const std::size_t batch = q.mu.dim(0), z = q.mu.dim(1);
  Tensor kl({batch}, 0.0);
  for (std::size_t r = 0; r < batch; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < z; ++i) {
      const double sd = q.sigma.at(r, i);
      if (!(sd > 0.0)) throw ContractError("posterior sigma must be positive");
      const double var = sd * sd;
      const double mu = q.mu.at(r, i);
      s += mu * mu + var - 1.0 - std::log(var);
    }
    kl[r] = 0.5 * s;
  }
  return kl;
}

Tensor standard_normal(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(shape);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

LatentSample reparam_sample(const PosteriorVars& q, Tensor eps) {
  if (eps.shape() != q.mu.shape()) throw DimensionError("eps shape must match mu");
  Tape& tape = q.mu.tape();
  Var z = add(q.mu, mul(q.sigma, tape.constant(eps)));
  return {z, std::move(eps)};
}

LatentSample reparam_sample(const PosteriorVars& q, std::mt19937_64& rng) {
  return reparam_sample(q, standard_normal(q.mu.shape(), rng));
}

GaussianPosterior posterior_values(const Model& model, const Tensor& features) {
  Tape tape;
  BoundModel bound(model, tape);
  const PosteriorVars q = posterior_params(bound, tape.constant(features));
  return {q.mu.value(), q.sigma.value()};
}

namespace {

// probs[r, :] += softmax(z[r, :] W + b) / m for every row.
void accumulate_softmax(const Model& model, const Tensor& z, double weight, Tensor& probs) {
  const Tensor logits = model.logits_from_latent(z);
  const Tensor p = softmax_rows(logits);
  for (std::size_t i = 0; i < p.size(); ++i) probs[i] += weight * p[i];
}

}  // namespace

Tensor predictive_with_eps(const Model& model, const Tensor& features, std::span<const Tensor> eps) {
  if (eps.empty()) throw ContractError("predictive needs at least one sample");
  const GaussianPosterior q = posterior_values(model, features);
  Tensor probs({q.mu.dim(0), model.spec().num_classes}, 0.0);
  const double weight = 1.0 / static_cast<double>(eps.size());
  for (const Tensor& e : eps) {
    if (e.shape() != q.mu.shape()) throw DimensionError("eps shape must match mu");
    Tensor z = q.mu;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += q.sigma[i] * e[i];
    accumulate_softmax(model, z, weight, probs);
  }
  return probs;
}

Tensor predictive_mc_from_features(const Model& model, const Tensor& features,
                                   const PredictConfig& cfg, std::size_t index_offset) {
  if (cfg.m < 1) throw ContractError("predictive requires m >= 1");
  const GaussianPosterior q = posterior_values(model, features);
  const std::size_t batch = q.mu.dim(0), zdim = q.mu.dim(1);
  // eps[j][r, :] comes from example r's own stream, samples in order.
  std::vector<Tensor> eps(cfg.m, Tensor({batch, zdim}));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < batch; ++r) {
    auto rng = keyed_engine(cfg.seed, index_offset + r);
    for (std::size_t j = 0; j < cfg.m; ++j) {
      for (std::size_t i = 0; i < zdim; ++i) eps[j].at(r, i) = normal(rng);
    }
  }
  Tensor probs({batch, model.spec().num_classes}, 0.0);
  const double weight = 1.0 / static_cast<double>(cfg.m);
  for (const Tensor& e : eps) {
    Tensor z = q.mu;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += q.sigma[i] * e[i];
    accumulate_softmax(model, z, weight, probs);
  }
  return probs;
}

Tensor predictive_mc(const Model& model, const Tensor& x, const PredictConfig& cfg,
                     std::size_t index_offset) {
  return predictive_mc_from_features(model, model.features(x), cfg, index_offset);
}

}  // namespace calib2stage
