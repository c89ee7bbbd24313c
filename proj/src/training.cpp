#include "calib2stage/training.hpp"

#include <algorithm>
#include <cmath>

#include "calib2stage/errors.hpp"
#include "calib2stage/kernels.hpp"
#include "calib2stage/rng.hpp"

namespace calib2stage {

std::string_view to_string(LossMode m) { return m == LossMode::ce ? "ce" : "elbo"; }

LossMode parse_loss_mode(std::string_view s) {
  if (s == "ce") return LossMode::ce;
  if (s == "elbo") return LossMode::elbo;
  throw ConfigError("unknown loss mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (train_m < 1) throw ConfigError("train_m must be >= 1");
  if (kl_scale && !(*kl_scale > 0.0)) throw ConfigError("kl_scale must be positive");
}

// ---- losses ----------------------------------------------------------------

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t k) {
  if (labels.size() != rows) throw DimensionError("one label per row required");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}

}  // namespace

Var cross_entropy_loss(const Var& logits, std::span<const int> labels) {
  check_labels(labels, logits.shape()[0], logits.shape()[1]);
  return scale(mean(pick(log_softmax(logits), labels)), -1.0);
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_labels(labels, logits.dim(0), logits.dim(1));
  const Tensor lp = log_softmax_rows(logits);
  double s = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) s -= lp.at(r, static_cast<std::size_t>(labels[r]));
  return s / static_cast<double>(labels.size());
}

ElboTerms elbo_loss(BoundModel& model, const Var& features, std::span<const int> labels,
                    double kl_scale, std::vector<Tensor> eps) {
  if (eps.empty()) throw ContractError("elbo needs at least one MC sample");
  const PosteriorVars q = posterior_params(model, features);
  Var ce;
  for (std::size_t j = 0; j < eps.size(); ++j) {
    const LatentSample s = reparam_sample(q, eps[j]);
    Var cj = cross_entropy_loss(model.logits_layer(s.z), labels);
    ce = j == 0 ? cj : add(ce, cj);
  }
  if (eps.size() > 1) ce = scale(ce, 1.0 / static_cast<double>(eps.size()));
  Var kl = mean(kl_standard_normal(q.mu, q.log_var));
  Var loss = add(ce, scale(kl, kl_scale));
  return {loss, ce, kl, std::move(eps)};
}

ElboTerms elbo_loss(BoundModel& model, const Var& features, std::span<const int> labels,
                    double kl_scale, std::size_t samples, std::mt19937_64& rng) {
  const Shape shape{features.shape()[0], model.model().spec().z_dim};
  std::vector<Tensor> eps;
  for (std::size_t j = 0; j < samples; ++j) eps.push_back(standard_normal(shape, rng));
  return elbo_loss(model, features, labels, kl_scale, std::move(eps));
}

double elbo_value(const Model& model, const Tensor& features, std::span<const int> labels,
                  double kl_scale, std::span<const Tensor> eps) {
  if (eps.empty()) throw ContractError("elbo needs at least one MC sample");
  const GaussianPosterior q = posterior_values(model, features);
  double ce = 0.0;
  for (const Tensor& e : eps) {
    Tensor z = q.mu;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += q.sigma[i] * e[i];
    ce += cross_entropy(model.logits_from_latent(z), labels);
  }
  ce /= static_cast<double>(eps.size());
  const Tensor kl = kl_standard_normal(q);
  double kl_mean = 0.0;
  for (double v : kl.data()) kl_mean += v;
  kl_mean /= static_cast<double>(kl.size());
  return ce + kl_scale * kl_mean;
}

// ---- optimizer -------------------------------------------------------------

namespace {

kernels::AdamCoefficients next_coefficients(AdamState& state, double lr) {
  ++state.t;
  const double t = static_cast<double>(state.t);
  return {lr, state.beta1, state.beta2, state.eps, 1.0 - std::pow(state.beta1, t),
          1.0 - std::pow(state.beta2, t)};
}

void update_one(const std::string& key, Tensor& param, const Tensor& grad, AdamState& state,
                const kernels::AdamCoefficients& coef) {
  if (grad.shape() != param.shape()) {
    throw DimensionError("gradient shape for '" + key + "' does not match the parameter");
  }
  auto [mi, fresh_m] = state.m.try_emplace(key, param.shape(), 0.0);
  auto [vi, fresh_v] = state.v.try_emplace(key, param.shape(), 0.0);
  kernels::active().adam_update(param.size(), param.raw(), grad.raw(), mi->second.raw(),
                                vi->second.raw(), coef);
}

}  // namespace

void adam_step(std::map<std::string, Tensor>& params, const GradientMap& grads, AdamState& state,
               double lr) {
  const auto coef = next_coefficients(state, lr);
  for (const auto& [key, g] : grads) {
    auto it = params.find(key);
    if (it == params.end()) throw ContractError("gradient for unknown parameter '" + key + "'");
    update_one(key, it->second, g, state, coef);
  }
}

void adam_step(Model& model, const GradientMap& grads, AdamState& state, double lr) {
  for (const auto& [key, g] : grads) {
    if (!model.is_trainable(key)) throw ContractError("gradient for frozen parameter '" + key + "'");
  }
  const auto coef = next_coefficients(state, lr);
  for (const auto& [key, g] : grads) update_one(key, model.param(key), g, state, coef);
}

bool EarlyStopState::update(double val_loss, const Model& model, std::size_t epoch) {
  if (val_loss < best_val_loss) {
    best_val_loss = val_loss;
    best_model = model;
    best_epoch = epoch;
    epochs_since_improve = 0;
    return true;
  }
  ++epochs_since_improve;
  return false;
}

// ---- procedures ------------------------------------------------------------

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return keyed_engine(seed, purpose)();
}

// Per-batch noise stream: (seed, epoch, batch index).
std::vector<Tensor> draw_eps(std::uint64_t seed, std::size_t epoch, std::size_t batch,
                             std::size_t samples, const Shape& shape) {
  auto rng = keyed_engine(seed, epoch, batch);
  std::vector<Tensor> eps;
  for (std::size_t j = 0; j < samples; ++j) eps.push_back(standard_normal(shape, rng));
  return eps;
}

// What one training loop needs to know about its inputs and head.
struct LoopSpec {
  bool from_features = false;  // inputs are cached extractor features
  bool variational = false;
  StageTag stage = StageTag::stage1;
};

double validation_loss(const Model& model, const Tensor& inputs, std::span<const int> labels,
                       const LoopSpec& loop, const TrainConfig& cfg,
                       std::span<const Tensor> val_eps) {
  constexpr std::size_t kChunk = 1024;
  const std::size_t n = labels.size();
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    const Tensor x = inputs.slice_rows(start, end);
    const Tensor f = loop.from_features ? x : model.features(x);
    const auto y = labels.subspan(start, end - start);
    double part;
    if (loop.variational) {
      std::vector<Tensor> eps;
      for (const Tensor& e : val_eps) eps.push_back(e.slice_rows(start, end));
      part = elbo_value(model, f, y, cfg.kl_weight(model.spec().z_dim), eps);
    } else {
      part = cross_entropy(model.logits_from_features(f), y);
    }
    total += part * static_cast<double>(end - start);
  }
  return total / static_cast<double>(n);
}

TrainResult train_loop(Model model, const Tensor& train_x, std::span<const int> train_y,
                       const Tensor& val_x, std::span<const int> val_y, const TrainConfig& cfg,
                       const LoopSpec& loop, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_y.empty()) throw DataError("training set is empty");
  if (val_y.empty()) throw DataError("validation set is empty");
  if (loop.variational && model.spec().head != HeadKind::gaussian) {
    throw ContractError("ELBO training needs a gaussian head");
  }
  const std::size_t z = model.spec().z_dim;
  const double kl_scale = cfg.kl_weight(z);
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "shuffle");
  const std::uint64_t noise_seed = derive_seed(cfg.seed, "noise");

  // Fixed validation noise keeps the early-stopping signal comparable across epochs.
  std::vector<Tensor> val_eps;
  if (loop.variational) {
    auto rng = keyed_engine(derive_seed(cfg.seed, "val-noise"), 0);
    for (std::size_t j = 0; j < cfg.train_m; ++j) {
      val_eps.push_back(standard_normal({val_y.size(), z}, rng));
    }
  }

  AdamState adam;
  EarlyStopState stop;
  std::vector<EpochLog> history;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches = minibatches(train_y.size(), cfg.batch_size, keyed_engine(shuffle_seed, epoch)());
    double train_total = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = train_y[idx[i]];
      Tape tape;
      BoundModel bound(model, tape);
      Var x = tape.constant(train_x.gather_rows(idx));
      Var f = loop.from_features ? x : bound.features(x);
      Var loss;
      if (loop.variational) {
        loss = elbo_loss(bound, f, y, kl_scale,
                         draw_eps(noise_seed, epoch, b, cfg.train_m, {idx.size(), z}))
                   .loss;
      } else {
        loss = cross_entropy_loss(bound.deterministic_logits(f), y);
      }
      const GradientMap grads = tape.backward(loss);
      adam_step(model, grads, adam, cfg.learning_rate);
      train_total += loss.value()[0] * static_cast<double>(idx.size());
    }
    EpochLog log{epoch, train_total / static_cast<double>(train_y.size()),
                 validation_loss(model, val_x, val_y, loop, cfg, val_eps)};
    if (!std::isfinite(log.train_loss) || !std::isfinite(log.val_loss)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
    }
    history.push_back(log);
    if (on_epoch) on_epoch(log);
    stop.update(log.val_loss, model, epoch);
    if (stop.exhausted(cfg.patience)) break;
  }
  return {Checkpoint{std::move(*stop.best_model), loop.stage, cfg.seed}, std::move(history),
          stop.best_epoch, stop.best_val_loss};
}

}  // namespace

TrainResult run_stage1(Model model, const TrainData& data, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  if (cfg.loss_mode != LossMode::ce) throw ConfigError("stage 1 trains with the ce loss");
  if (model.spec().head != HeadKind::stage1) throw ContractError("stage 1 expects a stage1 head");
  data.train.validate();
  data.val.validate();
  for (auto g : {GroupName::beta, GroupName::theta, GroupName::nu}) model.group(g).trainable = true;
  return train_loop(std::move(model), data.train.features, data.train.labels, data.val.features,
                    data.val.labels, cfg, {false, false, StageTag::stage1}, on_epoch);
}

TrainResult run_stage2(const Checkpoint& stage1, const TrainData& data, const TrainConfig& cfg,
                       HeadKind head, std::size_t z_dim, const EpochCallback& on_epoch) {
  if (stage1.stage != StageTag::stage1) {
    throw ContractError("stage 2 needs a stage1 checkpoint, got " + std::string(to_string(stage1.stage)));
  }
  if (head == HeadKind::stage1) throw ContractError("stage 2 head must be deterministic or gaussian");
  const bool variational = head == HeadKind::gaussian;
  if ((cfg.loss_mode == LossMode::elbo) != variational) {
    throw ConfigError("loss mode " + std::string(to_string(cfg.loss_mode)) + " does not match head " +
                      std::string(to_string(head)));
  }
  data.train.validate();
  data.val.validate();
  Model model = stage1.model.reinit_head(cfg.seed, head, z_dim);
  // beta is frozen, so its features are computed once.
  const Tensor train_f = model.features(data.train.features);
  const Tensor val_f = model.features(data.val.features);
  const StageTag tag = variational ? StageTag::vtst : StageTag::tst;
  return train_loop(std::move(model), train_f, data.train.labels, val_f, data.val.labels, cfg,
                    {true, variational, tag}, on_epoch);
}

TrainResult run_end_to_end(ModelSpec spec, const TrainData& data, const TrainConfig& cfg,
                           HeadKind head, std::size_t z_dim, const EpochCallback& on_epoch) {
  if (head == HeadKind::stage1) throw ContractError("end-to-end head must be deterministic or gaussian");
  const bool variational = head == HeadKind::gaussian;
  if ((cfg.loss_mode == LossMode::elbo) != variational) {
    throw ConfigError("loss mode " + std::string(to_string(cfg.loss_mode)) + " does not match head " +
                      std::string(to_string(head)));
  }
  data.train.validate();
  data.val.validate();
  spec.head = head;
  spec.z_dim = z_dim;
  Model model(spec, cfg.seed);
  const StageTag tag = variational ? StageTag::var_e2e : StageTag::e2e;
  return train_loop(std::move(model), data.train.features, data.train.labels, data.val.features,
                    data.val.labels, cfg, {false, variational, tag}, on_epoch);
}

// ---- temperature scaling ---------------------------------------------------

Tensor softmax_at_temperature(const Tensor& logits, double T) {
  if (!(T > 0.0)) throw ContractError("temperature must be positive");
  Tensor scaled = logits;
  for (auto& v : scaled.data()) v /= T;
  return softmax_rows(scaled);
}

double nll_at_temperature(const Tensor& logits, std::span<const int> labels, double T) {
  if (!(T > 0.0)) throw ContractError("temperature must be positive");
  Tensor scaled = logits;
  for (auto& v : scaled.data()) v /= T;
  return cross_entropy(scaled, labels);
}

TemperatureScale fit_temperature(const Tensor& val_logits, std::span<const int> val_labels) {
  if (val_labels.empty()) throw DataError("temperature fit needs at least one example");
  auto f = [&](double log_t) { return nll_at_temperature(val_logits, val_labels, std::exp(log_t)); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(kMinTemperature), b = std::log(kMaxTemperature);
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  // Width 1e-4 in log T is a 1e-4 relative tolerance on T.
  while (b - a > 1e-4) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  const double t_star = std::exp((a + b) / 2.0);
  // Differences at round-off level count as ties and keep T = 1.
  const double at_one = f(0.0);
  const double slack = 1e-12 * std::max(1.0, std::abs(at_one));
  return {at_one <= f(std::log(t_star)) + slack ? 1.0 : t_star};
}

}  // namespace calib2stage
