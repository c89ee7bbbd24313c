#include "calib2stage/model.hpp"

#include <cmath>
#include <random>

#include "calib2stage/errors.hpp"
#include "calib2stage/rng.hpp"

namespace calib2stage {

std::string_view to_string(ExtractorKind k) { return k == ExtractorKind::dense ? "dense" : "cnn"; }

std::string_view to_string(HeadKind k) {
  switch (k) {
    case HeadKind::stage1: return "stage1";
    case HeadKind::deterministic: return "deterministic";
    case HeadKind::gaussian: return "gaussian";
  }
  return "?";
}

std::string_view to_string(GroupName g) {
  switch (g) {
    case GroupName::beta: return "beta";
    case GroupName::theta: return "theta";
    case GroupName::nu: return "nu";
  }
  return "?";
}

ExtractorKind parse_extractor_kind(std::string_view s) {
  if (s == "dense") return ExtractorKind::dense;
  if (s == "cnn") return ExtractorKind::cnn;
  throw ConfigError("unknown extractor kind '" + std::string(s) + "'");
}

HeadKind parse_head_kind(std::string_view s) {
  if (s == "stage1") return HeadKind::stage1;
  if (s == "deterministic") return HeadKind::deterministic;
  if (s == "gaussian") return HeadKind::gaussian;
  throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

std::size_t ModelSpec::feature_dim() const {
  if (extractor == ExtractorKind::dense) {
    return hidden.empty() ? input_shape.at(0) : hidden.back();
  }
  std::size_t c = input_shape.at(0), h = input_shape.at(1), w = input_shape.at(2);
  for (const auto& layer : conv) {
    c = layer.out_channels;
    h = (h - layer.kernel + 1) / 2;
    w = (w - layer.kernel + 1) / 2;
  }
  return c * h * w;
}

void ModelSpec::validate() const {
  if (z_dim < 1) throw ConfigError("model.z_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  for (auto w : hidden) {
    if (w == 0) throw ConfigError("model.hidden widths must be positive");
  }
  for (auto w : phi_hidden) {
    if (w == 0) throw ConfigError("model.phi_hidden widths must be positive");
  }
  if (extractor == ExtractorKind::dense) {
    if (input_shape.size() != 1 || input_shape[0] == 0) {
      throw ConfigError("dense extractor needs a 1-D positive input shape");
    }
    return;
  }
  if (input_shape.size() != 3 || shape_size(input_shape) == 0) {
    throw ConfigError("cnn extractor needs a {channels, height, width} input shape");
  }
  if (conv.empty()) throw ConfigError("cnn extractor needs at least one conv layer");
  std::size_t h = input_shape[1], w = input_shape[2];
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& layer = conv[i];
    const std::string where = "model.conv[" + std::to_string(i) + "]";
    if (layer.out_channels == 0 || layer.kernel == 0) throw ConfigError(where + " extents must be positive");
    if (layer.kernel > h || layer.kernel > w) throw ConfigError(where + " kernel larger than its input");
    h = h - layer.kernel + 1;
    w = w - layer.kernel + 1;
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError(where + " output is not poolable (odd extent)");
    h /= 2;
    w /= 2;
    if (h == 0 || w == 0) throw ConfigError(where + " pools to an empty map");
  }
}

ModelSpec ModelSpec::dense_mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                               std::size_t num_classes) {
  ModelSpec s;
  s.extractor = ExtractorKind::dense;
  s.input_shape = {input_dim};
  s.hidden = std::move(hidden);
  s.num_classes = num_classes;
  return s;
}

ModelSpec ModelSpec::small_cnn(Shape input_shape, std::size_t num_classes) {
  ModelSpec s;
  s.extractor = ExtractorKind::cnn;
  s.input_shape = std::move(input_shape);
  s.conv = {{6, 5}, {16, 5}};
  s.phi_hidden = {120, 84};
  s.num_classes = num_classes;
  return s;
}

// ---- Model ---------------------------------------------------------------

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  groups_[0].name = GroupName::beta;
  groups_[1].name = GroupName::theta;
  groups_[2].name = GroupName::nu;
  declare_layers();
}

Model::Model(ModelSpec spec, std::uint64_t seed) : Model(std::move(spec)) {
  init_group(GroupName::beta, seed);
  init_group(GroupName::theta, seed);
  init_group(GroupName::nu, seed);
}

Model make_model_uninitialized(ModelSpec spec) { return Model(std::move(spec)); }

void Model::add_dense(GroupName g, const std::string& layer, std::size_t in, std::size_t out) {
  group(g).params[layer + ".weight"] = Tensor({in, out}, 0.0);
  group(g).params[layer + ".bias"] = Tensor({out}, 0.0);
}

void Model::declare_layers() {
  for (auto& g : groups_) g.params.clear();
  if (spec_.extractor == ExtractorKind::dense) {
    std::size_t in = spec_.input_shape[0];
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
      add_dense(GroupName::beta, "dense" + std::to_string(i), in, spec_.hidden[i]);
      in = spec_.hidden[i];
    }
  } else {
    std::size_t c = spec_.input_shape[0];
    for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
      const auto& layer = spec_.conv[i];
      const std::string name = "conv" + std::to_string(i);
      group(GroupName::beta).params[name + ".kernel"] =
          Tensor({layer.out_channels, c, layer.kernel, layer.kernel}, 0.0);
      group(GroupName::beta).params[name + ".bias"] = Tensor({layer.out_channels}, 0.0);
      c = layer.out_channels;
    }
  }

  const std::size_t f = spec_.feature_dim();
  const std::size_t z = spec_.z_dim;
  std::size_t logits_in = z;
  switch (spec_.head) {
    case HeadKind::stage1: {
      std::size_t in = f;
      for (std::size_t i = 0; i < spec_.phi_hidden.size(); ++i) {
        add_dense(GroupName::theta, "phi" + std::to_string(i), in, spec_.phi_hidden[i]);
        in = spec_.phi_hidden[i];
      }
      logits_in = in;
      break;
    }
    case HeadKind::deterministic:
      add_dense(GroupName::theta, "fc0", f, 3 * z);
      add_dense(GroupName::theta, "fc1", 3 * z, z);
      break;
    case HeadKind::gaussian:
      add_dense(GroupName::theta, "mu0", f, 3 * z);
      add_dense(GroupName::theta, "mu1", 3 * z, z);
      add_dense(GroupName::theta, "sigma0", f, 3 * z);
      add_dense(GroupName::theta, "sigma1", 3 * z, z);
      break;
  }
  add_dense(GroupName::nu, "logits", logits_in, spec_.num_classes);
}

void Model::init_group(GroupName g, std::uint64_t seed) {
  const std::string prefix = std::string(to_string(g)) + ".";
  for (auto& [name, tensor] : group(g).params) {
    const Shape& s = tensor.shape();
    if (s.size() == 1) {
      tensor.fill(0.0);
      continue;
    }
    // Dense weights are [in, out]; conv kernels are [out, in, k, k].
    double fan_in, fan_out;
    if (s.size() == 2) {
      fan_in = static_cast<double>(s[0]);
      fan_out = static_cast<double>(s[1]);
    } else {
      const double receptive = static_cast<double>(s[2] * s[3]);
      fan_in = static_cast<double>(s[1]) * receptive;
      fan_out = static_cast<double>(s[0]) * receptive;
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    auto rng = keyed_engine(seed, prefix + name);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : tensor.data()) v = u(rng);
  }
}

namespace {

std::pair<GroupName, std::string> split_key(const std::string& key) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ContractError("parameter key without group: " + key);
  const std::string g = key.substr(0, dot);
  GroupName group;
  if (g == "beta") group = GroupName::beta;
  else if (g == "theta") group = GroupName::theta;
  else if (g == "nu") group = GroupName::nu;
  else throw ContractError("unknown parameter group in key: " + key);
  return {group, key.substr(dot + 1)};
}

}  // namespace

const Tensor& Model::param(const std::string& key) const {
  const auto [g, local] = split_key(key);
  const auto& params = group(g).params;
  const auto it = params.find(local);
  if (it == params.end()) throw ContractError("no parameter named " + key);
  return it->second;
}

Tensor& Model::param(const std::string& key) {
  return const_cast<Tensor&>(static_cast<const Model&>(*this).param(key));
}

bool Model::has_param(const std::string& key) const {
  try {
    const auto [g, local] = split_key(key);
    return group(g).params.contains(local);
  } catch (const ContractError&) {
    return false;
  }
}

std::vector<std::string> Model::param_keys() const {
  std::vector<std::string> keys;
  for (const auto& g : groups_) {
    for (const auto& [name, _] : g.params) keys.push_back(std::string(to_string(g.name)) + "." + name);
  }
  return keys;
}

bool Model::is_trainable(const std::string& key) const {
  return group(split_key(key).first).trainable;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups_) {
    for (const auto& [_, t] : g.params) n += t.size();
  }
  return n;
}

Model Model::reinit_head(std::uint64_t seed, HeadKind head, std::size_t z_dim) const {
  ModelSpec s = spec_;
  s.head = head;
  s.z_dim = z_dim;
  Model out(std::move(s));
  out.group(GroupName::beta) = group(GroupName::beta);
  out.group(GroupName::beta).trainable = false;
  out.init_group(GroupName::theta, seed);
  out.init_group(GroupName::nu, seed);
  return out;
}

Tensor Model::features(const Tensor& x) const {
  Tape tape;
  BoundModel bound(*this, tape);
  return bound.features(tape.constant(x)).value();
}

Tensor Model::logits(const Tensor& x) const {
  Tape tape;
  BoundModel bound(*this, tape);
  return bound.deterministic_logits(bound.features(tape.constant(x))).value();
}

Tensor Model::logits_from_features(const Tensor& features) const {
  Tape tape;
  BoundModel bound(*this, tape);
  return bound.deterministic_logits(tape.constant(features)).value();
}

Tensor Model::logits_from_latent(const Tensor& z) const {
  Tape tape;
  BoundModel bound(*this, tape);
  return bound.logits_layer(tape.constant(z)).value();
}

// ---- BoundModel ------------------------------------------------------------

Var BoundModel::get(const std::string& key) {
  if (auto it = bound_.find(key); it != bound_.end()) return it->second;
  const Tensor& value = model_.param(key);
  Var v = model_.is_trainable(key) ? tape_.parameter(value, key) : tape_.constant(value);
  bound_.emplace(key, v);
  return v;
}

Var BoundModel::dense(const std::string& prefix, const Var& x) {
  return add_bias(matmul(x, get(prefix + ".weight")), get(prefix + ".bias"));
}

Var BoundModel::features(const Var& x) {
  const ModelSpec& s = model_.spec();
  Shape expected{x.shape().at(0)};
  expected.insert(expected.end(), s.input_shape.begin(), s.input_shape.end());
  if (x.shape() != expected) {
    throw DimensionError("model input shape " + shape_to_string(x.shape()) + ", expected " +
                         shape_to_string(expected));
  }
  const std::size_t batch = expected[0];
  if (s.extractor == ExtractorKind::dense) {
    Var h = x;
    for (std::size_t i = 0; i < s.hidden.size(); ++i) {
      h = relu(dense("beta.dense" + std::to_string(i), h));
    }
    return h;
  }
  Var h = x;
  for (std::size_t i = 0; i < s.conv.size(); ++i) {
    const std::string name = "beta.conv" + std::to_string(i);
    h = maxpool2d(relu(conv2d(h, get(name + ".kernel"), get(name + ".bias"))));
  }
  return reshape(h, Shape{batch, s.feature_dim()});
}

Var BoundModel::head_branch(const std::string& branch, const Var& features) {
  return dense("theta." + branch + "1", relu(dense("theta." + branch + "0", features)));
}

Var BoundModel::logits_layer(const Var& z) { return dense("nu.logits", z); }

Var BoundModel::deterministic_logits(const Var& features) {
  const ModelSpec& s = model_.spec();
  if (features.shape().size() != 2 || features.shape()[1] != s.feature_dim()) {
    throw DimensionError("feature shape " + shape_to_string(features.shape()) +
                         " does not match feature_dim " + std::to_string(s.feature_dim()));
  }
  switch (s.head) {
    case HeadKind::stage1: {
      Var h = features;
      for (std::size_t i = 0; i < s.phi_hidden.size(); ++i) {
        h = relu(dense("theta.phi" + std::to_string(i), h));
      }
      return logits_layer(h);
    }
    case HeadKind::deterministic:
      return logits_layer(head_branch("fc", features));
    case HeadKind::gaussian:
      break;
  }
  throw ContractError("deterministic_logits called on a gaussian-head model");
}

}  // namespace calib2stage
