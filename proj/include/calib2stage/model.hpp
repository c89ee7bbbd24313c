#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "calib2stage/autograd.hpp"
#include "calib2stage/tensor.hpp"

namespace calib2stage {

enum class ExtractorKind { dense, cnn };

// stage1: the initial FC layers (phi) trained jointly with the extractor.
// deterministic / gaussian: the Stage-2 heads [F -> 3Z -> Z] (+ twin for sigma).
enum class HeadKind { stage1, deterministic, gaussian };

// Parameter groups: feature extractor, head MLP, logits layer.
enum class GroupName { beta, theta, nu };

std::string_view to_string(ExtractorKind k);
std::string_view to_string(HeadKind k);
std::string_view to_string(GroupName g);
ExtractorKind parse_extractor_kind(std::string_view s);
HeadKind parse_head_kind(std::string_view s);

// conv(k x k, valid, stride 1) -> relu -> 2x2 max pool
struct ConvLayerSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct ModelSpec {
  ExtractorKind extractor = ExtractorKind::dense;
  Shape input_shape;                   // {d} for dense, {c, h, w} for cnn
  std::vector<std::size_t> hidden;     // dense extractor widths, relu after each
  std::vector<ConvLayerSpec> conv;     // cnn extractor layers
  std::vector<std::size_t> phi_hidden; // stage-1 FC hidden widths, relu after each
  std::size_t z_dim = 32;
  std::size_t num_classes = 2;
  HeadKind head = HeadKind::stage1;

  // Flattened extractor output width, derived from the layer list.
  std::size_t feature_dim() const;
  // Throws ConfigError on z_dim < 1, K < 2, or an infeasible layer list.
  void validate() const;

  static ModelSpec dense_mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                             std::size_t num_classes);
  // Conv(3,6,5) -> pool -> Conv(6,16,5) -> pool, then Linear(F,120), Linear(120,84), Linear(84,K).
  static ModelSpec small_cnn(Shape input_shape, std::size_t num_classes);

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct ParamGroup {
  GroupName name = GroupName::beta;
  std::map<std::string, Tensor> params;  // keyed "<layer>.<param>"
  bool trainable = true;
};

// Extractor (beta) + head MLP (theta) + logits layer (nu).
// Full parameter keys are "<group>.<layer>.<param>".
class Model {
 public:
  // Glorot-uniform weights, zero biases; deterministic for a fixed seed.
  Model(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }

  ParamGroup& group(GroupName g) { return groups_[static_cast<std::size_t>(g)]; }
  const ParamGroup& group(GroupName g) const { return groups_[static_cast<std::size_t>(g)]; }

  const Tensor& param(const std::string& key) const;
  Tensor& param(const std::string& key);
  bool has_param(const std::string& key) const;
  std::vector<std::string> param_keys() const;
  bool is_trainable(const std::string& key) const;
  std::size_t parameter_count() const;

  // Replace theta and nu with a freshly initialized head of the given kind
  // and latent width. beta is kept bit-identical and frozen.
  Model reinit_head(std::uint64_t seed, HeadKind head, std::size_t z_dim) const;

  // Inference helpers (no gradient): features and logits for a batch.
  Tensor features(const Tensor& x) const;
  // Deterministic heads only.
  Tensor logits(const Tensor& x) const;
  Tensor logits_from_features(const Tensor& features) const;
  // nu only: latent [batch x Z] -> logits.
  Tensor logits_from_latent(const Tensor& z) const;

 private:
  friend Model make_model_uninitialized(ModelSpec spec);
  explicit Model(ModelSpec spec);

  void init_group(GroupName g, std::uint64_t seed);
  void declare_layers();
  void add_dense(GroupName g, const std::string& layer, std::size_t in, std::size_t out);

  ModelSpec spec_;
  std::array<ParamGroup, 3> groups_;
};

// Shape-correct model with all parameters zero, for deserialization.
Model make_model_uninitialized(ModelSpec spec);

// Binds a model's parameters onto a tape on first use: trainable groups as
// gradient-reporting parameters, frozen groups as constants.
class BoundModel {
 public:
  BoundModel(const Model& model, Tape& tape) : model_(model), tape_(tape) {}

  Tape& tape() { return tape_; }
  const Model& model() const { return model_; }

  Var get(const std::string& key);

  // x is [batch x input_shape...]; output is [batch x feature_dim].
  Var features(const Var& x);
  // Stage-1 or deterministic head: features -> logits.
  Var deterministic_logits(const Var& features);
  // One theta branch of the head: "fc", "mu" or "sigma" -> [batch x Z].
  Var head_branch(const std::string& branch, const Var& features);
  // nu: latent -> logits.
  Var logits_layer(const Var& z);

 private:
  Var dense(const std::string& prefix, const Var& x);

  const Model& model_;
  Tape& tape_;
  std::map<std::string, Var> bound_;
};

}  // namespace calib2stage
