#include "calib2stage/checkpoint.hpp"

#include <cstring>

#include "calib2stage/errors.hpp"
#include "calib2stage/io.hpp"

namespace calib2stage {

using nlohmann::json;

std::string_view to_string(StageTag s) {
  switch (s) {
    case StageTag::stage1: return "stage1";
    case StageTag::tst: return "tst";
    case StageTag::vtst: return "vtst";
    case StageTag::e2e: return "e2e";
    case StageTag::var_e2e: return "var_e2e";
  }
  return "?";
}

StageTag parse_stage_tag(std::string_view s) {
  if (s == "stage1") return StageTag::stage1;
  if (s == "tst") return StageTag::tst;
  if (s == "vtst") return StageTag::vtst;
  if (s == "e2e") return StageTag::e2e;
  if (s == "var_e2e") return StageTag::var_e2e;
  throw ConfigError("unknown stage tag '" + std::string(s) + "'");
}

json spec_to_json(const ModelSpec& spec) {
  json conv = json::array();
  for (const auto& c : spec.conv) conv.push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel}});
  return {
      {"extractor", std::string(to_string(spec.extractor))},
      {"input_shape", spec.input_shape},
      {"hidden", spec.hidden},
      {"conv", conv},
      {"phi_hidden", spec.phi_hidden},
      {"z_dim", spec.z_dim},
      {"num_classes", spec.num_classes},
      {"head", std::string(to_string(spec.head))},
  };
}

namespace {

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw ParseError(path + " is not an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError("missing key '" + path + "." + key + "'");
  return *it;
}

template <class T>
T typed(const json& j, const std::string& key, const std::string& path) {
  try {
    return field(j, key, path).get<T>();
  } catch (const json::exception& e) {
    throw ParseError("bad value for '" + path + "." + key + "': " + e.what());
  }
}

}  // namespace

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  try {
    s.extractor = parse_extractor_kind(typed<std::string>(j, "extractor", "spec"));
    s.head = parse_head_kind(typed<std::string>(j, "head", "spec"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("spec: ") + e.what());
  }
  s.input_shape = typed<Shape>(j, "input_shape", "spec");
  s.hidden = typed<std::vector<std::size_t>>(j, "hidden", "spec");
  s.phi_hidden = typed<std::vector<std::size_t>>(j, "phi_hidden", "spec");
  s.z_dim = typed<std::size_t>(j, "z_dim", "spec");
  s.num_classes = typed<std::size_t>(j, "num_classes", "spec");
  const json& conv = field(j, "conv", "spec");
  if (!conv.is_array()) throw ParseError("'spec.conv' must be an array");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const std::string path = "spec.conv[" + std::to_string(i) + "]";
    s.conv.push_back({typed<std::size_t>(conv[i], "out_channels", path),
                      typed<std::size_t>(conv[i], "kernel", path)});
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("spec: ") + e.what());
  }
  return s;
}

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  json params = json::object();
  for (const auto& key : ckpt.model.param_keys()) {
    const Tensor& t = ckpt.model.param(key);
    params[key] = {{"shape", t.shape()}, {"data", t.values()}};
  }
  const json doc{
      {"spec", spec_to_json(ckpt.model.spec())},
      {"stage_tag", std::string(to_string(ckpt.stage))},
      {"seed", ckpt.seed},
      {"params", std::move(params)},
  };
  return doc.dump(1) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  StageTag stage;
  try {
    stage = parse_stage_tag(typed<std::string>(doc, "stage_tag", "checkpoint"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint.stage_tag: ") + e.what());
  }
  const auto seed = typed<std::uint64_t>(doc, "seed", "checkpoint");
  Model model = make_model_uninitialized(spec_from_json(field(doc, "spec", "checkpoint")));
  const json& params = field(doc, "params", "checkpoint");
  if (!params.is_object()) throw ParseError("'checkpoint.params' must be an object");

  for (const auto& key : model.param_keys()) {
    const std::string path = "params." + key;
    const auto it = params.find(key);
    if (it == params.end()) throw ParseError("missing key '" + path + "'");
    const Shape shape = typed<Shape>(*it, "shape", path);
    auto data = typed<std::vector<double>>(*it, "data", path);
    Tensor& dst = model.param(key);
    if (shape != dst.shape()) {
      throw ParseError("shape mismatch for '" + path + "': file has " + shape_to_string(shape) +
                       ", spec implies " + shape_to_string(dst.shape()));
    }
    if (data.size() != dst.size()) {
      throw ParseError("'" + path + ".data' has " + std::to_string(data.size()) +
                       " values, expected " + std::to_string(dst.size()));
    }
    dst = Tensor(shape, std::move(data));
  }
  for (auto it = params.begin(); it != params.end(); ++it) {
    if (!model.has_param(it.key())) throw ParseError("unexpected key 'params." + it.key() + "'");
  }
  if (is_two_stage(stage)) model.group(GroupName::beta).trainable = false;
  return Checkpoint{std::move(model), stage, seed};
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_string(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_string(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::uint64_t group_hash(const Model& model, GroupName group) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : model.group(group).params) {
    mix(name.data(), name.size());
    mix(t.raw(), t.size() * sizeof(double));
  }
  return h;
}

}  // namespace calib2stage
