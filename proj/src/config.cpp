#include "calib2stage/config.hpp"

#include <set>

#include "calib2stage/errors.hpp"
#include "calib2stage/io.hpp"

namespace calib2stage {

namespace {

using nlohmann::json;

std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

// Reads the keys of one JSON object and rejects any it did not read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const { return join_path(path_, key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    out = convert<T>(raw(key), key_path(key));
  }

  template <typename T>
  void read_optional(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    out = convert<T>(raw(key), key_path(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key_path(key) + "'");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("key '" + path + "': expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
        throw ConfigError("key '" + path + "': expected a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("key '" + path + "': expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("key '" + path + "': expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError("key '" + path + "': expected a list");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "key '" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

DatasetKind parse_dataset_kind(const std::string& s, const std::string& path) {
  if (s == "blobs") return DatasetKind::blobs;
  if (s == "bars") return DatasetKind::bars;
  if (s == "idx") return DatasetKind::idx;
  throw ConfigError("key '" + path + "': unknown dataset kind '" + s + "'");
}

DatasetConfig parse_dataset(const json& j, const std::string& path, const std::filesystem::path& base) {
  ObjectReader r(j, path);
  DatasetConfig d;
  std::string kind = "blobs";
  r.read("kind", kind);
  d.kind = parse_dataset_kind(kind, r.key_path("kind"));
  d.name = kind;
  r.read("name", d.name);
  r.read("num_classes", d.num_classes);
  r.read("n_train", d.n_train);
  r.read("n_test", d.n_test);
  r.read("seed", d.seed);
  r.read("test_seed", d.test_seed);
  r.read("noise_sd", d.noise_sd);
  switch (d.kind) {
    case DatasetKind::blobs:
      r.read("dim", d.dim);
      r.read("radius", d.radius);
      r.read("label_noise_frac", d.label_noise_frac);
      break;
    case DatasetKind::bars:
      r.read("hw", d.hw);
      break;
    case DatasetKind::idx: {
      for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
        if (!r.has(key)) throw ConfigError("missing key '" + r.key_path(key) + "'");
      }
      std::string s;
      r.read("train_images", s), d.train_images = resolve(base, s);
      r.read("train_labels", s), d.train_labels = resolve(base, s);
      r.read("test_images", s), d.test_images = resolve(base, s);
      r.read("test_labels", s), d.test_labels = resolve(base, s);
      break;
    }
  }
  r.finish();
  if (d.num_classes < 2) throw ConfigError("key '" + r.key_path("num_classes") + "': need at least 2 classes");
  return d;
}

void parse_train(const json& j, const std::string& path, TrainConfig& t) {
  ObjectReader r(j, path);
  r.read("learning_rate", t.learning_rate);
  r.read("batch_size", t.batch_size);
  r.read("max_epochs", t.max_epochs);
  r.read("patience", t.patience);
  r.read("train_m", t.train_m);
  r.read_optional("kl_scale", t.kl_scale);
  r.finish();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void parse_model(const json& j, const std::string& path, ModelSpec& m) {
  ObjectReader r(j, path);
  std::string extractor = "dense";
  r.read("extractor", extractor);
  m.extractor = parse_extractor_kind(extractor);
  if (m.extractor == ExtractorKind::cnn) {
    m.conv = {{6, 5}, {16, 5}};
    m.phi_hidden = {120, 84};
  } else {
    m.hidden = {256, 256, 256};
  }
  r.read("hidden", m.hidden);
  r.read("phi_hidden", m.phi_hidden);
  if (r.has("conv")) {
    const auto layers = ObjectReader::convert<std::vector<std::vector<std::size_t>>>(r.raw("conv"), r.key_path("conv"));
    m.conv.clear();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].size() != 2) {
        throw ConfigError("key '" + r.key_path("conv") + "[" + std::to_string(i) + "]': expected [out_channels, kernel]");
      }
      m.conv.push_back({layers[i][0], layers[i][1]});
    }
  }
  r.finish();
}

template <typename T>
void require_non_empty(const std::vector<T>& v, const std::string& key) {
  if (v.empty()) throw ConfigError("key '" + key + "': must not be empty");
}

}  // namespace

std::filesystem::path ExperimentConfig::stage1_path() const {
  if (stage1_checkpoint) return *stage1_checkpoint;
  return output_dir / ("stage1_seed" + std::to_string(stage1_seeds.front()) + ".json");
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j, const std::filesystem::path& base) {
  ExperimentConfig cfg;
  cfg.stage1.max_epochs = 200;
  cfg.e2e.max_epochs = 200;
  ObjectReader r(j, "");
  if (!r.has("output_dir")) throw ConfigError("missing key 'output_dir'");
  std::string out;
  r.read("output_dir", out);
  cfg.output_dir = resolve(base, out);

  if (r.has("dataset")) cfg.dataset = parse_dataset(r.raw("dataset"), "dataset", base);
  if (r.has("split")) {
    ObjectReader s(r.raw("split"), "split");
    s.read("val_fraction", cfg.split.val_fraction);
    s.read("seed", cfg.split.seed);
    s.read("stratified", cfg.split.stratified);
    s.finish();
    if (!(cfg.split.val_fraction > 0.0 && cfg.split.val_fraction < 1.0)) {
      throw ConfigError("key 'split.val_fraction': must lie in (0, 1)");
    }
  }
  r.read("rotations", cfg.rotations);
  if (r.has("ood")) {
    const json& list = r.raw("ood");
    if (!list.is_array()) throw ConfigError("key 'ood': expected a list");
    for (std::size_t i = 0; i < list.size(); ++i) {
      cfg.ood.push_back(parse_dataset(list[i], "ood[" + std::to_string(i) + "]", base));
    }
  }
  if (r.has("model")) parse_model(r.raw("model"), "model", cfg.model);
  else parse_model(json::object(), "model", cfg.model);

  if (r.has("train")) {
    ObjectReader t(r.raw("train"), "train");
    if (t.has("stage1")) parse_train(t.raw("stage1"), "train.stage1", cfg.stage1);
    if (t.has("stage2")) parse_train(t.raw("stage2"), "train.stage2", cfg.stage2);
    if (t.has("e2e")) parse_train(t.raw("e2e"), "train.e2e", cfg.e2e);
    t.finish();
  }
  r.read("stage1_seeds", cfg.stage1_seeds);
  r.read("seeds", cfg.seeds);
  r.read("z_dims", cfg.z_dims);
  r.read("m_values", cfg.m_values);
  if (r.has("stage1_checkpoint")) {
    std::string p;
    r.read("stage1_checkpoint", p);
    cfg.stage1_checkpoint = resolve(base, p);
  }
  r.read("checkpoints", cfg.checkpoints);
  r.read("eval_seed", cfg.eval_seed);
  if (r.has("ood_score")) {
    std::string s;
    r.read("ood_score", s);
    cfg.ood_score = parse_ood_score(s);
  }
  r.read("temperature_scaling", cfg.temperature_scaling);
  r.finish();

  require_non_empty(cfg.stage1_seeds, "stage1_seeds");
  require_non_empty(cfg.seeds, "seeds");
  require_non_empty(cfg.z_dims, "z_dims");
  require_non_empty(cfg.m_values, "m_values");
  for (std::size_t z : cfg.z_dims) {
    if (z < 1) throw ConfigError("key 'z_dims': latent widths must be >= 1");
  }
  for (std::size_t m : cfg.m_values) {
    if (m < 1) throw ConfigError("key 'm_values': sample counts must be >= 1");
  }
  // Shape checks against the dataset happen here so typos fail before training.
  if (auto shape = configured_example_shape(cfg.dataset)) stage1_model_spec(cfg, *shape);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

Dataset build_dataset(const DatasetConfig& d, bool test_part) {
  const std::size_t n = test_part ? d.n_test : d.n_train;
  const std::uint64_t seed = test_part ? d.test_seed : d.seed;
  Dataset ds;
  switch (d.kind) {
    case DatasetKind::blobs:
      ds = gen_blobs(n, d.num_classes, circle_centers(d.num_classes, d.radius, d.dim), d.noise_sd,
                     d.label_noise_frac, seed);
      break;
    case DatasetKind::bars:
      ds = gen_bar_images(n, d.num_classes, d.hw, d.noise_sd, seed);
      break;
    case DatasetKind::idx:
      ds = test_part ? load_idx(d.test_images, d.test_labels) : load_idx(d.train_images, d.train_labels);
      ds.num_classes = d.num_classes;
      break;
  }
  ds.name = d.name;
  ds.validate();
  return ds;
}

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  const Dataset full = build_dataset(cfg.dataset, false);
  auto [train, val] = train_val_split(full, cfg.split);
  ExperimentData out{{std::move(train), std::move(val)}, build_dataset(cfg.dataset, true), {}};
  for (const auto& d : cfg.ood) {
    Dataset o = build_dataset(d, true);
    if (o.example_shape() != out.test.example_shape()) {
      throw DataError("OOD dataset '" + d.name + "' has example shape " + shape_to_string(o.example_shape()) +
                      ", expected " + shape_to_string(out.test.example_shape()));
    }
    out.ood.push_back(std::move(o));
  }
  return out;
}

std::optional<Shape> configured_example_shape(const DatasetConfig& d) {
  switch (d.kind) {
    case DatasetKind::blobs: return Shape{d.dim};
    case DatasetKind::bars: return Shape{3, d.hw, d.hw};
    case DatasetKind::idx: break;
  }
  return std::nullopt;
}

ModelSpec stage1_model_spec(const ExperimentConfig& cfg, const Shape& example_shape) {
  ModelSpec s = cfg.model;
  s.num_classes = cfg.dataset.num_classes;
  s.head = HeadKind::stage1;
  s.input_shape = example_shape;
  if (s.extractor == ExtractorKind::dense && example_shape.size() != 1) {
    throw ConfigError("key 'model.extractor': a dense extractor needs vector data, got examples of shape " +
                      shape_to_string(example_shape));
  }
  if (s.extractor == ExtractorKind::cnn && example_shape.size() != 3) {
    throw ConfigError("key 'model.extractor': a cnn extractor needs c x h x w images, got " +
                      shape_to_string(example_shape));
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return s;
}

TrainConfig train_config_for(const ExperimentConfig& cfg, StageTag stage, std::uint64_t seed) {
  TrainConfig t;
  switch (stage) {
    case StageTag::stage1: t = cfg.stage1; break;
    case StageTag::tst:
    case StageTag::vtst: t = cfg.stage2; break;
    case StageTag::e2e:
    case StageTag::var_e2e: t = cfg.e2e; break;
  }
  t.loss_mode = stage == StageTag::vtst || stage == StageTag::var_e2e ? LossMode::elbo : LossMode::ce;
  t.seed = seed;
  return t;
}

}  // namespace calib2stage
