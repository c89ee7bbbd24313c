#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calib2stage/checkpoint.hpp"
#include "calib2stage/data.hpp"
#include "calib2stage/metrics.hpp"
#include "calib2stage/model.hpp"
#include "calib2stage/training.hpp"
#include "json.hpp"

namespace calib2stage {

enum class DatasetKind { blobs, bars, idx };

// How to build one dataset. Only the fields of the chosen kind are read.
struct DatasetConfig {
  DatasetKind kind = DatasetKind::blobs;
  std::string name = "blobs";
  std::size_t num_classes = 4;
  std::size_t n_train = 4000;
  std::size_t n_test = 4000;
  std::uint64_t seed = 1;       // training set
  std::uint64_t test_seed = 2;  // held-out test set
  // blobs
  std::size_t dim = 2;
  double radius = 3.0;
  double noise_sd = 1.0;
  double label_noise_frac = 0.0;
  // bars (noise_sd is shared with blobs)
  std::size_t hw = 16;
  // idx
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

struct ExperimentConfig {
  std::filesystem::path output_dir;
  DatasetConfig dataset;
  SplitSpec split;
  std::vector<double> rotations{10.0, 45.0, 90.0, 135.0, 180.0};
  std::vector<DatasetConfig> ood;  // test sets of each are used as OOD data

  ModelSpec model;  // input_shape and num_classes are filled from the dataset

  TrainConfig stage1;
  TrainConfig stage2;
  TrainConfig e2e;

  std::vector<std::uint64_t> stage1_seeds{0};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<std::size_t> z_dims{2, 8, 32, 128, 256, 512};
  std::vector<std::size_t> m_values{1, 10};
  std::optional<std::filesystem::path> stage1_checkpoint;
  std::vector<std::string> checkpoints;  // eval inputs; file names or globs under output_dir
  std::uint64_t eval_seed = 0;
  OodScore ood_score = OodScore::max_softmax;
  bool temperature_scaling = true;

  // Stage-1 checkpoint used by tst/vtst: the explicit path, else the first
  // stage-1 seed's file in output_dir.
  std::filesystem::path stage1_path() const;
};

// Relative paths resolve against base_dir. Unknown keys and type errors
// throw ConfigError naming the key path, e.g. "train.stage2.batch_size".
ExperimentConfig parse_experiment_config(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ExperimentData {
  TrainData data;
  Dataset test;
  std::vector<Dataset> ood;
};

// Throws DataError when a dataset cannot be built or loaded.
ExperimentData build_experiment_data(const ExperimentConfig& cfg);
Dataset build_dataset(const DatasetConfig& d, bool test_part);

// Example shape implied by a generator config; empty for loaded data.
std::optional<Shape> configured_example_shape(const DatasetConfig& d);

// Stage-1 architecture for examples of the given shape. Throws ConfigError.
ModelSpec stage1_model_spec(const ExperimentConfig& cfg, const Shape& example_shape);

// Training settings for a stage with the loss mode and seed filled in.
TrainConfig train_config_for(const ExperimentConfig& cfg, StageTag stage, std::uint64_t seed);

}  // namespace calib2stage
