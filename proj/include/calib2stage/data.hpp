#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calib2stage/tensor.hpp"

namespace calib2stage {

enum class DataKind { vector, image };

struct Dataset {
  Tensor features;  // [n x d] for vectors, [n x c x h x w] for images
  std::vector<int> labels;
  std::size_t num_classes = 2;
  std::string name;
  DataKind kind = DataKind::vector;

  std::size_t size() const { return labels.size(); }
  // Shape of one example (features shape without the leading n).
  Shape example_shape() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  // Throws DataError on n == 0, label/feature count mismatch, out-of-range labels.
  void validate() const;
};

struct SplitSpec {
  double val_fraction = 0.15;
  std::uint64_t seed = 0;
  bool stratified = true;
};

struct ShiftSpec {
  std::vector<double> degrees{10.0, 45.0, 90.0, 135.0, 180.0};
};

// K points evenly spaced on a circle of the given radius in the first two
// coordinates of a `dim`-dimensional space.
std::vector<std::vector<double>> circle_centers(std::size_t num_classes, double radius,
                                                std::size_t dim = 2);

// Balanced isotropic Gaussian blobs. A label_noise_frac share of the labels
// (rounded to whole examples) is resampled uniformly over the K classes.
Dataset gen_blobs(std::size_t n, std::size_t num_classes,
                  const std::vector<std::vector<double>>& centers, double noise_sd,
                  double label_noise_frac, std::uint64_t seed);

// 3 x hw x hw images holding one bright bar through the centre at one of K
// orientations (class k at k * 180 / K degrees), plus Gaussian pixel noise,
// clamped to [0, 1].
Dataset gen_bar_images(std::size_t n, std::size_t num_classes, std::size_t hw, double noise_sd,
                       std::uint64_t seed);

// Bilinear rotation about the image centre with zero padding; labels unchanged.
Dataset rotate_images(const Dataset& ds, double degrees);
// Rotation of the first two feature coordinates about the origin.
Dataset rotate_vectors(const Dataset& ds, double degrees);
// Dispatches on ds.kind.
Dataset rotate(const Dataset& ds, double degrees);

// Disjoint, exhaustive, seed-deterministic split. The validation size is
// round(val_fraction * n); under stratification every class gets its
// largest-remainder share, so class proportions deviate by at most one example.
std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, const SplitSpec& spec);

// Seeded permutation of [0, n) cut into batches; the final partial batch is kept.
std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  std::uint64_t epoch_seed);

// IDX image file (magic 0x00000803, u8 pixels) plus IDX label file (magic
// 0x00000801). Pixels are scaled to [0, 1] and replicated to 3 channels.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

}  // namespace calib2stage
