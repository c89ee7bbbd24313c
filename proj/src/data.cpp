#include "calib2stage/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "calib2stage/errors.hpp"

namespace calib2stage {

Shape Dataset::example_shape() const {
  return Shape(features.shape().begin() + 1, features.shape().end());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.features = features.gather_rows(indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels.at(i));
  out.num_classes = num_classes;
  out.name = name;
  out.kind = kind;
  return out;
}

void Dataset::validate() const {
  if (labels.empty()) throw DataError("dataset '" + name + "' is empty");
  if (features.empty() || features.dim(0) != labels.size()) {
    throw DataError("dataset '" + name + "': feature rows do not match label count");
  }
  if (num_classes < 2) throw DataError("dataset '" + name + "': need at least two classes");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("dataset '" + name + "': label " + std::to_string(y) + " out of range");
    }
  }
  if (kind == DataKind::image && features.rank() != 4) {
    throw DataError("dataset '" + name + "': image features must be [n x c x h x w]");
  }
}

std::vector<std::vector<double>> circle_centers(std::size_t num_classes, double radius,
                                                std::size_t dim) {
  if (dim < 2) throw DataError("circle_centers needs dim >= 2");
  std::vector<std::vector<double>> centers(num_classes, std::vector<double>(dim, 0.0));
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / num_classes;
    centers[k][0] = radius * std::cos(angle);
    centers[k][1] = radius * std::sin(angle);
  }
  return centers;
}

Dataset gen_blobs(std::size_t n, std::size_t num_classes,
                  const std::vector<std::vector<double>>& centers, double noise_sd,
                  double label_noise_frac, std::uint64_t seed) {
  if (num_classes < 2) throw DataError("gen_blobs: need K >= 2");
  if (n == 0) throw DataError("gen_blobs: need n >= 1");
  if (!(noise_sd > 0.0)) throw DataError("gen_blobs: noise_sd must be positive");
  if (!(label_noise_frac >= 0.0 && label_noise_frac < 0.5)) {
    throw DataError("gen_blobs: label_noise_frac must lie in [0, 0.5)");
  }
  if (centers.size() != num_classes) throw DataError("gen_blobs: need one center per class");
  const std::size_t dim = centers.front().size();
  if (dim == 0) throw DataError("gen_blobs: centers must be non-empty");
  for (const auto& c : centers) {
    if (c.size() != dim) throw DataError("gen_blobs: centers differ in dimension");
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset ds;
  ds.features = Tensor({n, dim});
  ds.labels.resize(n);
  ds.num_classes = num_classes;
  ds.name = "blobs";
  ds.kind = DataKind::vector;
  std::normal_distribution<double> noise(0.0, noise_sd);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = order[i] % num_classes;
    ds.labels[i] = static_cast<int>(k);
    for (std::size_t d = 0; d < dim; ++d) ds.features.at(i, d) = centers[k][d] + noise(rng);
  }

  const auto noisy = static_cast<std::size_t>(std::llround(label_noise_frac * static_cast<double>(n)));
  std::vector<std::size_t> pick(n);
  std::iota(pick.begin(), pick.end(), 0);
  std::shuffle(pick.begin(), pick.end(), rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(num_classes) - 1);
  for (std::size_t i = 0; i < noisy; ++i) ds.labels[pick[i]] = label(rng);
  return ds;
}

Dataset gen_bar_images(std::size_t n, std::size_t num_classes, std::size_t hw, double noise_sd,
                       std::uint64_t seed) {
  if (hw < 12) throw DataError("gen_bar_images: hw must be >= 12");
  if (num_classes < 2) throw DataError("gen_bar_images: need K >= 2");
  if (n == 0) throw DataError("gen_bar_images: need n >= 1");
  if (noise_sd < 0.0) throw DataError("gen_bar_images: noise_sd must be >= 0");

  // One template per class.
  const double center = (static_cast<double>(hw) - 1.0) / 2.0;
  const double half_length = 0.35 * static_cast<double>(hw);
  const double half_width = 1.0;
  std::vector<std::vector<double>> templates(num_classes, std::vector<double>(hw * hw, 0.0));
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double angle = std::numbers::pi * static_cast<double>(k) / num_classes;
    const double ux = std::cos(angle), uy = std::sin(angle);
    for (std::size_t y = 0; y < hw; ++y) {
      for (std::size_t x = 0; x < hw; ++x) {
        const double dx = static_cast<double>(x) - center, dy = static_cast<double>(y) - center;
        const double along = dx * ux + dy * uy;
        const double across = -dx * uy + dy * ux;
        if (std::abs(along) <= half_length && std::abs(across) <= half_width) {
          templates[k][y * hw + x] = 1.0;
        }
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  Dataset ds;
  ds.features = Tensor({n, 3, hw, hw});
  ds.labels.resize(n);
  ds.num_classes = num_classes;
  ds.name = "bars";
  ds.kind = DataKind::image;
  std::normal_distribution<double> noise(0.0, noise_sd > 0.0 ? noise_sd : 1.0);
  const std::size_t plane = hw * hw;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = order[i] % num_classes;
    ds.labels[i] = static_cast<int>(k);
    double* img = ds.features.raw() + i * 3 * plane;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        double v = templates[k][p];
        if (noise_sd > 0.0) v += noise(rng);
        img[c * plane + p] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return ds;
}

namespace {

// cos/sin with exact values at multiples of 90 degrees.
std::pair<double, double> cos_sin_degrees(double degrees) {
  const double quarter = degrees / 90.0;
  if (quarter == std::floor(quarter)) {
    const long q = ((static_cast<long>(quarter) % 4) + 4) % 4;
    constexpr double c[4] = {1.0, 0.0, -1.0, 0.0};
    constexpr double s[4] = {0.0, 1.0, 0.0, -1.0};
    return {c[q], s[q]};
  }
  const double rad = degrees * std::numbers::pi / 180.0;
  return {std::cos(rad), std::sin(rad)};
}

}  // namespace

Dataset rotate_images(const Dataset& ds, double degrees) {
  if (ds.kind != DataKind::image) throw ContractError("rotate_images requires an image dataset");
  if (degrees == 0.0) return ds;
  const std::size_t n = ds.features.dim(0), channels = ds.features.dim(1);
  const std::size_t h = ds.features.dim(2), w = ds.features.dim(3);
  const auto [c, s] = cos_sin_degrees(degrees);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;

  Dataset out = ds;
  const std::size_t plane = h * w;
  for (std::size_t img = 0; img < n * channels; ++img) {
    const double* src = ds.features.raw() + img * plane;
    double* dst = out.features.raw() + img * plane;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        // Inverse map: where does output pixel (x, y) come from?
        const double sx = cx + c * dx + s * dy;
        const double sy = cy - s * dx + c * dy;
        const double fx0 = std::floor(sx), fy0 = std::floor(sy);
        const double ax = sx - fx0, ay = sy - fy0;
        auto tap = [&](double yy, double xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<double>(h) || xx >= static_cast<double>(w)) return 0.0;
          return src[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        };
        double v = 0.0;
        if ((1 - ax) * (1 - ay) != 0.0) v += (1 - ax) * (1 - ay) * tap(fy0, fx0);
        if (ax * (1 - ay) != 0.0) v += ax * (1 - ay) * tap(fy0, fx0 + 1);
        if ((1 - ax) * ay != 0.0) v += (1 - ax) * ay * tap(fy0 + 1, fx0);
        if (ax * ay != 0.0) v += ax * ay * tap(fy0 + 1, fx0 + 1);
        dst[y * w + x] = v;
      }
    }
  }
  return out;
}

Dataset rotate_vectors(const Dataset& ds, double degrees) {
  if (ds.kind != DataKind::vector) throw ContractError("rotate_vectors requires a vector dataset");
  if (ds.features.rank() != 2 || ds.features.dim(1) < 2) {
    throw ContractError("rotate_vectors needs at least two feature coordinates");
  }
  if (degrees == 0.0) return ds;
  const auto [c, s] = cos_sin_degrees(degrees);
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x = ds.features.at(i, 0), y = ds.features.at(i, 1);
    out.features.at(i, 0) = c * x - s * y;
    out.features.at(i, 1) = s * x + c * y;
  }
  return out;
}

Dataset rotate(const Dataset& ds, double degrees) {
  return ds.kind == DataKind::image ? rotate_images(ds, degrees) : rotate_vectors(ds, degrees);
}

std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, const SplitSpec& spec) {
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0)) {
    throw ConfigError("split.val_fraction must lie in (0, 1)");
  }
  const std::size_t n = ds.size();
  const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
  if (n_val == 0 || n_val >= n) throw DataError("dataset too small to split with this fraction");
  std::mt19937_64 rng(spec.seed);

  std::vector<std::size_t> val_idx;
  if (!spec.stratified) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    val_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  } else {
    std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
    for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    // Largest-remainder apportionment of n_val across classes.
    std::vector<std::size_t> quota(ds.num_classes, 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
      const std::size_t nk = by_class[k].size();
      if (nk == 0) continue;
      if (nk < 2) {
        throw DataError("class " + std::to_string(k) + " has fewer than 2 examples; cannot stratify");
      }
      const double exact = static_cast<double>(n_val) * static_cast<double>(nk) / static_cast<double>(n);
      quota[k] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[k];
      remainders.emplace_back(exact - std::floor(exact), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < n_val && i < remainders.size(); ++i, ++assigned) {
      ++quota[remainders[i].second];
    }
    for (std::size_t k = 0; k < ds.num_classes; ++k) {
      auto& members = by_class[k];
      if (members.empty()) continue;
      const std::size_t q = std::clamp<std::size_t>(quota[k], 1, members.size() - 1);
      std::shuffle(members.begin(), members.end(), rng);
      val_idx.insert(val_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(q));
    }
  }

  std::sort(val_idx.begin(), val_idx.end());
  std::vector<std::size_t> train_idx;
  train_idx.reserve(n - val_idx.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (j < val_idx.size() && val_idx[j] == i) {
      ++j;
    } else {
      train_idx.push_back(i);
    }
  }
  Dataset train = ds.subset(train_idx);
  Dataset val = ds.subset(val_idx);
  train.name = ds.name + "/train";
  val.name = ds.name + "/val";
  return {std::move(train), std::move(val)};
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

namespace {

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw ParseError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex;
  os.width(8);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = read_all(images_path);
  const std::string lab = read_all(labels_path);

  const std::uint32_t img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803u) {
    throw ParseError(images_path.string() + ": bad magic " + hex(img_magic) +
                     " at offset 0 (expected 0x00000803)");
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801u) {
    throw ParseError(labels_path.string() + ": bad magic " + hex(lab_magic) +
                     " at offset 0 (expected 0x00000801)");
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw ParseError("image count " + std::to_string(n) + " does not match label count " +
                     std::to_string(n_labels));
  }
  if (n == 0 || rows == 0 || cols == 0) throw ParseError(images_path.string() + ": empty image set");
  const std::size_t plane = rows * cols;
  if (img.size() - 16 < n * plane) {
    throw ParseError(images_path.string() + ": truncated payload at offset 16: expected " +
                     std::to_string(n * plane) + " bytes, found " + std::to_string(img.size() - 16));
  }
  if (lab.size() - 8 < n) {
    throw ParseError(labels_path.string() + ": truncated payload at offset 8: expected " +
                     std::to_string(n) + " bytes, found " + std::to_string(lab.size() - 8));
  }

  Dataset ds;
  ds.features = Tensor({n, 3, rows, cols});
  ds.labels.resize(n);
  ds.kind = DataKind::image;
  ds.name = images_path.stem().string();
  int max_label = 1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
    for (std::size_t p = 0; p < plane; ++p) {
      const double v = static_cast<unsigned char>(img[16 + i * plane + p]) / 255.0;
      for (std::size_t c = 0; c < 3; ++c) ds.features[(i * 3 + c) * plane + p] = v;
    }
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

}  // namespace calib2stage
