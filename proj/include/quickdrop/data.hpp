#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "quickdrop/image.hpp"
#include "quickdrop/rng.hpp"
#include "quickdrop/tensor.hpp"

namespace quickdrop {

/// Labelled images with pixels in [0,1]. `ids` are stable sample identifiers
/// carried through partitioning and subsetting.
struct LabeledDataset {
  ImageDims dims;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::size_t> ids;
  std::size_t classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  std::span<const float> sample(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * dims.size(), dims.size());
  }

  void push_back(std::span<const float> image, int label, std::size_t id) {
    pixels.insert(pixels.end(), image.begin(), image.end());
    labels.push_back(label);
    ids.push_back(id);
  }

  /// Empty dataset with the same layout and class count.
  LabeledDataset empty_like(std::string tag) const {
    LabeledDataset out;
    out.dims = dims;
    out.classes = classes;
    out.provenance = std::move(tag);
    return out;
  }

  LabeledDataset select(std::span<const std::size_t> rows, std::string tag) const {
    LabeledDataset out = empty_like(std::move(tag));
    out.pixels.reserve(rows.size() * dims.size());
    for (std::size_t r : rows) out.push_back(sample(r), labels[r], ids[r]);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  /// Throws if labels, ids and pixels disagree or a label is out of range.
  void validate() const {
    if (pixels.size() != labels.size() * dims.size() || ids.size() != labels.size()) {
      throw std::invalid_argument("dataset '" + provenance + "': inconsistent sizes");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
        throw std::invalid_argument("dataset '" + provenance + "': label " +
                                    std::to_string(labels[i]) + " at sample " +
                                    std::to_string(i) + " outside [0," +
                                    std::to_string(classes) + ")");
      }
    }
  }
};

/// Sample ids grouped by label; together they partition [0, size).
using ClassIndex = std::vector<std::vector<std::size_t>>;

inline ClassIndex class_index(const LabeledDataset& data) {
  ClassIndex index(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    index[static_cast<std::size_t>(data.labels[i])].push_back(i);
  }
  return index;
}

/// Rows of `data` as a [n, C, H, W] tensor.
template <class T>
Tensor<T> gather_images(const LabeledDataset& data, std::span<const std::size_t> rows) {
  const std::size_t d = data.dims.size();
  std::vector<T> values(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = data.sample(rows[i]);
    std::transform(src.begin(), src.end(), values.begin() + static_cast<std::ptrdiff_t>(i * d),
                   [](float v) { return static_cast<T>(v); });
  }
  return Tensor<T>::from_values(
      {rows.size(), data.dims.channels, data.dims.height, data.dims.width},
      std::move(values));
}

template <class T>
Tensor<T> all_images(const LabeledDataset& data) {
  std::vector<std::size_t> rows(data.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return gather_images<T>(data, rows);
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& path, std::size_t offset, const std::string& what)
      : std::runtime_error(path + " @ byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(path, 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes,
                               std::size_t offset, const std::string& path) {
  if (bytes.size() < offset + 4) {
    throw IdxError(path, bytes.size(),
                   "truncated header: missing " +
                       std::to_string(offset + 4 - bytes.size()) + " bytes");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

/// Parses an IDX image/label file pair (big-endian, unsigned byte payload).
inline LabeledDataset load_idx(const std::string& images_path,
                               const std::string& labels_path,
                               std::size_t classes = 10) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  const std::uint32_t img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImagesMagic) {
    throw IdxError(images_path, 0, "bad magic for images");
  }
  const std::uint32_t lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelsMagic) {
    throw IdxError(labels_path, 0, "bad magic for labels");
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw IdxError(labels_path, 4,
                   "label count " + std::to_string(n_labels) +
                       " does not match image count " + std::to_string(n));
  }
  const std::size_t img_need = 16 + n * rows * cols;
  if (img.size() < img_need) {
    throw IdxError(images_path, img.size(),
                   "truncated payload: missing " +
                       std::to_string(img_need - img.size()) + " bytes");
  }
  const std::size_t lab_need = 8 + n;
  if (lab.size() < lab_need) {
    throw IdxError(labels_path, lab.size(),
                   "truncated payload: missing " +
                       std::to_string(lab_need - lab.size()) + " bytes");
  }

  LabeledDataset data;
  data.dims = {1, rows, cols};
  data.classes = classes;
  data.provenance = images_path;
  data.pixels.resize(n * rows * cols);
  for (std::size_t i = 0; i < data.pixels.size(); ++i) {
    data.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  data.labels.resize(n);
  data.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char y = lab[8 + i];
    if (y >= classes) {
      throw IdxError(labels_path, 8 + i,
                     "label " + std::to_string(y) + " outside [0," +
                         std::to_string(classes) + ")");
    }
    data.labels[i] = y;
    data.ids[i] = i;
  }
  return data;
}

/// Stratified random subset keeping ceil(fraction * n_c) samples per class.
inline LabeledDataset stratified_subset(const LabeledDataset& data, double fraction,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("subset fraction must be in (0,1]");
  }
  Rng rng = make_rng(seed, "subset");
  std::vector<std::size_t> rows;
  for (const auto& members : class_index(data)) {
    const auto keep = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(members.size())));
    for (std::size_t pick : sample_without_replacement(members.size(), keep, rng)) {
      rows.push_back(members[pick]);
    }
  }
  std::sort(rows.begin(), rows.end());
  return data.select(rows, data.provenance + "[subset]");
}

// ---------------------------------------------------------------------------
// Gaussian blobs
// ---------------------------------------------------------------------------

struct BlobSpec {
  std::size_t classes = 10;
  std::size_t per_class = 100;
  ImageDims dims{1, 8, 8};
  /// Distance between class means in units of the noise deviation.
  double separation = 3.0;
  double noise = 0.1;
};

/// Gaussian clusters around per-class means placed at distance
/// `separation * noise` from one another (exactly for two classes, on average
/// for more), clipped to [0,1]. Means depend only on `seed`, so train and
/// test splits drawn with different `split` values share the same clusters.
inline LabeledDataset synth_blobs(const BlobSpec& spec, std::uint64_t seed,
                                  std::uint64_t split = 0) {
  if (!(spec.separation >= 0.0) || spec.classes < 1 || spec.dims.size() == 0) {
    throw std::invalid_argument("synth_blobs: invalid arguments");
  }
  const std::size_t d = spec.dims.size();
  Rng mean_rng = make_rng(seed, "blobs.means");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> directions(spec.classes, std::vector<double>(d));
  for (auto& dir : directions) {
    double norm = 0.0;
    for (auto& v : dir) {
      v = gauss(mean_rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : dir) v /= norm;
  }
  // Two clusters sit antipodally so their distance is exact.
  if (spec.classes == 2) {
    for (std::size_t j = 0; j < d; ++j) directions[1][j] = -directions[0][j];
  }
  const double radius = spec.classes == 2
                            ? spec.separation * spec.noise / 2.0
                            : spec.separation * spec.noise / std::sqrt(2.0);

  LabeledDataset data;
  data.dims = spec.dims;
  data.classes = spec.classes;
  data.provenance = "blobs";
  data.pixels.reserve(spec.classes * spec.per_class * d);
  Rng rng = make_rng(seed, "blobs.samples", split);
  std::vector<float> image(d);
  std::size_t id = split * spec.classes * spec.per_class;
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t j = 0; j < d; ++j) {
        const double v = 0.5 + radius * directions[c][j] + spec.noise * gauss(rng);
        image[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      data.push_back(image, static_cast<int>(c), id++);
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning
// ---------------------------------------------------------------------------

enum class PartitionMode {
  /// For each class, proportions over clients ~ Dir(alpha).
  per_class,
  /// For each client, proportions over classes ~ Dir(alpha); each class is
  /// then split across clients in proportion to those weights.
  per_client,
};

struct PartitionPlan {
  double alpha = 0.1;  // +inf selects an exact uniform split
  std::size_t clients = 1;
  std::uint64_t seed = 0;
  PartitionMode mode = PartitionMode::per_class;
  std::size_t attempts = 1;
  /// counts[client][class]
  std::vector<std::vector<std::size_t>> counts;
};

struct Partition {
  std::vector<LabeledDataset> clients;
  PartitionPlan plan;
};

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kMaxPartitionAttempts = 100;

namespace detail {

inline std::vector<double> dirichlet(std::size_t k, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double total = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    total += v;
  }
  if (total <= 0.0) {
    // All draws underflowed (tiny alpha): put the mass on one uniform pick.
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    std::fill(p.begin(), p.end(), 0.0);
    p[pick(rng)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

// Returns owner client per row of the dataset.
inline std::vector<std::size_t> assign_clients(const LabeledDataset& data,
                                               const ClassIndex& index,
                                               std::size_t n, double alpha,
                                               PartitionMode mode, Rng& rng) {
  std::vector<std::size_t> owner(data.size(), 0);
  if (std::isinf(alpha)) {
    std::size_t offset = 0;
    for (const auto& members : index) {
      std::vector<std::size_t> order = members;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < order.size(); ++i) owner[order[i]] = (offset + i) % n;
      offset = (offset + order.size()) % n;
    }
    return owner;
  }
  std::vector<std::vector<double>> client_weights;
  if (mode == PartitionMode::per_client) {
    for (std::size_t i = 0; i < n; ++i) {
      client_weights.push_back(dirichlet(index.size(), alpha, rng));
    }
  }
  for (std::size_t c = 0; c < index.size(); ++c) {
    if (index[c].empty()) continue;
    std::vector<double> p;
    if (mode == PartitionMode::per_class) {
      p = dirichlet(n, alpha, rng);
    } else {
      p.resize(n);
      for (std::size_t i = 0; i < n; ++i) p[i] = client_weights[i][c];
      if (std::all_of(p.begin(), p.end(), [](double v) { return v <= 0.0; })) {
        std::fill(p.begin(), p.end(), 1.0);
      }
    }
    std::discrete_distribution<std::size_t> draw(p.begin(), p.end());
    for (std::size_t row : index[c]) owner[row] = draw(rng);
  }
  return owner;
}

}  // namespace detail

/// Splits `data` over `n` clients. Each sample is assigned to exactly one
/// client; draws that leave a client empty are repeated with the next
/// attempt's stream, up to kMaxPartitionAttempts.
inline Partition dirichlet_partition(const LabeledDataset& data, std::size_t n,
                                     double alpha, std::uint64_t seed,
                                     PartitionMode mode = PartitionMode::per_class) {
  if (n == 0) throw std::invalid_argument("dirichlet_partition: need >= 1 client");
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  if (data.size() < n) {
    throw PartitionError("dirichlet_partition: " + std::to_string(data.size()) +
                         " samples cannot fill " + std::to_string(n) + " clients");
  }
  const ClassIndex index = class_index(data);
  for (std::size_t attempt = 0; attempt < kMaxPartitionAttempts; ++attempt) {
    Rng rng = make_rng(seed, "partition", attempt);
    const auto owner = detail::assign_clients(data, index, n, alpha, mode, rng);
    std::vector<std::vector<std::size_t>> rows(n);
    for (std::size_t r = 0; r < owner.size(); ++r) rows[owner[r]].push_back(r);
    if (std::any_of(rows.begin(), rows.end(), [](const auto& v) { return v.empty(); })) {
      continue;
    }
    Partition out;
    out.plan = {alpha, n, seed, mode, attempt + 1, {}};
    for (std::size_t i = 0; i < n; ++i) {
      out.clients.push_back(data.select(rows[i], "client" + std::to_string(i)));
      out.plan.counts.push_back(out.clients.back().class_counts());
    }
    return out;
  }
  throw PartitionError("dirichlet_partition: a client stayed empty after " +
                       std::to_string(kMaxPartitionAttempts) + " attempts");
}

}  // namespace quickdrop
