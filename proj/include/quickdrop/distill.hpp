#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "quickdrop/autodiff.hpp"
#include "quickdrop/data.hpp"
#include "quickdrop/model.hpp"
#include "quickdrop/ops.hpp"
#include "quickdrop/rng.hpp"

namespace quickdrop {

/// Per-class synthetic samples. Each bucket is a trainable [m_c, C, H, W]
/// leaf whose label is implied by its key. Pixels are left unclamped while
/// optimising; clamp_pixels() gives a copy restricted to [0,1].
template <class T>
struct SyntheticDataset {
  ImageDims dims;
  std::size_t classes = 0;
  double scale = 100.0;
  std::map<int, Tensor<T>> buckets;

  bool has(int c) const { return buckets.contains(c); }

  std::size_t count(int c) const {
    auto it = buckets.find(c);
    return it == buckets.end() ? 0 : it->second.dim(0);
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [c, t] : buckets) n += t.dim(0);
    return n;
  }

  std::vector<int> held_classes() const {
    std::vector<int> out;
    for (const auto& [c, t] : buckets) out.push_back(c);
    return out;
  }

  bool bitwise_equal(const SyntheticDataset& other) const {
    if (buckets.size() != other.buckets.size()) return false;
    for (const auto& [c, t] : buckets) {
      auto it = other.buckets.find(c);
      if (it == other.buckets.end() || it->second.shape() != t.shape() ||
          it->second.vector() != t.vector()) {
        return false;
      }
    }
    return true;
  }

  SyntheticDataset clamp_pixels() const {
    SyntheticDataset out = *this;
    for (auto& [c, t] : out.buckets) {
      std::vector<T> v = t.vector();
      for (auto& x : v) x = std::clamp(x, T(0), T(1));
      t = Tensor<T>::from_values(t.shape(), std::move(v), true);
    }
    return out;
  }
};

/// Distilled size for a class holding n samples: max(1, floor(n / s)), or 0
/// for an absent class.
inline std::size_t synthetic_count(std::size_t n, double s) {
  if (n == 0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(n) / s)));
}

struct DistillConfig {
  std::size_t outer_steps = 200;
  std::size_t inner_steps = 50;
  std::size_t syn_steps = 1;
  double syn_lr = 0.1;
  double model_lr = 0.01;
  std::size_t real_batch_per_class = 256;
  double scale = 100.0;
  std::uint64_t seed = 0;

  /// Settings for distillation run separately from federated training.
  static DistillConfig standalone() {
    DistillConfig cfg;
    cfg.outer_steps = 500;
    return cfg;
  }
};

struct DistillCounters {
  /// One per (class, inner step) gradient-matching update.
  std::uint64_t match_steps = 0;
  /// Classes offered real data but holding no synthetic bucket.
  std::uint64_t skipped_classes = 0;
};

/// Epoch-style sampling without replacement within each class.
class ClassSampler {
 public:
  ClassSampler() = default;
  explicit ClassSampler(ClassIndex index)
      : index_(std::move(index)), order_(index_.size()), cursor_(index_.size(), 0) {}

  /// Row ids of the next min(batch, n_c) samples of class c.
  std::vector<std::size_t> next(std::size_t c, std::size_t batch, Rng& rng) {
    const auto& members = index_.at(c);
    const std::size_t n = members.size();
    if (n == 0) return {};
    auto& order = order_[c];
    if (batch >= n) {
      order = members;
      std::shuffle(order.begin(), order.end(), rng);
      return order;
    }
    if (order.size() != n || cursor_[c] + batch > n) {
      order = members;
      std::shuffle(order.begin(), order.end(), rng);
      cursor_[c] = 0;
    }
    std::vector<std::size_t> out(order.begin() + static_cast<std::ptrdiff_t>(cursor_[c]),
                                 order.begin() + static_cast<std::ptrdiff_t>(cursor_[c] + batch));
    cursor_[c] += batch;
    return out;
  }

  const ClassIndex& index() const { return index_; }

 private:
  ClassIndex index_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
};

/// Seeds each held class with max(1, floor(n_c / s)) distinct real samples.
template <class T>
SyntheticDataset<T> init_synthetic(const LabeledDataset& data, double s,
                                   std::uint64_t seed) {
  if (!(s > 0.0)) throw std::invalid_argument("init_synthetic: scale must be > 0");
  if (data.empty()) throw std::invalid_argument("init_synthetic: empty client dataset");
  SyntheticDataset<T> syn;
  syn.dims = data.dims;
  syn.classes = data.classes;
  syn.scale = s;
  Rng rng = make_rng(seed, "synthetic.init");
  const ClassIndex index = class_index(data);
  for (std::size_t c = 0; c < index.size(); ++c) {
    const std::size_t m = synthetic_count(index[c].size(), s);
    if (m == 0) continue;
    std::vector<std::size_t> rows;
    for (std::size_t pick : sample_without_replacement(index[c].size(), m, rng)) {
      rows.push_back(index[c][pick]);
    }
    syn.buckets.emplace(static_cast<int>(c), gather_images<T>(data, rows).detach(true));
  }
  return syn;
}

inline constexpr double kZeroRowGuard = 1e-10;

/// Layer-wise gradient distance: each tensor is viewed as (out, rest) rows
/// (rank-1 tensors form a single row) and contributes sum(1 - cos) over its
/// rows. Rows where either side has (near) zero norm contribute 0.
template <class T>
Tensor<T> grad_distance(const GradSet<T>& a, const GradSet<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("grad_distance: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + " tensors");
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].shape() != b[l].shape()) {
      throw ShapeError("grad_distance: tensor " + std::to_string(l) + " shape " +
                       shape_str(a[l].shape()) + " vs " + shape_str(b[l].shape()));
    }
    const std::size_t rows = a[l].rank() >= 2 ? a[l].dim(0) : 1;
    const std::size_t cols = a[l].numel() / rows;
    const Shape mat{rows, cols};
    const Shape col{rows, 1};
    Tensor<T> ra = reshape(a[l], mat);
    Tensor<T> rb = reshape(b[l], mat);
    Tensor<T> dot = sum_to(mul(ra, rb), col);
    Tensor<T> na2 = sum_to(mul(ra, ra), col);
    Tensor<T> nb2 = sum_to(mul(rb, rb), col);

    std::vector<T> guard(rows), valid(rows);
    std::size_t n_valid = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double prod = std::sqrt(static_cast<double>(na2.values()[r])) *
                          std::sqrt(static_cast<double>(nb2.values()[r]));
      const bool ok = prod > kZeroRowGuard;
      guard[r] = ok ? T(0) : T(1);
      valid[r] = ok ? T(1) : T(0);
      n_valid += ok;
    }
    if (n_valid == 0) continue;
    const Tensor<T> g = Tensor<T>::from_values(col, std::move(guard));
    const Tensor<T> v = Tensor<T>::from_values(col, std::move(valid));
    Tensor<T> denom = mul(sqrt(add(na2, g)), sqrt(add(nb2, g)));
    Tensor<T> cosine = mul(div(dot, denom), v);
    total = add(total, add_scalar(neg(sum(cosine)), static_cast<T>(n_valid)));
  }
  return total;
}

/// Concatenation of the selected buckets as a constant batch with labels.
template <class T>
std::pair<Tensor<T>, std::vector<int>> synthetic_batch(const SyntheticDataset<T>& syn,
                                                      const std::vector<int>& classes) {
  std::vector<T> values;
  std::vector<int> labels;
  for (int c : classes) {
    auto it = syn.buckets.find(c);
    if (it == syn.buckets.end()) continue;
    values.insert(values.end(), it->second.values().begin(), it->second.values().end());
    labels.insert(labels.end(), it->second.dim(0), c);
  }
  const ImageDims& d = syn.dims;
  return {Tensor<T>::from_values({labels.size(), d.channels, d.height, d.width},
                                 std::move(values)),
          std::move(labels)};
}

/// Gradient-matching update of one class bucket against a fixed real-data
/// gradient: syn_steps descent steps of size syn_lr on the pixels.
template <class T>
Tensor<T> match_class(const ParamSet<T>& params, const ArchSpec& spec,
                      const GradSet<T>& real_grad, int label, const Tensor<T>& bucket,
                      const DistillConfig& cfg) {
  std::vector<Tensor<T>> target;
  target.reserve(real_grad.size());
  for (const auto& g : real_grad) target.push_back(g.detach());
  const std::vector<int> labels(bucket.dim(0), label);
  const auto theta = params.tensors();
  Tensor<T> current = bucket.detach(true);
  for (std::size_t step = 0; step < cfg.syn_steps; ++step) {
    const Tensor<T> loss = cross_entropy(forward(params, spec, current), labels);
    const auto syn_grad = grad(loss, theta, GradOptions{.create_graph = true, .retain_graph = {}});
    const Tensor<T> distance = grad_distance(syn_grad, target);
    const Tensor<T> pixel_grad = hypergrad(distance, std::vector<Tensor<T>>{current})[0];
    std::vector<T> next = current.vector();
    const T lr = static_cast<T>(cfg.syn_lr);
    auto h = pixel_grad.values();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] -= lr * h[i];
    current = Tensor<T>::from_values(current.shape(), std::move(next), true);
  }
  return current;
}

/// Class-wise gradient matching at fixed parameters: every class present in
/// both `real_batches` and `syn` gets one match_class update.
template <class T>
void match_step(const ParamSet<T>& params, const ArchSpec& spec,
                const std::map<int, Tensor<T>>& real_batches, SyntheticDataset<T>& syn,
                const DistillConfig& cfg, DistillCounters& counters) {
  for (const auto& [c, images] : real_batches) {
    auto it = syn.buckets.find(c);
    if (it == syn.buckets.end()) {
      ++counters.skipped_classes;
      continue;
    }
    const std::vector<int> labels(images.dim(0), c);
    const GradSet<T> real_grad = loss_gradient(params, spec, images, labels);
    it->second = match_class(params, spec, real_grad, c, it->second, cfg);
    ++counters.match_steps;
  }
}

namespace detail {

// K outer loops from fresh initialisations, each with T inner steps of
// class-wise matching followed by a model step on the whole synthetic set.
template <class T>
void matching_loops(SyntheticDataset<T>& syn, const LabeledDataset& data,
                    const ArchSpec& spec, const DistillConfig& cfg,
                    std::size_t outer_steps, const std::string& stream,
                    DistillCounters& counters) {
  if (outer_steps == 0 || cfg.inner_steps == 0) return;
  ClassSampler sampler(class_index(data));
  Rng rng = make_rng(cfg.seed, stream + ".batches");
  const std::vector<int> held = syn.held_classes();
  for (std::size_t k = 0; k < outer_steps; ++k) {
    ParamSet<T> params =
        init_params<T>(spec, {derive_seed(cfg.seed, stream + ".init", k)});
    for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
      std::map<int, Tensor<T>> real;
      for (int c : held) {
        const auto rows = sampler.next(static_cast<std::size_t>(c), cfg.real_batch_per_class, rng);
        if (!rows.empty()) real.emplace(c, gather_images<T>(data, rows));
      }
      match_step(params, spec, real, syn, cfg, counters);
      const auto [batch, labels] = synthetic_batch(syn, held);
      params = apply_gradient(params, loss_gradient(params, spec, batch, labels),
                              cfg.model_lr);
    }
  }
}

}  // namespace detail

/// Dataset condensation from scratch: initialise from real samples, then run
/// cfg.outer_steps matching loops over fresh random initialisations.
template <class T>
SyntheticDataset<T> distill_standalone(const LabeledDataset& data, const ArchSpec& spec,
                                       const DistillConfig& cfg,
                                       DistillCounters* counters = nullptr) {
  DistillCounters local;
  DistillCounters& c = counters ? *counters : local;
  SyntheticDataset<T> syn = init_synthetic<T>(data, cfg.scale, cfg.seed);
  detail::matching_loops(syn, data, spec, cfg, cfg.outer_steps, "distill", c);
  return syn;
}

/// Further matching loops on an existing synthetic set; F = 0 is identity.
template <class T>
SyntheticDataset<T> fine_tune(const SyntheticDataset<T>& syn, const LabeledDataset& data,
                              const ArchSpec& spec, std::size_t steps,
                              const DistillConfig& cfg, DistillCounters* counters = nullptr) {
  DistillCounters local;
  DistillCounters& c = counters ? *counters : local;
  SyntheticDataset<T> out = syn;
  detail::matching_loops(out, data, spec, cfg, steps, "finetune", c);
  return out;
}

}  // namespace quickdrop
