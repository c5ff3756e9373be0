#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "quickdrop/autodiff.hpp"
#include "quickdrop/image.hpp"
#include "quickdrop/ops.hpp"
#include "quickdrop/rng.hpp"
#include "quickdrop/tensor.hpp"

namespace quickdrop {

enum class ArchKind { mlp, convnet };
enum class NormKind { none, instance };
enum class Activation { relu, tanh };
enum class LayerRole : std::uint8_t { conv = 0, norm = 1, linear = 2 };

inline const char* to_string(ArchKind k) {
  return k == ArchKind::mlp ? "mlp" : "convnet";
}
inline const char* to_string(NormKind k) {
  return k == NormKind::none ? "none" : "instancenorm";
}
inline const char* to_string(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

/// Network description. The convnet is [conv3x3(W) -> norm -> act ->
/// avgpool] x depth followed by a linear classifier; the mlp is a stack of
/// fully connected layers over the flattened input.
struct ArchSpec {
  ArchKind kind = ArchKind::mlp;
  ImageDims input{1, 28, 28};
  std::size_t classes = 10;
  std::vector<std::size_t> hidden{64};
  std::size_t depth = 2;
  std::size_t width = 16;
  std::size_t kernel = 3;
  NormKind norm = NormKind::instance;
  Activation activation = Activation::relu;
  std::size_t pool = 2;

  /// The reference ConvNet: 3 blocks of 128 filters on 3x32x32 inputs.
  static ArchSpec reference_convnet(std::size_t classes = 10) {
    ArchSpec spec;
    spec.kind = ArchKind::convnet;
    spec.input = {3, 32, 32};
    spec.classes = classes;
    spec.depth = 3;
    spec.width = 128;
    return spec;
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> errors;
    if (input.size() == 0) errors.push_back("input dims must be positive");
    if (classes < 2) errors.push_back("classes must be >= 2");
    if (kind == ArchKind::mlp) {
      for (std::size_t h : hidden) {
        if (h == 0) errors.push_back("hidden sizes must be positive");
      }
      return errors;
    }
    if (depth == 0) errors.push_back("depth must be positive");
    if (width == 0) errors.push_back("width must be positive");
    if (kernel % 2 == 0) errors.push_back("kernel must be odd");
    if (pool < 1) errors.push_back("pool must be >= 1");
    if (depth > 0 && pool >= 1) {
      std::size_t factor = 1;
      for (std::size_t i = 0; i < depth; ++i) factor *= pool;
      if (input.height % factor != 0 || input.width % factor != 0) {
        std::size_t max_depth = 0;
        for (std::size_t f = pool; pool > 1 && input.height % f == 0 &&
                                   input.width % f == 0;
             f *= pool) {
          ++max_depth;
        }
        std::ostringstream msg;
        msg << "input " << input.height << "x" << input.width
            << " not divisible by " << pool << "^" << depth << "=" << factor
            << "; use depth <= " << max_depth;
        errors.push_back(msg.str());
      }
    }
    return errors;
  }

  /// Length of the vector entering the final linear layer.
  std::size_t feature_dim() const {
    if (kind == ArchKind::mlp) {
      return hidden.empty() ? input.size() : hidden.back();
    }
    std::size_t h = input.height, w = input.width;
    for (std::size_t i = 0; i < depth; ++i) {
      h /= pool;
      w /= pool;
    }
    return width * h * w;
  }

  std::string canonical() const {
    std::ostringstream out;
    out << to_string(kind) << ";in=" << input.str() << ";classes=" << classes
        << ";act=" << to_string(activation);
    if (kind == ArchKind::mlp) {
      out << ";hidden=";
      for (std::size_t i = 0; i < hidden.size(); ++i) {
        out << (i ? "," : "") << hidden[i];
      }
    } else {
      out << ";depth=" << depth << ";width=" << width << ";kernel=" << kernel
          << ";norm=" << to_string(norm) << ";pool=" << pool;
    }
    return out.str();
  }

  std::uint64_t digest() const { return fnv1a(canonical()); }
};

struct InitDistribution {
  std::uint64_t seed = 0;
};

template <class T>
struct Param {
  std::string name;
  LayerRole role;
  Tensor<T> value;
};

/// Ordered named parameters; the order is fixed by the architecture.
template <class T>
struct ParamSet {
  std::vector<Param<T>> entries;

  std::size_t size() const { return entries.size(); }
  const Param<T>& operator[](std::size_t i) const { return entries[i]; }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.value);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.value.numel();
    return n;
  }

  /// Same names and roles, new trainable leaves with the given values.
  ParamSet with_values(std::vector<std::vector<T>> values) const {
    ParamSet out;
    out.entries.reserve(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      out.entries.push_back(
          {entries[i].name, entries[i].role,
           Tensor<T>::from_values(entries[i].value.shape(),
                                  std::move(values[i]), true)});
    }
    return out;
  }

  bool bitwise_equal(const ParamSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (entries[i].value.shape() != other.entries[i].value.shape()) return false;
      if (entries[i].value.vector() != other.entries[i].value.vector()) return false;
    }
    return true;
  }
};

/// One tensor per ParamSet entry, same order and shapes.
template <class T>
using GradSet = std::vector<Tensor<T>>;

/// theta - rate * g, returned as fresh trainable leaves. A negative rate
/// gives gradient ascent.
template <class T>
ParamSet<T> apply_gradient(const ParamSet<T>& params, const GradSet<T>& grads,
                           double rate) {
  if (grads.size() != params.size()) {
    throw ShapeError("apply_gradient: gradient count mismatch");
  }
  const T r = static_cast<T>(rate);
  std::vector<std::vector<T>> values(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.values();
    auto g = grads[i].values();
    if (p.size() != g.size()) throw ShapeError("apply_gradient: shape mismatch");
    values[i].resize(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) values[i][j] = p[j] - r * g[j];
  }
  return params.with_values(std::move(values));
}

namespace detail {

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from_values(std::move(shape), std::move(values), true);
}

template <class T>
void push_linear(ParamSet<T>& params, const std::string& prefix,
                 std::size_t in, std::size_t out, LayerRole role,
                 Shape weight_shape, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  params.entries.push_back(
      {prefix + ".weight", role, uniform_tensor<T>(std::move(weight_shape), bound, rng)});
  params.entries.push_back({prefix + ".bias", role, uniform_tensor<T>({out}, bound, rng)});
}

}  // namespace detail

/// Kaiming-uniform weights and biases (bound 1/sqrt(fan_in)), norm affine
/// at gamma=1, beta=0. Values are drawn in double, so float and double
/// parameter sets from the same seed agree up to rounding.
template <class T>
ParamSet<T> init_params(const ArchSpec& spec, InitDistribution dist) {
  if (auto errors = spec.validate(); !errors.empty()) {
    throw ShapeError("invalid architecture: " + errors.front());
  }
  Rng rng(dist.seed);
  ParamSet<T> params;
  if (spec.kind == ArchKind::mlp) {
    std::size_t in = spec.input.size();
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const std::size_t out = spec.hidden[i];
      detail::push_linear(params, "fc" + std::to_string(i), in, out,
                          LayerRole::linear, {out, in}, rng);
      in = out;
    }
    detail::push_linear(params, "head", in, spec.classes, LayerRole::linear,
                        {spec.classes, in}, rng);
    return params;
  }
  std::size_t channels = spec.input.channels;
  for (std::size_t d = 0; d < spec.depth; ++d) {
    const std::string block = "block" + std::to_string(d);
    detail::push_linear(params, block + ".conv",
                        channels * spec.kernel * spec.kernel, spec.width,
                        LayerRole::conv,
                        {spec.width, channels, spec.kernel, spec.kernel}, rng);
    if (spec.norm == NormKind::instance) {
      params.entries.push_back({block + ".norm.weight", LayerRole::norm,
                                Tensor<T>::full({spec.width}, T(1), true)});
      params.entries.push_back({block + ".norm.bias", LayerRole::norm,
                                Tensor<T>::full({spec.width}, T(0), true)});
    }
    channels = spec.width;
  }
  detail::push_linear(params, "head", spec.feature_dim(), spec.classes,
                      LayerRole::linear, {spec.classes, spec.feature_dim()},
                      rng);
  return params;
}

namespace detail {

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  const std::size_t batch = x.dim(0), out = weight.dim(0);
  return add(matmul(x, transpose(weight)),
             broadcast_to(reshape(bias, {1, out}), {batch, out}));
}

template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
  return a == Activation::relu ? relu(x) : tanh(x);
}

inline constexpr double kInstanceNormEps = 1e-5;

/// Per-sample, per-channel normalisation over the spatial extent.
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                        const Tensor<T>& beta) {
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Shape rows{b * c, hw};
  const Shape col{b * c, 1};
  const T inv = T(1) / static_cast<T>(hw);
  Tensor<T> r = reshape(x, rows);
  Tensor<T> mu = scale(sum_to(r, col), inv);
  Tensor<T> centered = sub(r, broadcast_to(mu, rows));
  Tensor<T> var = scale(sum_to(mul(centered, centered), col), inv);
  Tensor<T> sd = sqrt(add_scalar(var, static_cast<T>(kInstanceNormEps)));
  Tensor<T> normed = reshape(div(centered, broadcast_to(sd, rows)), {b, c, hw});
  const Shape full{b, c, hw};
  Tensor<T> out = add(mul(normed, broadcast_to(reshape(gamma, {1, c, 1}), full)),
                      broadcast_to(reshape(beta, {1, c, 1}), full));
  return reshape(out, x.shape());
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t out = weight.dim(0), k = weight.dim(2);
  Tensor<T> cols = im2col(x, k);
  Tensor<T> y = linear(cols, reshape(weight, {out, weight.numel() / out}), bias);
  return reshape(swap_last_axes(reshape(y, {b, h * w, out})), {b, out, h, w});
}

}  // namespace detail

/// Logits [B, classes] for a batch [B, C, H, W]. Differentiable with respect
/// to both the parameters and the batch.
template <class T>
Tensor<T> forward(const ParamSet<T>& params, const ArchSpec& spec,
                  const Tensor<T>& batch) {
  const ImageDims& in = spec.input;
  if (batch.rank() != 4 || batch.dim(1) != in.channels ||
      batch.dim(2) != in.height || batch.dim(3) != in.width) {
    throw ShapeError("forward: batch " + shape_str(batch.shape()) +
                     " does not match input " + in.str());
  }
  const std::size_t n = batch.dim(0);
  std::size_t p = 0;
  auto next = [&]() -> const Tensor<T>& {
    if (p >= params.size()) throw ShapeError("forward: parameter set too short");
    return params[p++].value;
  };
  Tensor<T> h;
  if (spec.kind == ArchKind::mlp) {
    h = reshape(batch, {n, in.size()});
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const auto& w = next();
      const auto& b = next();
      h = detail::activate(detail::linear(h, w, b), spec.activation);
    }
  } else {
    h = batch;
    for (std::size_t d = 0; d < spec.depth; ++d) {
      const auto& w = next();
      const auto& b = next();
      h = detail::conv2d(h, w, b);
      if (spec.norm == NormKind::instance) {
        const auto& gamma = next();
        const auto& beta = next();
        h = detail::instance_norm(h, gamma, beta);
      }
      h = detail::activate(h, spec.activation);
      if (spec.pool > 1) h = avg_pool(h, spec.pool);
    }
    h = reshape(h, {n, spec.feature_dim()});
  }
  const auto& w = next();
  const auto& b = next();
  if (p != params.size()) throw ShapeError("forward: parameter set too long");
  return detail::linear(h, w, b);
}

namespace detail {

template <class T>
void check_labels(std::span<const int> labels, std::size_t classes) {
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0," +
                              std::to_string(classes) + ")");
    }
  }
}

}  // namespace detail

/// Mean negative log-softmax of the true class.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  detail::check_labels<T>(labels, k);
  std::vector<T> row_max(b);
  auto lv = logits.values();
  for (std::size_t i = 0; i < b; ++i) {
    row_max[i] = *std::max_element(lv.begin() + i * k, lv.begin() + (i + 1) * k);
  }
  const Tensor<T> shift = Tensor<T>::from_values({b, 1}, std::move(row_max));
  Tensor<T> z = sub(logits, broadcast_to(shift, {b, k}));
  Tensor<T> lse = add(log(sum_to(exp(z), {b, 1})), shift);
  return mean(sub(lse, gather_cols(logits, labels)));
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, std::span<const int>(labels));
}

/// Per-sample cross-entropy, evaluated without recording a graph.
template <class T>
std::vector<double> per_sample_losses(const ParamSet<T>& params,
                                      const ArchSpec& spec,
                                      const Tensor<T>& batch,
                                      std::span<const int> labels) {
  NoGradGuard no_grad;
  const Tensor<T> logits = forward(params, spec, batch);
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  detail::check_labels<T>(labels, k);
  auto lv = logits.values();
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = lv.subspan(i * k, k);
    const double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (T v : row) s += std::exp(static_cast<double>(v) - m);
    out[i] = m + std::log(s) - static_cast<double>(row[static_cast<std::size_t>(labels[i])]);
  }
  return out;
}

template <class T>
std::vector<int> predict(const ParamSet<T>& params, const ArchSpec& spec,
                         const Tensor<T>& batch) {
  NoGradGuard no_grad;
  const Tensor<T> logits = forward(params, spec, batch);
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  auto lv = logits.values();
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = lv.subspan(i * k, k);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Gradient of the mean cross-entropy of `batch` with respect to `params`.
template <class T>
GradSet<T> loss_gradient(const ParamSet<T>& params, const ArchSpec& spec,
                         const Tensor<T>& batch, std::span<const int> labels) {
  const Tensor<T> loss = cross_entropy(forward(params, spec, batch), labels);
  return grad(loss, params.tensors());
}

}  // namespace quickdrop
