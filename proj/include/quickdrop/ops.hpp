#pragma once

// Differentiable tensor operations. Every backward rule is itself written in
// terms of these operations, so gradients can be differentiated again.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "quickdrop/tensor.hpp"

namespace quickdrop {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

template <class T>
using Grads = std::vector<Tensor<T>>;

// Calls fn(out_flat, src_flat) for every element of `target`, where `source`
// has the same rank and each extent is either equal or 1.
template <class Fn>
void broadcast_walk(const Shape& source, const Shape& target, Fn&& fn) {
  const std::size_t rank = target.size();
  std::vector<std::size_t> src_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = rank; i-- > 0;) {
    src_stride[i] = source[i] == 1 ? 0 : stride;
    stride *= source[i];
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = shape_numel(target);
  std::size_t src = 0;
  for (std::size_t out = 0; out < total; ++out) {
    fn(out, src);
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      src += src_stride[axis];
      if (idx[axis] < target[axis]) break;
      src -= src_stride[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
}

inline void require_broadcastable(const Shape& small, const Shape& big,
                                  const char* op) {
  bool ok = small.size() == big.size();
  for (std::size_t i = 0; ok && i < small.size(); ++i) {
    ok = small[i] == big[i] || small[i] == 1;
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": cannot broadcast " +
                     shape_str(small) + " to " + shape_str(big));
  }
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return detail::make_op<T>(
      "scale", a.shape(), std::move(out), {a},
      [factor](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{scale(g, factor)};
      });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += offset;
  return detail::make_op<T>(
      "add_scalar", a.shape(), std::move(out), {a},
      [](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{g};
      });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op<T>(
      "add", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{g, g};
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op<T>(
      "sub", a.shape(), std::move(out), {a, b},
      [](const Tensor<T>& g, const std::vector<bool>& needs) {
        return detail::Grads<T>{g, needs[1] ? neg(g) : Tensor<T>{}};
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op<T>(
      "mul", a.shape(), std::move(out), {a, b},
      [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
        return detail::Grads<T>{needs[0] ? mul(g, b) : Tensor<T>{},
                                needs[1] ? mul(g, a) : Tensor<T>{}};
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return detail::make_op<T>(
      "div", a.shape(), std::move(out), {a, b},
      [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
        Tensor<T> ga = needs[0] ? div(g, b) : Tensor<T>{};
        Tensor<T> gb =
            needs[1] ? neg(div(mul(g, a), mul(b, b))) : Tensor<T>{};
        return detail::Grads<T>{ga, gb};
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::exp(v);
  return detail::make_op<T>("exp", a.shape(), std::move(out), {a},
                            [a](const Tensor<T>& g, const std::vector<bool>&) {
                              return detail::Grads<T>{mul(g, exp(a))};
                            });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::log(v);
  return detail::make_op<T>("log", a.shape(), std::move(out), {a},
                            [a](const Tensor<T>& g, const std::vector<bool>&) {
                              return detail::Grads<T>{div(g, a)};
                            });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::sqrt(v);
  return detail::make_op<T>(
      "sqrt", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{div(g, scale(sqrt(a), T(2)))};
      });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::tanh(v);
  return detail::make_op<T>(
      "tanh", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> t = tanh(a);
        return detail::Grads<T>{mul(g, add_scalar(neg(mul(t, t)), T(1)))};
      });
}

// The ReLU mask is piecewise constant, so its own derivative is zero.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return detail::make_op<T>(
      "relu", a.shape(), std::move(out), {a},
      [a](const Tensor<T>& g, const std::vector<bool>&) {
        std::vector<T> mask(a.numel());
        auto av = a.values();
        for (std::size_t i = 0; i < mask.size(); ++i) {
          mask[i] = av[i] > T(0) ? T(1) : T(0);
        }
        return detail::Grads<T>{
            mul(g, Tensor<T>::from_values(a.shape(), std::move(mask)))};
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  }
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = av[i * cols + j];
  }
  return detail::make_op<T>("transpose", {cols, rows}, std::move(out), {a},
                            [](const Tensor<T>& g, const std::vector<bool>&) {
                              return detail::Grads<T>{transpose(g)};
                            });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T lhs = av[i * k + p];
      if (lhs == T(0)) continue;
      const T* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += lhs * brow[j];
    }
  }
  return detail::make_op<T>(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
        return detail::Grads<T>{
            needs[0] ? matmul(g, transpose(b)) : Tensor<T>{},
            needs[1] ? matmul(transpose(a), g) : Tensor<T>{}};
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  }
  Shape original = a.shape();
  return detail::make_op<T>(
      "reshape", std::move(shape), a.vector(), {a},
      [original](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{reshape(g, original)};
      });
}

template <class T>
Tensor<T> sum_to(const Tensor<T>& a, Shape target);

/// Explicit broadcast: every extent of `a` equals the target extent or is 1.
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& a, Shape target) {
  detail::require_broadcastable(a.shape(), target, "broadcast_to");
  std::vector<T> out(shape_numel(target));
  auto av = a.values();
  detail::broadcast_walk(a.shape(), target, [&](std::size_t o, std::size_t s) {
    out[o] = av[s];
  });
  Shape original = a.shape();
  return detail::make_op<T>(
      "broadcast_to", std::move(target), std::move(out), {a},
      [original](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{sum_to(g, original)};
      });
}

/// Adjoint of broadcast_to: sums over the axes where `target` has extent 1.
template <class T>
Tensor<T> sum_to(const Tensor<T>& a, Shape target) {
  detail::require_broadcastable(target, a.shape(), "sum_to");
  std::vector<T> out(shape_numel(target), T(0));
  auto av = a.values();
  detail::broadcast_walk(target, a.shape(), [&](std::size_t o, std::size_t s) {
    out[s] += av[o];
  });
  Shape original = a.shape();
  return detail::make_op<T>(
      "sum_to", std::move(target), std::move(out), {a},
      [original](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{broadcast_to(g, original)};
      });
}

/// Sum of all elements as a rank-0 tensor.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  return reshape(sum_to(a, Shape(a.rank(), 1)), Shape{});
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// [A,B,C] -> [A,C,B]
template <class T>
Tensor<T> swap_last_axes(const Tensor<T>& a) {
  if (a.rank() != 3) {
    throw ShapeError("swap_last_axes expects rank 3, got " +
                     shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0), r = a.dim(1), c = a.dim(2);
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        out[base + j * r + i] = av[base + i * c + j];
      }
    }
  }
  return detail::make_op<T>("swap_last_axes", {n, c, r}, std::move(out), {a},
                            [](const Tensor<T>& g, const std::vector<bool>&) {
                              return detail::Grads<T>{swap_last_axes(g)};
                            });
}

struct ConvGeometry {
  std::size_t batch, channels, height, width, kernel;
  std::size_t pad() const { return kernel / 2; }
};

template <class T>
Tensor<T> col2im(const Tensor<T>& cols, ConvGeometry geo);

/// Unfolds k x k neighbourhoods (stride 1, same padding) into rows:
/// [B,C,H,W] -> [B*H*W, C*k*k].
template <class T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t kernel) {
  if (x.rank() != 4) {
    throw ShapeError("im2col expects [B,C,H,W], got " + shape_str(x.shape()));
  }
  const ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel};
  const std::size_t kk = kernel * kernel;
  const std::size_t row_len = geo.channels * kk;
  const auto pad = static_cast<std::ptrdiff_t>(geo.pad());
  std::vector<T> out(geo.batch * geo.height * geo.width * row_len, T(0));
  auto xv = x.values();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    for (std::size_t y = 0; y < geo.height; ++y) {
      for (std::size_t xx = 0; xx < geo.width; ++xx) {
        T* row = out.data() + ((b * geo.height + y) * geo.width + xx) * row_len;
        for (std::size_t c = 0; c < geo.channels; ++c) {
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const auto sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(geo.height)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(geo.width)) continue;
              row[c * kk + ky * kernel + kx] =
                  xv[((b * geo.channels + c) * geo.height + sy) * geo.width + sx];
            }
          }
        }
      }
    }
  }
  return detail::make_op<T>(
      "im2col", {geo.batch * geo.height * geo.width, row_len}, std::move(out),
      {x}, [geo](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{col2im(g, geo)};
      });
}

/// Adjoint of im2col: scatters rows back into [B,C,H,W], summing overlaps.
template <class T>
Tensor<T> col2im(const Tensor<T>& cols, ConvGeometry geo) {
  const std::size_t kk = geo.kernel * geo.kernel;
  const std::size_t row_len = geo.channels * kk;
  const Shape expected{geo.batch * geo.height * geo.width, row_len};
  detail::require_same_shape(cols.shape(), expected, "col2im");
  const auto pad = static_cast<std::ptrdiff_t>(geo.pad());
  std::vector<T> out(geo.batch * geo.channels * geo.height * geo.width, T(0));
  auto cv = cols.values();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    for (std::size_t y = 0; y < geo.height; ++y) {
      for (std::size_t xx = 0; xx < geo.width; ++xx) {
        const T* row =
            cv.data() + ((b * geo.height + y) * geo.width + xx) * row_len;
        for (std::size_t c = 0; c < geo.channels; ++c) {
          for (std::size_t ky = 0; ky < geo.kernel; ++ky) {
            const auto sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(geo.height)) continue;
            for (std::size_t kx = 0; kx < geo.kernel; ++kx) {
              const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - pad;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(geo.width)) continue;
              out[((b * geo.channels + c) * geo.height + sy) * geo.width + sx] +=
                  row[c * kk + ky * geo.kernel + kx];
            }
          }
        }
      }
    }
  }
  const std::size_t kernel = geo.kernel;
  return detail::make_op<T>(
      "col2im", {geo.batch, geo.channels, geo.height, geo.width},
      std::move(out), {cols},
      [kernel](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{im2col(g, kernel)};
      });
}

template <class T>
Tensor<T> avg_pool_adjoint(const Tensor<T>& g, std::size_t kernel);

/// Non-overlapping k x k average pooling on [B,C,H,W].
template <class T>
Tensor<T> avg_pool(const Tensor<T>& x, std::size_t kernel) {
  if (x.rank() != 4 || x.dim(2) % kernel != 0 || x.dim(3) % kernel != 0) {
    throw ShapeError("avg_pool: " + shape_str(x.shape()) +
                     " not divisible by kernel " + std::to_string(kernel));
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / kernel, ow = w / kernel;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(planes * oh * ow, T(0));
  auto xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(p * oh + y / kernel) * ow + xx / kernel] += xv[(p * h + y) * w + xx];
      }
    }
  }
  for (auto& v : out) v *= inv;
  return detail::make_op<T>(
      "avg_pool", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
      [kernel](const Tensor<T>& g, const std::vector<bool>&) {
        return detail::Grads<T>{avg_pool_adjoint(g, kernel)};
      });
}

/// Adjoint of avg_pool: spreads each value evenly over its k x k window.
template <class T>
Tensor<T> avg_pool_adjoint(const Tensor<T>& g, std::size_t kernel) {
  if (g.rank() != 4) {
    throw ShapeError("avg_pool_adjoint expects rank 4");
  }
  const std::size_t planes = g.dim(0) * g.dim(1);
  const std::size_t oh = g.dim(2), ow = g.dim(3);
  const std::size_t h = oh * kernel, w = ow * kernel;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(planes * h * w);
  auto gv = g.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        out[(p * h + y) * w + xx] =
            gv[(p * oh + y / kernel) * ow + xx / kernel] * inv;
      }
    }
  }
  return detail::make_op<T>(
      "avg_pool_adjoint", {g.dim(0), g.dim(1), h, w}, std::move(out), {g},
      [kernel](const Tensor<T>& up, const std::vector<bool>&) {
        return detail::Grads<T>{avg_pool(up, kernel)};
      });
}

template <class T>
Tensor<T> scatter_cols(const Tensor<T>& g, std::span<const int> cols,
                       std::size_t width);

/// Picks x[i, cols[i]] into a [B,1] tensor.
template <class T>
Tensor<T> gather_cols(const Tensor<T>& x, std::span<const int> cols) {
  if (x.rank() != 2 || x.dim(0) != cols.size()) {
    throw ShapeError("gather_cols: " + shape_str(x.shape()) + " with " +
                     std::to_string(cols.size()) + " indices");
  }
  const std::size_t rows = x.dim(0), width = x.dim(1);
  std::vector<T> out(rows);
  auto xv = x.values();
  for (std::size_t i = 0; i < rows; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= width) {
      throw std::out_of_range("gather_cols: index " + std::to_string(cols[i]) +
                              " outside [0," + std::to_string(width) + ")");
    }
    out[i] = xv[i * width + static_cast<std::size_t>(cols[i])];
  }
  std::vector<int> idx(cols.begin(), cols.end());
  return detail::make_op<T>(
      "gather_cols", {rows, 1}, std::move(out), {x},
      [idx = std::move(idx), width](const Tensor<T>& g,
                                    const std::vector<bool>&) {
        return detail::Grads<T>{scatter_cols(g, idx, width)};
      });
}

/// Adjoint of gather_cols: [B,1] -> [B,width], zero except at cols[i].
template <class T>
Tensor<T> scatter_cols(const Tensor<T>& g, std::span<const int> cols,
                       std::size_t width) {
  const std::size_t rows = cols.size();
  detail::require_same_shape(g.shape(), {rows, 1}, "scatter_cols");
  std::vector<T> out(rows * width, T(0));
  auto gv = g.values();
  for (std::size_t i = 0; i < rows; ++i) {
    out[i * width + static_cast<std::size_t>(cols[i])] = gv[i];
  }
  std::vector<int> idx(cols.begin(), cols.end());
  return detail::make_op<T>(
      "scatter_cols", {rows, width}, std::move(out), {g},
      [idx = std::move(idx)](const Tensor<T>& up, const std::vector<bool>&) {
        return detail::Grads<T>{gather_cols(up, idx)};
      });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}

}  // namespace quickdrop
