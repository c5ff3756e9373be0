#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "quickdrop/ops.hpp"
#include "quickdrop/tensor.hpp"

namespace quickdrop {

struct GradOptions {
  /// Record the backward computation so the result can be differentiated.
  bool create_graph = false;
  /// Keep the forward graph alive after the pass. Defaults to create_graph.
  std::optional<bool> retain_graph;
};

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// Tensors unreachable from the loss receive zeros. Without create_graph the
/// results are plain leaves, and hypergrad() refuses anything built from them.
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss,
                            std::span<const Tensor<T>> wrt,
                            GradOptions options = {}) {
  using NodeT = detail::Node<T>;
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("grad: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  const bool retain = options.retain_graph.value_or(options.create_graph);

  std::unordered_map<const NodeT*, bool> target;
  for (const auto& w : wrt) target[w.node().get()] = true;

  // Post-order DFS; `relevant` marks nodes from which some target is reachable.
  std::unordered_map<const NodeT*, bool> relevant;
  std::vector<NodeT*> order;
  struct Frame {
    NodeT* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  auto visit = [&](NodeT* n) {
    if (relevant.contains(n)) return;
    if (n->released) {
      throw GraphError(
          "grad: graph was released by an earlier backward pass; pass "
          "retain_graph=true to differentiate through it again");
    }
    relevant[n] = target.contains(n);
    stack.push_back({n, 0});
  };
  visit(loss.node().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    NodeT* n = top.node;
    if (top.next < n->inputs.size()) {
      NodeT* child = n->inputs[top.next++].get();
      visit(child);
      continue;
    }
    bool any = relevant[n];
    for (const auto& in : n->inputs) any = any || relevant[in.get()];
    relevant[n] = any;
    order.push_back(n);
    stack.pop_back();
  }

  std::unordered_map<const NodeT*, Tensor<T>> accum;
  {
    GradModeGuard mode(options.create_graph);
    accum[loss.node().get()] = Tensor<T>::full(loss.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* n = *it;
      if (n->leaf || !relevant[n] || !n->backward) continue;
      auto found = accum.find(n);
      if (found == accum.end()) continue;
      std::vector<bool> needs(n->inputs.size());
      for (std::size_t i = 0; i < needs.size(); ++i) {
        needs[i] = n->inputs[i]->requires_grad && relevant[n->inputs[i].get()];
      }
      auto grads = n->backward(found->second, needs);
      for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!needs[i] || !grads[i].defined()) continue;
        const NodeT* in = n->inputs[i].get();
        auto slot = accum.find(in);
        if (slot == accum.end()) {
          accum.emplace(in, grads[i]);
        } else {
          slot->second = add(slot->second, grads[i]);
        }
      }
      if (!target.contains(n)) accum.erase(n);
    }
  }

  if (!retain) {
    // Clearing inputs can drop the last owner of a node still in `order`.
    std::vector<std::shared_ptr<NodeT>> hold;
    for (NodeT* n : order) hold.insert(hold.end(), n->inputs.begin(), n->inputs.end());
    for (NodeT* n : order) {
      if (n->leaf) continue;
      n->backward = nullptr;
      n->inputs.clear();
      n->released = true;
    }
  }

  std::vector<Tensor<T>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = accum.find(w.node().get());
    Tensor<T> g = found != accum.end() ? found->second
                                       : Tensor<T>::zeros(w.shape());
    if (!options.create_graph) {
      g = g.detach();
      g.node()->graph_free = true;
    }
    result.push_back(std::move(g));
  }
  return result;
}

template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& loss,
                            const std::vector<Tensor<T>>& wrt,
                            GradOptions options = {}) {
  return grad(loss, std::span<const Tensor<T>>(wrt), options);
}

/// Derivative of a gradient-matching loss with respect to the inputs that fed
/// one of its gradient sets. Those gradients must have been produced with
/// create_graph=true; otherwise the matching loss carries no path back to the
/// inputs and this throws.
template <class T>
std::vector<Tensor<T>> hypergrad(const Tensor<T>& match_loss,
                                 std::span<const Tensor<T>> inputs) {
  for (const auto& in : inputs) {
    if (!in.requires_grad()) {
      throw GraphError("hypergrad: input of shape " + shape_str(in.shape()) +
                       " does not require grad");
    }
  }
  if (match_loss.graph_free()) {
    throw GraphError(
        "hypergrad: match loss was built from gradients computed without "
        "graph retention; recompute them with grad(..., {.create_graph = "
        "true})");
  }
  return grad(match_loss, inputs, {});
}

template <class T>
std::vector<Tensor<T>> hypergrad(const Tensor<T>& match_loss,
                                 const std::vector<Tensor<T>>& inputs) {
  return hypergrad(match_loss, std::span<const Tensor<T>>(inputs));
}

struct FiniteDiffReport {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares autodiff against central differences coordinate by coordinate.
/// Relative error is |a - n| / max(|a|, |n|, rel_floor).
template <class T>
FiniteDiffReport finite_diff_check(
    const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
    double eps, double rel_floor = 1e-6) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps <= 0");
  auto eval = [&](const Tensor<T>& at) {
    NoGradGuard no_grad;
    const Tensor<T> y = f(at);
    if (y.numel() != 1) throw ShapeError("finite_diff_check: f is not scalar");
    const double v = static_cast<double>(y.item());
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f is not finite");
    return v;
  };

  const Tensor<T> leaf = x.detach(true);
  const Tensor<T> y = f(leaf);
  if (!std::isfinite(static_cast<double>(y.item()))) {
    throw NumericError("finite_diff_check: f is not finite");
  }
  const auto analytic = grad(y, std::vector<Tensor<T>>{leaf})[0];

  FiniteDiffReport report;
  report.analytic.assign(analytic.values().begin(), analytic.values().end());
  report.numeric.resize(x.numel());
  std::vector<T> probe(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + static_cast<T>(eps);
    const double up = eval(Tensor<T>::from_values(x.shape(), probe));
    probe[i] = saved - static_cast<T>(eps);
    const double down = eval(Tensor<T>::from_values(x.shape(), probe));
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    report.numeric[i] = numeric;
    const double a = report.analytic[i];
    const double abs_err = std::abs(a - numeric);
    const double rel_err =
        abs_err / std::max({std::abs(a), std::abs(numeric), rel_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (rel_err > report.max_rel_error) {
      report.max_rel_error = rel_err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace quickdrop
