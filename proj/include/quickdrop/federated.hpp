#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "quickdrop/data.hpp"
#include "quickdrop/distill.hpp"
#include "quickdrop/model.hpp"
#include "quickdrop/rng.hpp"

namespace quickdrop {

struct FedConfig {
  std::size_t rounds = 200;
  std::size_t local_steps = 50;
  double lr = 0.01;
  std::size_t batch_per_class = 256;
  double participation = 1.0;
  /// Run gradient matching inside local rounds.
  bool distill = true;
  /// syn_lr, syn_steps and scale are taken from here.
  DistillConfig distill_cfg;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

template <class T>
struct ClientState {
  std::size_t id = 0;
  LabeledDataset data;
  SyntheticDataset<T> syn;
  Rng rng;
  ClassSampler sampler;
  /// Real-data gradients that also drove a matching update.
  std::uint64_t reuse_count = 0;
  DistillCounters counters;
};

/// Builds client states whose random streams derive from (seed, id).
template <class T>
std::vector<ClientState<T>> make_clients(const std::vector<LabeledDataset>& datasets,
                                         double scale, std::uint64_t seed,
                                         bool with_synthetic = true) {
  std::vector<ClientState<T>> clients;
  clients.reserve(datasets.size());
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    ClientState<T> c;
    c.id = i;
    c.data = datasets[i];
    c.rng = make_rng(seed, "client", i);
    c.sampler = ClassSampler(class_index(c.data));
    if (with_synthetic) {
      c.syn = init_synthetic<T>(c.data, scale, derive_seed(seed, "client.synthetic", i));
    } else {
      c.syn.dims = c.data.dims;
      c.syn.classes = c.data.classes;
      c.syn.scale = scale;
    }
    clients.push_back(std::move(c));
  }
  return clients;
}

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> clients;
  std::vector<std::uint64_t> local_steps;
  std::vector<double> weights;
  double wall_ms = 0.0;
  std::uint64_t samples = 0;
};

template <class T>
struct LocalResult {
  ParamSet<T> params;
  std::uint64_t steps = 0;
  std::uint64_t samples = 0;
};

template <class T>
struct ClassGradients {
  std::map<int, GradSet<T>> per_class;
  /// Batch-size weighted mean of the per-class gradients, which equals the
  /// gradient of the mean loss over the union of the class batches.
  GradSet<T> combined;
  std::uint64_t samples = 0;
};

/// One class-grouped minibatch gradient for a client at `params`.
template <class T>
ClassGradients<T> class_gradients(const ParamSet<T>& params, const ArchSpec& spec,
                                  ClientState<T>& client, std::size_t batch_per_class) {
  ClassGradients<T> out;
  std::map<int, std::size_t> sizes;
  const ClassIndex& index = client.sampler.index();
  for (std::size_t c = 0; c < index.size(); ++c) {
    if (index[c].empty()) continue;
    const auto rows = client.sampler.next(c, batch_per_class, client.rng);
    const std::vector<int> labels(rows.size(), static_cast<int>(c));
    out.per_class.emplace(static_cast<int>(c),
                          loss_gradient(params, spec, gather_images<T>(client.data, rows), labels));
    sizes[static_cast<int>(c)] = rows.size();
    out.samples += rows.size();
  }
  std::vector<std::vector<T>> acc(params.size());
  for (std::size_t l = 0; l < params.size(); ++l) acc[l].assign(params[l].value.numel(), T(0));
  for (const auto& [c, g] : out.per_class) {
    const T w = static_cast<T>(static_cast<double>(sizes[c]) / static_cast<double>(out.samples));
    for (std::size_t l = 0; l < g.size(); ++l) {
      auto gv = g[l].values();
      for (std::size_t j = 0; j < gv.size(); ++j) acc[l][j] += w * gv[j];
    }
  }
  for (std::size_t l = 0; l < params.size(); ++l) {
    out.combined.push_back(Tensor<T>::from_values(params[l].value.shape(), std::move(acc[l])));
  }
  return out;
}

/// Plain FedAvg local training: T SGD steps on class-grouped real batches.
template <class T>
LocalResult<T> fedavg_local_round(ClientState<T>& client, const ParamSet<T>& global,
                                  const ArchSpec& spec, const FedConfig& cfg) {
  LocalResult<T> out{global, 0, 0};
  for (std::size_t t = 0; t < cfg.local_steps; ++t) {
    auto grads = class_gradients(out.params, spec, client, cfg.batch_per_class);
    out.params = apply_gradient(out.params, grads.combined, cfg.lr);
    out.samples += grads.samples;
    ++out.steps;
  }
  return out;
}

/// Local round with in-situ distillation: each real-data class gradient is
/// reused to update that class's synthetic bucket before the model step on
/// the same gradient. Matching never touches the parameters or the client's
/// batch stream, so the parameter trajectory matches fedavg_local_round.
template <class T>
LocalResult<T> local_round(ClientState<T>& client, const ParamSet<T>& global,
                           const ArchSpec& spec, const FedConfig& cfg) {
  if (client.data.empty()) throw std::invalid_argument("local_round: client has no data");
  LocalResult<T> out{global, 0, 0};
  for (std::size_t t = 0; t < cfg.local_steps; ++t) {
    auto grads = class_gradients(out.params, spec, client, cfg.batch_per_class);
    if (cfg.distill) {
      for (const auto& [c, g] : grads.per_class) {
        auto it = client.syn.buckets.find(c);
        if (it == client.syn.buckets.end()) {
          ++client.counters.skipped_classes;
          continue;
        }
        it->second = match_class(out.params, spec, g, c, it->second, cfg.distill_cfg);
        ++client.counters.match_steps;
      }
      ++client.reuse_count;
    }
    out.params = apply_gradient(out.params, grads.combined, cfg.lr);
    out.samples += grads.samples;
    ++out.steps;
  }
  return out;
}

inline constexpr double kWeightSumTolerance = 1e-6;

/// Weighted parameter average. Accumulates in double, anchored at the first
/// model so identical inputs or one-hot weights reproduce a model exactly.
template <class T>
ParamSet<T> aggregate(const std::vector<ParamSet<T>>& models,
                      const std::vector<double>& weights) {
  if (models.empty() || models.size() != weights.size()) {
    throw std::invalid_argument("aggregate: need one weight per model");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("aggregate: negative weight");
    total += w;
  }
  if (std::abs(total - 1.0) > kWeightSumTolerance) {
    throw std::invalid_argument("aggregate: weights sum to " + std::to_string(total));
  }
  const ParamSet<T>& base = models.front();
  for (const auto& m : models) {
    if (m.size() != base.size()) throw ShapeError("aggregate: parameter count mismatch");
    for (std::size_t l = 0; l < base.size(); ++l) {
      if (m[l].value.shape() != base[l].value.shape()) {
        throw ShapeError("aggregate: shape mismatch at " + base[l].name);
      }
    }
  }
  std::vector<std::vector<T>> values(base.size());
  for (std::size_t l = 0; l < base.size(); ++l) {
    auto anchor = base[l].value.values();
    values[l].resize(anchor.size());
    for (std::size_t j = 0; j < anchor.size(); ++j) {
      const double a = static_cast<double>(anchor[j]);
      double acc = a;
      for (std::size_t i = 1; i < models.size(); ++i) {
        if (weights[i] == 0.0) continue;
        acc += weights[i] * (static_cast<double>(models[i][l].value.values()[j]) - a);
      }
      values[l][j] = static_cast<T>(acc);
    }
  }
  return base.with_values(std::move(values));
}

/// Uniform subset of max(1, round(fraction * n)) client ids, sorted.
inline std::vector<std::size_t> sample_clients(std::size_t n, double fraction,
                                               std::uint64_t seed, std::size_t round) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("sample_clients: fraction must be in (0,1]");
  }
  const auto want = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
  Rng rng = make_rng(seed, "participation", round);
  auto ids = sample_without_replacement(n, want, rng);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Runs fn(i) for i in [0, n) on up to `threads` threads; rethrows the first
/// failure after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <class T>
struct FedResult {
  ParamSet<T> params;
  std::vector<RoundRecord> records;
  std::uint64_t samples = 0;
  double wall_ms = 0.0;
};

template <class T>
using LocalUpdate = std::function<LocalResult<T>(ClientState<T>&, const ParamSet<T>&,
                                                 const ArchSpec&, const FedConfig&)>;

/// Generic federated loop: sample participants, run local updates, average
/// with weights |D_i| / sum |D_j| over participants.
template <class T>
FedResult<T> run_rounds(std::vector<ClientState<T>>& clients, const ArchSpec& spec,
                        const FedConfig& cfg, ParamSet<T> params,
                        const LocalUpdate<T>& update) {
  if (clients.empty()) throw std::invalid_argument("federated training needs >= 1 client");
  using Clock = std::chrono::steady_clock;
  FedResult<T> result;
  const auto start = Clock::now();
  for (std::size_t k = 0; k < cfg.rounds; ++k) {
    const auto round_start = Clock::now();
    const auto ids = sample_clients(clients.size(), cfg.participation, cfg.seed, k);
    std::vector<LocalResult<T>> locals(ids.size());
    try {
      parallel_for(ids.size(), cfg.threads, [&](std::size_t i) {
        locals[i] = update(clients[ids[i]], params, spec, cfg);
      });
    } catch (const NumericError& e) {
      throw NumericError("round " + std::to_string(k) + ": " + e.what());
    }
    RoundRecord rec;
    rec.round = k;
    rec.clients = ids;
    double total = 0.0;
    for (std::size_t id : ids) total += static_cast<double>(clients[id].data.size());
    std::vector<ParamSet<T>> models;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      rec.weights.push_back(static_cast<double>(clients[ids[i]].data.size()) / total);
      rec.local_steps.push_back(locals[i].steps);
      rec.samples += locals[i].samples;
      models.push_back(std::move(locals[i].params));
    }
    params = aggregate(models, rec.weights);
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - round_start).count();
    result.samples += rec.samples;
    result.records.push_back(std::move(rec));
  }
  result.params = std::move(params);
  result.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  return result;
}

/// Federated training with integrated distillation. Returns the final model;
/// the clients' synthetic sets are updated in place.
template <class T>
FedResult<T> train_federated(std::vector<ClientState<T>>& clients, const ArchSpec& spec,
                             const FedConfig& cfg, ParamSet<T> initial) {
  return run_rounds<T>(clients, spec, cfg, std::move(initial), &local_round<T>);
}

template <class T>
FedResult<T> train_federated(std::vector<ClientState<T>>& clients, const ArchSpec& spec,
                             const FedConfig& cfg) {
  return train_federated(clients, spec, cfg,
                         init_params<T>(spec, {derive_seed(cfg.seed, "model.init")}));
}

/// FedAvg without any synthetic-data work.
template <class T>
FedResult<T> train_fedavg(std::vector<ClientState<T>>& clients, const ArchSpec& spec,
                          const FedConfig& cfg, ParamSet<T> initial) {
  return run_rounds<T>(clients, spec, cfg, std::move(initial), &fedavg_local_round<T>);
}

template <class T>
FedResult<T> train_fedavg(std::vector<ClientState<T>>& clients, const ArchSpec& spec,
                          const FedConfig& cfg) {
  return train_fedavg(clients, spec, cfg,
                      init_params<T>(spec, {derive_seed(cfg.seed, "model.init")}));
}

inline std::string weights_digest(const std::vector<double>& weights) {
  std::string text;
  char buf[32];
  for (double w : weights) {
    std::snprintf(buf, sizeof buf, "%.17g;", w);
    text += buf;
  }
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

/// round,client_ids,wall_ms,samples,weights_digest (client ids joined by ';').
inline void write_round_csv(const std::string& path, const std::vector<RoundRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out << "round,client_ids,wall_ms,samples,weights_digest\n";
  for (const auto& r : records) {
    out << r.round << ',';
    for (std::size_t i = 0; i < r.clients.size(); ++i) out << (i ? ";" : "") << r.clients[i];
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_ms);
    out << ',' << wall << ',' << r.samples << ',' << weights_digest(r.weights) << '\n';
  }
}

}  // namespace quickdrop
