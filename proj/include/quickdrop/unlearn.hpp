#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "quickdrop/federated.hpp"
#include "quickdrop/report.hpp"

namespace quickdrop {

enum class TargetKind { class_label, client };

struct Target {
  TargetKind kind = TargetKind::class_label;
  std::size_t id = 0;

  bool operator==(const Target&) const = default;
  auto operator<=>(const Target&) const = default;

  std::string str() const {
    return std::string(kind == TargetKind::class_label ? "class=" : "client=") +
           std::to_string(id);
  }
};

inline std::string targets_label(const std::vector<Target>& targets) {
  std::string out;
  for (std::size_t i = 0; i < targets.size(); ++i) out += (i ? "," : "") + targets[i].str();
  return out;
}

/// How SGA aggregation weights clients.
enum class SgaWeighting {
  /// |S_f^i|, the size of the set the client actually ascends on.
  synthetic,
  /// |D_f^i|, the client's original forget-data size.
  original,
};

struct UnlearningRequest {
  std::vector<Target> targets;
  std::size_t unlearn_rounds = 1;
  std::size_t recovery_rounds = 2;
  double sga_lr = 0.01;
  double recovery_lr = 0.01;
  /// Original samples mixed into recovery, per remaining class per client.
  std::size_t mix_per_class = 10;
  /// Minibatch size of a local pass.
  std::size_t pass_batch = 32;
  SgaWeighting weighting = SgaWeighting::synthetic;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

/// Where a forget partition draws its samples from.
enum class DataSource { distilled, original };

/// Identifies one element of a client's set: a synthetic bucket row or an
/// original dataset row.
struct SampleRef {
  int label = 0;
  std::size_t index = 0;
  bool original = false;

  auto operator<=>(const SampleRef&) const = default;
};

template <class T>
struct SampleSet {
  ImageDims dims;
  std::vector<T> pixels;
  std::vector<int> labels;
  std::vector<SampleRef> refs;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void append_bucket(int label, const Tensor<T>& bucket) {
    auto v = bucket.values();
    const std::size_t d = dims.size();
    for (std::size_t i = 0; i < bucket.dim(0); ++i) {
      pixels.insert(pixels.end(), v.begin() + static_cast<std::ptrdiff_t>(i * d),
                    v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      labels.push_back(label);
      refs.push_back({label, i, false});
    }
  }

  void append_row(const LabeledDataset& data, std::size_t row) {
    for (float p : data.sample(row)) pixels.push_back(static_cast<T>(p));
    labels.push_back(data.labels[row]);
    refs.push_back({data.labels[row], row, true});
  }

  Tensor<T> images(std::span<const std::size_t> rows) const {
    const std::size_t d = dims.size();
    std::vector<T> out;
    out.reserve(rows.size() * d);
    for (std::size_t r : rows) {
      out.insert(out.end(), pixels.begin() + static_cast<std::ptrdiff_t>(r * d),
                 pixels.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    return Tensor<T>::from_values({rows.size(), dims.channels, dims.height, dims.width},
                                  std::move(out));
  }
};

template <class T>
struct ClientPartition {
  std::size_t client = 0;
  std::vector<int> forget_classes;
  std::vector<int> remain_classes;
  /// S_f^i
  SampleSet<T> forget;
  /// S_r^i followed by `mix_count` original mix-in rows.
  SampleSet<T> recovery;
  std::size_t mix_count = 0;
  /// |D_f^i|
  std::size_t original_forget = 0;
  /// Leaving clients ascend on everything they hold and skip recovery.
  bool departing = false;
};

template <class T>
struct ForgetPartition {
  std::vector<ClientPartition<T>> clients;
  /// Classes whose test accuracy forms the F-Set.
  std::vector<int> forget_classes;

  std::size_t forget_total() const {
    std::size_t n = 0;
    for (const auto& c : clients) n += c.forget.size();
    return n;
  }
  std::size_t recovery_total() const {
    std::size_t n = 0;
    for (const auto& c : clients) n += c.recovery.size();
    return n;
  }
};

/// What earlier requests removed. Forgotten classes stay out of every later
/// recovery set; departed clients take no further part.
struct UnlearnState {
  std::set<int> forgotten_classes;
  std::set<std::size_t> departed_clients;
  std::vector<std::string> warnings;

  bool covers(const Target& t) const {
    return t.kind == TargetKind::class_label
               ? forgotten_classes.contains(static_cast<int>(t.id))
               : departed_clients.contains(t.id);
  }
};

class UnlearnError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws unless every target names a class or client with data somewhere.
template <class T>
void validate_targets(const std::vector<Target>& targets,
                      const std::vector<ClientState<T>>& clients) {
  if (targets.empty()) throw UnlearnError("unlearning request has no targets");
  for (const auto& t : targets) {
    if (t.kind == TargetKind::client) {
      if (t.id >= clients.size()) {
        throw UnlearnError("unknown client id " + std::to_string(t.id) + " (have " +
                           std::to_string(clients.size()) + " clients)");
      }
      if (clients[t.id].data.empty()) {
        throw UnlearnError("client " + std::to_string(t.id) + " holds no data");
      }
      continue;
    }
    const std::size_t classes = clients.empty() ? 0 : clients.front().data.classes;
    if (t.id >= classes) {
      throw UnlearnError("unknown class id " + std::to_string(t.id) + " (have " +
                         std::to_string(classes) + " classes)");
    }
    const bool held = std::any_of(clients.begin(), clients.end(), [&](const auto& c) {
      return std::find(c.data.labels.begin(), c.data.labels.end(), static_cast<int>(t.id)) !=
             c.data.labels.end();
    });
    if (!held) throw UnlearnError("class " + std::to_string(t.id) + " has no data on any client");
  }
}

/// Splits each remaining client's set into forget and recovery parts for
/// `request` given what `state` has already removed.
template <class T>
ForgetPartition<T> build_forget_partition(const UnlearningRequest& request,
                                          const std::vector<ClientState<T>>& clients,
                                          const UnlearnState& state,
                                          DataSource source = DataSource::distilled) {
  validate_targets(request.targets, clients);
  std::set<int> forget_now;
  std::set<std::size_t> leaving;
  for (const auto& t : request.targets) {
    if (t.kind == TargetKind::class_label) {
      forget_now.insert(static_cast<int>(t.id));
    } else {
      leaving.insert(t.id);
    }
  }

  ForgetPartition<T> out;
  std::set<int> fset_classes(forget_now.begin(), forget_now.end());
  for (const auto& client : clients) {
    if (state.departed_clients.contains(client.id)) continue;
    ClientPartition<T> part;
    part.client = client.id;
    part.departing = leaving.contains(client.id);
    part.forget.dims = part.recovery.dims = client.data.dims;
    const ClassIndex index = class_index(client.data);
    for (std::size_t c = 0; c < index.size(); ++c) {
      const int label = static_cast<int>(c);
      if (index[c].empty() || state.forgotten_classes.contains(label)) continue;
      const bool forget = part.departing || forget_now.contains(label);
      if (forget) {
        part.forget_classes.push_back(label);
        part.original_forget += index[c].size();
        if (part.departing) fset_classes.insert(label);
      } else {
        part.remain_classes.push_back(label);
      }
      SampleSet<T>& target = forget ? part.forget : part.recovery;
      if (source == DataSource::original) {
        for (std::size_t row : index[c]) target.append_row(client.data, row);
      } else if (client.syn.has(label)) {
        target.append_bucket(label, client.syn.buckets.at(label));
      }
    }
    if (source == DataSource::distilled && !part.departing && request.mix_per_class > 0) {
      Rng rng = make_rng(request.seed, "mix", client.id);
      for (int label : part.remain_classes) {
        const auto& rows = index[static_cast<std::size_t>(label)];
        const std::size_t m = std::min(request.mix_per_class, rows.size());
        for (std::size_t pick : sample_without_replacement(rows.size(), m, rng)) {
          part.recovery.append_row(client.data, rows[pick]);
          ++part.mix_count;
        }
      }
    }
    if (part.departing) {
      // A departing client's data is entirely in its forget set.
      part.recovery = SampleSet<T>{client.data.dims, {}, {}, {}};
      part.remain_classes.clear();
    }
    out.clients.push_back(std::move(part));
  }
  // For a departing client the F-Set is every class it held.
  out.forget_classes.assign(fset_classes.begin(), fset_classes.end());
  return out;
}

/// One local pass over `set` in shuffled minibatches. The step is
/// theta - rate * grad, so a negative rate ascends.
template <class T>
ParamSet<T> local_pass(const ParamSet<T>& params, const ArchSpec& spec, const SampleSet<T>& set,
                       double rate, std::size_t batch, Rng& rng) {
  if (batch == 0) throw std::invalid_argument("local_pass: batch must be >= 1");
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  ParamSet<T> theta = params;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::span<const std::size_t> rows(order.data() + start,
                                            std::min(batch, order.size() - start));
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (std::size_t r : rows) labels.push_back(set.labels[r]);
    theta = apply_gradient(theta, loss_gradient(theta, spec, set.images(rows), labels), rate);
  }
  return theta;
}

struct PassSpec {
  double rate = 0.0;
  std::size_t batch = 32;
  std::size_t threads = 1;
  std::uint64_t round_seed = 0;
};

template <class T>
struct RoundOutcome {
  ParamSet<T> params;
  std::uint64_t samples = 0;
  std::vector<std::size_t> clients;
};

/// One pass per participating client over its chosen set, then a weighted
/// average. `pick` returns the set (or nullptr to sit out) and its weight.
template <class T>
RoundOutcome<T> pass_round(
    const ParamSet<T>& params, const ArchSpec& spec, const ForgetPartition<T>& partition,
    const PassSpec& pass,
    const std::function<std::pair<const SampleSet<T>*, double>(const ClientPartition<T>&)>& pick,
    const char* what) {
  std::vector<const ClientPartition<T>*> parts;
  std::vector<const SampleSet<T>*> sets;
  std::vector<double> weights;
  for (const auto& p : partition.clients) {
    auto [set, w] = pick(p);
    if (set == nullptr || set->empty()) continue;
    parts.push_back(&p);
    sets.push_back(set);
    weights.push_back(w);
  }
  if (sets.empty()) throw UnlearnError(std::string(what) + ": empty set on every client");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw UnlearnError(std::string(what) + ": aggregation weights sum to 0");
  for (double& w : weights) w /= total;

  std::vector<ParamSet<T>> models(sets.size());
  parallel_for(sets.size(), pass.threads, [&](std::size_t i) {
    Rng rng = make_rng(pass.round_seed, "pass", parts[i]->client);
    models[i] = local_pass(params, spec, *sets[i], pass.rate, pass.batch, rng);
  });
  RoundOutcome<T> out;
  out.params = aggregate(models, weights);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    out.samples += sets[i]->size();
    out.clients.push_back(parts[i]->client);
  }
  return out;
}

/// Gradient ascent on each client's forget set, aggregated by forget-set size.
template <class T>
RoundOutcome<T> sga_round(const ParamSet<T>& params, const ForgetPartition<T>& partition,
                          double sga_lr, const ArchSpec& spec, std::size_t batch,
                          std::uint64_t round_seed,
                          SgaWeighting weighting = SgaWeighting::synthetic,
                          std::size_t threads = 1) {
  return pass_round<T>(
      params, spec, partition, {-sga_lr, batch, threads, round_seed},
      [&](const ClientPartition<T>& p) {
        const double w = weighting == SgaWeighting::synthetic
                             ? static_cast<double>(p.forget.size())
                             : static_cast<double>(p.original_forget);
        return std::pair<const SampleSet<T>*, double>{&p.forget, w};
      },
      "sga_round");
}

/// Descent on each staying client's recovery set, aggregated by its size.
template <class T>
RoundOutcome<T> recovery_round(const ParamSet<T>& params, const ForgetPartition<T>& partition,
                               double recovery_lr, const ArchSpec& spec, std::size_t batch,
                               std::uint64_t round_seed, std::size_t threads = 1) {
  return pass_round<T>(
      params, spec, partition, {recovery_lr, batch, threads, round_seed},
      [](const ClientPartition<T>& p) {
        return std::pair<const SampleSet<T>*, double>{
            p.departing ? nullptr : &p.recovery, static_cast<double>(p.recovery.size())};
      },
      "recovery_round");
}

/// Fills accuracy / MIA fields of a finished stage for the given model.
template <class T>
using StageObserver = std::function<void(StageReport&, const ParamSet<T>&)>;

template <class T>
struct RequestOutcome {
  ParamSet<T> params;
  std::vector<StageReport> stages;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

}  // namespace detail

/// U ascent rounds then R recovery rounds; records one report per stage and
/// folds the request into `state`.
template <class T>
RequestOutcome<T> execute_request(const ParamSet<T>& params, const UnlearningRequest& request,
                                  const std::vector<ClientState<T>>& clients,
                                  const ArchSpec& spec, UnlearnState& state,
                                  const StageObserver<T>& observe = {},
                                  DataSource source = DataSource::distilled) {
  const ForgetPartition<T> partition = build_forget_partition(request, clients, state, source);
  RequestOutcome<T> out{params, {}};
  const std::string label = targets_label(request.targets);

  StageReport unlearn{Stage::unlearn, label, partition.forget_classes, {}, {},
                      request.unlearn_rounds, 0, 0.0};
  auto start = detail::Clock::now();
  for (std::size_t u = 0; u < request.unlearn_rounds; ++u) {
    auto r = sga_round(out.params, partition, request.sga_lr, spec, request.pass_batch,
                       derive_seed(request.seed, "unlearn", u), request.weighting,
                       request.threads);
    out.params = std::move(r.params);
    unlearn.samples += r.samples;
  }
  unlearn.wall_ms = detail::elapsed_ms(start);
  if (observe) observe(unlearn, out.params);
  out.stages.push_back(std::move(unlearn));

  StageReport recover{Stage::recover, label, partition.forget_classes, {}, {},
                      request.recovery_rounds, 0, 0.0};
  start = detail::Clock::now();
  for (std::size_t r = 0; r < request.recovery_rounds; ++r) {
    auto res = recovery_round(out.params, partition, request.recovery_lr, spec,
                              request.pass_batch, derive_seed(request.seed, "recover", r),
                              request.threads);
    out.params = std::move(res.params);
    recover.samples += res.samples;
  }
  recover.wall_ms = detail::elapsed_ms(start);
  if (observe) observe(recover, out.params);
  out.stages.push_back(std::move(recover));

  for (const auto& t : request.targets) {
    if (t.kind == TargetKind::class_label) {
      state.forgotten_classes.insert(static_cast<int>(t.id));
    } else {
      state.departed_clients.insert(t.id);
    }
  }
  return out;
}

/// Applies requests one after another. Targets already removed are dropped
/// with a warning; a request left without targets is skipped.
template <class T>
RequestOutcome<T> execute_sequence(const ParamSet<T>& params,
                                   const std::vector<UnlearningRequest>& requests,
                                   const std::vector<ClientState<T>>& clients,
                                   const ArchSpec& spec, UnlearnState& state,
                                   const StageObserver<T>& observe = {}) {
  RequestOutcome<T> out{params, {}};
  for (const auto& req : requests) {
    UnlearningRequest pending = req;
    pending.targets.clear();
    for (const auto& t : req.targets) {
      if (state.covers(t)) {
        state.warnings.push_back(t.str() + " was already unlearned; skipped");
      } else if (std::find(pending.targets.begin(), pending.targets.end(), t) ==
                 pending.targets.end()) {
        pending.targets.push_back(t);
      }
    }
    if (pending.targets.empty()) continue;
    auto step = execute_request(out.params, pending, clients, spec, state, observe);
    out.params = std::move(step.params);
    for (auto& s : step.stages) out.stages.push_back(std::move(s));
  }
  return out;
}

/// Handles several requests as one: a single ascent stage on the union of
/// their forget sets and a single recovery stage. Stage settings come from
/// the first request.
template <class T>
RequestOutcome<T> execute_batch(const ParamSet<T>& params,
                                const std::vector<UnlearningRequest>& requests,
                                const std::vector<ClientState<T>>& clients,
                                const ArchSpec& spec, UnlearnState& state,
                                const StageObserver<T>& observe = {}) {
  if (requests.empty()) throw UnlearnError("execute_batch: no requests");
  UnlearningRequest merged = requests.front();
  merged.targets.clear();
  for (const auto& r : requests) {
    for (const auto& t : r.targets) {
      if (std::find(merged.targets.begin(), merged.targets.end(), t) == merged.targets.end()) {
        merged.targets.push_back(t);
      }
    }
  }
  return execute_sequence(params, {merged}, clients, spec, state, observe);
}

/// Restores unlearned targets: they leave `state`, then every staying client
/// runs `rounds` descent passes over its retained distilled buckets (all
/// classes not still forgotten), aggregated by set size.
template <class T>
RequestOutcome<T> relearn(const ParamSet<T>& params, const std::vector<Target>& targets,
                          std::size_t rounds, const std::vector<ClientState<T>>& clients,
                          const ArchSpec& spec, UnlearnState& state,
                          const UnlearningRequest& settings,
                          const StageObserver<T>& observe = {}) {
  validate_targets(targets, clients);
  std::vector<int> classes;
  for (const auto& t : targets) {
    if (!state.covers(t)) {
      state.warnings.push_back("relearn " + t.str() + ": target was not unlearned");
    }
    if (t.kind == TargetKind::class_label) {
      const int c = static_cast<int>(t.id);
      const bool retained = std::any_of(clients.begin(), clients.end(), [&](const auto& cl) {
        return cl.syn.has(c);
      });
      if (!retained) {
        throw UnlearnError("relearn " + t.str() + ": no synthetic bucket retained");
      }
      state.forgotten_classes.erase(c);
      classes.push_back(c);
    } else {
      if (clients[t.id].syn.total() == 0) {
        throw UnlearnError("relearn " + t.str() + ": no synthetic data retained");
      }
      state.departed_clients.erase(t.id);
      for (int c : clients[t.id].syn.held_classes()) classes.push_back(c);
    }
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  ForgetPartition<T> partition;
  partition.forget_classes = classes;
  for (const auto& client : clients) {
    if (state.departed_clients.contains(client.id)) continue;
    ClientPartition<T> part;
    part.client = client.id;
    part.forget.dims = part.recovery.dims = client.syn.dims;
    for (const auto& [c, bucket] : client.syn.buckets) {
      if (state.forgotten_classes.contains(c)) continue;
      part.remain_classes.push_back(c);
      part.recovery.append_bucket(c, bucket);
    }
    partition.clients.push_back(std::move(part));
  }

  RequestOutcome<T> out{params, {}};
  StageReport stage{Stage::relearn, targets_label(targets), classes, {}, {}, rounds, 0, 0.0};
  const auto start = detail::Clock::now();
  for (std::size_t r = 0; r < rounds; ++r) {
    auto res = recovery_round(out.params, partition, settings.recovery_lr, spec,
                              settings.pass_batch, derive_seed(settings.seed, "relearn", r),
                              settings.threads);
    out.params = std::move(res.params);
    stage.samples += res.samples;
  }
  stage.wall_ms = detail::elapsed_ms(start);
  if (observe) observe(stage, out.params);
  out.stages.push_back(std::move(stage));
  return out;
}

// ---------------------------------------------------------------------------
// Request files
// ---------------------------------------------------------------------------

enum class CommandKind { unlearn, batch, relearn };

struct RequestCommand {
  CommandKind kind = CommandKind::unlearn;
  std::vector<Target> targets;
  std::size_t line = 0;
};

class RequestParseError : public std::runtime_error {
 public:
  RequestParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline Target parse_target(const std::string& token, std::size_t line) {
  const auto eq = token.find('=');
  if (eq == std::string::npos) {
    throw RequestParseError(line, "expected key=value, got '" + token + "'");
  }
  const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
  if (key == "sample") {
    throw RequestParseError(line, "sample-level unlearning is not supported; "
                                  "use class=<id> or client=<id>");
  }
  if (key != "class" && key != "client") {
    throw RequestParseError(line, "unknown target kind '" + key + "'");
  }
  std::size_t pos = 0;
  unsigned long long id = 0;
  try {
    id = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size() || value.front() == '-') {
    throw RequestParseError(line, "invalid id '" + value + "'");
  }
  return {key == "class" ? TargetKind::class_label : TargetKind::client,
          static_cast<std::size_t>(id)};
}

/// `<unlearn|batch|relearn> kind=id[,kind=id...]`; blank lines and lines
/// starting with '#' are ignored.
inline std::vector<RequestCommand> parse_requests(std::istream& in) {
  std::vector<RequestCommand> out;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    std::istringstream words(text);
    std::string verb, list, extra;
    if (!(words >> verb) || verb.front() == '#') continue;
    RequestCommand cmd;
    cmd.line = line;
    if (verb == "unlearn") {
      cmd.kind = CommandKind::unlearn;
    } else if (verb == "batch") {
      cmd.kind = CommandKind::batch;
    } else if (verb == "relearn") {
      cmd.kind = CommandKind::relearn;
    } else {
      throw RequestParseError(line, "unknown command '" + verb + "'");
    }
    if (!(words >> list)) throw RequestParseError(line, "missing targets");
    if (words >> extra) throw RequestParseError(line, "unexpected '" + extra + "'");
    std::istringstream items(list);
    for (std::string token; std::getline(items, token, ',');) {
      cmd.targets.push_back(parse_target(token, line));
    }
    if (cmd.targets.empty()) throw RequestParseError(line, "missing targets");
    out.push_back(std::move(cmd));
  }
  return out;
}

}  // namespace quickdrop
