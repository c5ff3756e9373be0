#pragma once

#include <chrono>
#include <set>
#include <vector>

#include "quickdrop/federated.hpp"
#include "quickdrop/report.hpp"
#include "quickdrop/unlearn.hpp"

namespace quickdrop {

template <class T>
struct BaselineOutcome {
  ParamSet<T> params;
  StageReport stage;
  std::vector<RoundRecord> records;
};

/// Classes named by `targets`, plus every class a targeted client holds.
inline std::vector<int> target_classes(const std::vector<Target>& targets,
                                       const std::vector<LabeledDataset>& datasets) {
  std::set<int> out;
  for (const auto& t : targets) {
    if (t.kind == TargetKind::class_label) {
      out.insert(static_cast<int>(t.id));
    } else {
      for (int y : datasets.at(t.id).labels) out.insert(y);
    }
  }
  return {out.begin(), out.end()};
}

/// Federated training from scratch on the original data minus every target.
/// Clients keep their ids (and so their random streams); clients left with
/// no data sit out. The single stage is reported as the unlearning stage.
template <class T>
BaselineOutcome<T> retrain_baseline(const std::vector<LabeledDataset>& datasets,
                                    const std::vector<Target>& targets, const ArchSpec& spec,
                                    FedConfig cfg, const StageObserver<T>& observe = {}) {
  std::set<int> drop_classes;
  std::set<std::size_t> drop_clients;
  for (const auto& t : targets) {
    if (t.kind == TargetKind::class_label) {
      drop_classes.insert(static_cast<int>(t.id));
    } else {
      if (t.id >= datasets.size()) {
        throw UnlearnError("unknown client id " + std::to_string(t.id));
      }
      drop_clients.insert(t.id);
    }
  }
  std::vector<LabeledDataset> kept;
  for (const auto& d : datasets) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < d.size(); ++r) {
      if (!drop_classes.contains(d.labels[r])) rows.push_back(r);
    }
    kept.push_back(d.select(rows, d.provenance));
  }
  auto all = make_clients<T>(kept, cfg.distill_cfg.scale, cfg.seed, false);
  std::vector<ClientState<T>> clients;
  for (auto& c : all) {
    if (!c.data.empty() && !drop_clients.contains(c.id)) clients.push_back(std::move(c));
  }
  if (clients.empty()) throw UnlearnError("retrain_baseline: no data left to train on");

  cfg.distill = false;
  const auto start = std::chrono::steady_clock::now();
  FedResult<T> result = train_fedavg(clients, spec, cfg);
  BaselineOutcome<T> out;
  out.stage = StageReport{Stage::unlearn, targets_label(targets),
                          target_classes(targets, datasets), {}, {}, cfg.rounds,
                          result.samples, 0.0};
  out.stage.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.params = std::move(result.params);
  out.records = std::move(result.records);
  if (observe) observe(out.stage, out.params);
  return out;
}

/// Ascent then recovery on the original forget and remaining data: the
/// unlearning protocol with distilled sets replaced by real ones and no
/// mix-ins. Defaults to 2 ascent and 2 recovery rounds.
template <class T>
RequestOutcome<T> sga_or_baseline(const ParamSet<T>& params, const std::vector<ClientState<T>>& clients,
                                  UnlearningRequest request, const ArchSpec& spec,
                                  const StageObserver<T>& observe = {},
                                  std::size_t unlearn_rounds = 2, std::size_t recovery_rounds = 2) {
  request.unlearn_rounds = unlearn_rounds;
  request.recovery_rounds = recovery_rounds;
  request.mix_per_class = 0;
  UnlearnState state;
  return execute_request(params, request, clients, spec, state, observe, DataSource::original);
}

}  // namespace quickdrop
