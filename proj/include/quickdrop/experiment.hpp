#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "quickdrop/baselines.hpp"
#include "quickdrop/checkpoint.hpp"
#include "quickdrop/config.hpp"
#include "quickdrop/metrics.hpp"
#include "quickdrop/report.hpp"
#include "quickdrop/unlearn.hpp"

namespace quickdrop {

/// A numeric failure, tagged with the pipeline stage it happened in.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto in_stage(const std::string& stage, F&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw StageFailure(stage, e.what());
  }
}

/// Train and test sets as the config describes them.
inline std::pair<LabeledDataset, LabeledDataset> load_datasets(const ExperimentConfig& cfg) {
  const DatasetConfig& d = cfg.dataset;
  if (d.kind == DatasetKind::blobs) {
    const std::uint64_t seed = derive_seed(cfg.seed, "blobs");
    BlobSpec test_spec = d.blobs;
    test_spec.per_class = d.test_per_class;
    return {synth_blobs(d.blobs, seed, 0), synth_blobs(test_spec, seed, 1)};
  }
  LabeledDataset train = load_idx(d.train_images, d.train_labels, d.classes);
  if (d.subset < 1.0) train = stratified_subset(train, d.subset, derive_seed(cfg.seed, "subset"));
  return {std::move(train), load_idx(d.test_images, d.test_labels, d.classes)};
}

template <class T>
struct World {
  LabeledDataset train;
  LabeledDataset test;
  Partition partition;
  ArchSpec spec;
  std::vector<ClientState<T>> clients;
};

/// Everything here is a pure function of the config, including the seed.
template <class T>
World<T> build_world(const ExperimentConfig& cfg) {
  World<T> w;
  std::tie(w.train, w.test) = load_datasets(cfg);
  w.spec = cfg.arch;
  w.spec.input = w.train.dims;
  w.spec.classes = w.train.classes;
  w.partition = dirichlet_partition(w.train, cfg.clients, cfg.alpha, cfg.seed, cfg.partition_mode);
  w.clients = make_clients<T>(w.partition.clients, cfg.fed.distill_cfg.scale, cfg.seed,
                              cfg.fed.distill);
  return w;
}

struct MiaPools {
  LabeledDataset members, nonmembers, forget;
};

/// Forget pool: training samples of the targeted classes or clients. Members:
/// the other training samples outside `excluded` classes. Non-members: test
/// samples of the same remaining classes.
template <class T>
MiaPools mia_pools(const World<T>& w, const std::vector<Target>& targets,
                   const std::set<int>& excluded) {
  std::set<int> classes = excluded;
  std::set<std::size_t> leaving;
  for (const auto& t : targets) {
    if (t.kind == TargetKind::class_label) {
      classes.insert(static_cast<int>(t.id));
    } else {
      leaving.insert(t.id);
    }
  }
  MiaPools p{w.train.empty_like("mia.members"), w.test.empty_like("mia.nonmembers"),
             w.train.empty_like("mia.forget")};
  for (const auto& c : w.clients) {
    for (std::size_t r = 0; r < c.data.size(); ++r) {
      const int y = c.data.labels[r];
      const bool forget = leaving.contains(c.id) ||
                          (classes.contains(y) && !excluded.contains(y));
      if (forget) {
        p.forget.push_back(c.data.sample(r), y, c.data.ids[r]);
      } else if (!classes.contains(y)) {
        p.members.push_back(c.data.sample(r), y, c.data.ids[r]);
      }
    }
  }
  for (std::size_t r = 0; r < w.test.size(); ++r) {
    if (!classes.contains(w.test.labels[r])) {
      p.nonmembers.push_back(w.test.sample(r), w.test.labels[r], w.test.ids[r]);
    }
  }
  return p;
}

template <class T>
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, std::string out_dir, std::ostream& log)
      : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)), log_(log) {
    std::filesystem::create_directories(out_dir_);
    world_ = build_world<T>(cfg_);
    report_.method = "quickdrop";
    report_.seed = cfg_.seed;
  }

  World<T>& world() { return world_; }
  const ParamSet<T>& params() const { return params_; }
  ExperimentReport& report() { return report_; }
  const std::vector<std::string>& files() const { return files_; }

  /// Targets of the first unlearning command; they define the F-Set before
  /// any unlearning has happened.
  std::vector<Target> first_targets(const std::vector<RequestCommand>& cmds) const {
    for (const auto& c : cmds) {
      if (c.kind != CommandKind::relearn) return c.targets;
    }
    return {};
  }

  StageObserver<T> observer(const std::vector<Target>& targets, std::set<int> excluded) {
    return [this, targets, excluded](StageReport& s, const ParamSet<T>& p) {
      s.accuracy = accuracy_report(p, world_.spec, world_.test, s.forget_classes);
      if (!cfg_.mia.enabled || targets.empty()) return;
      const MiaPools pools = mia_pools(world_, targets, excluded);
      try {
        s.mia = mia_attack(p, world_.spec, pools.members, pools.nonmembers, pools.forget,
                           MiaConfig{derive_seed(cfg_.seed, "mia"), cfg_.mia.max_pool});
      } catch (const std::invalid_argument& e) {
        report_.warnings.push_back(std::string("membership inference skipped: ") + e.what());
      }
    };
  }

  void train() {
    const auto targets = first_targets(cfg_.unlearning.requests);
    FedResult<T> res = in_stage("train", [&] { return train_federated(world_.clients, world_.spec, cfg_.fed); });
    params_ = std::move(res.params);
    StageReport stage{Stage::train, "", target_classes(targets, world_.partition.clients), {}, {},
                      cfg_.fed.rounds, res.samples, res.wall_ms};
    observer(targets, {})(stage, params_);
    report_.stages.push_back(std::move(stage));
    std::uint64_t match = 0, reuse = 0, skipped = 0;
    for (const auto& c : world_.clients) {
      match += c.counters.match_steps;
      reuse += c.reuse_count;
      skipped += c.counters.skipped_classes;
    }
    report_.counters.emplace_back("train_match_steps", match);
    report_.counters.emplace_back("gradient_reuse", reuse);
    report_.counters.emplace_back("skipped_classes", skipped);
    write_round_csv(path("rounds.csv"), res.records);
    files_.push_back(path("rounds.csv"));
    log_ << "train: " << res.records.size() << " rounds, test accuracy "
         << report_.stages.back().accuracy->overall << "\n";
  }

  /// F further matching loops per client on its own data.
  void finetune() {
    std::uint64_t steps = 0;
    for (auto& c : world_.clients) {
      if (cfg_.finetune_steps == 0 || c.syn.total() == 0) continue;
      DistillConfig dc = cfg_.fed.distill_cfg;
      dc.seed = derive_seed(cfg_.seed, "finetune", c.id);
      DistillCounters counters;
      c.syn = in_stage("finetune", [&] {
        return fine_tune(c.syn, c.data, world_.spec, cfg_.finetune_steps, dc, &counters);
      });
      steps += counters.match_steps;
    }
    report_.counters.emplace_back("finetune_match_steps", steps);
  }

  /// Standalone distillation per client, replacing the in-training sets.
  void distill_standalone_sets() {
    for (auto& c : world_.clients) {
      DistillConfig dc = cfg_.fed.distill_cfg;
      dc.seed = derive_seed(cfg_.seed, "distill", c.id);
      c.syn = in_stage("distill", [&] { return distill_standalone<T>(c.data, world_.spec, dc); });
    }
  }

  void save_model(const std::string& name) {
    quickdrop::save_model(path(name), params_, world_.spec);
    files_.push_back(path(name));
  }

  void save_synthetic() {
    for (const auto& c : world_.clients) {
      const std::string name = "synthetic_client" + std::to_string(c.id) + ".qdsy";
      quickdrop::save_synthetic(path(name), c.syn);
      files_.push_back(path(name));
    }
  }

  void load_checkpoints(const std::string& model_name) {
    params_ = quickdrop::load_model<T>(path(model_name), world_.spec);
    for (auto& c : world_.clients) {
      c.syn = quickdrop::load_synthetic<T>(path("synthetic_client" + std::to_string(c.id) + ".qdsy"));
    }
  }

  void run_commands(const std::vector<RequestCommand>& cmds) {
    for (const auto& cmd : cmds) {
      UnlearningRequest req = cfg_.unlearning.defaults;
      req.targets = cmd.targets;
      req.seed = derive_seed(req.seed, "request", cmd_index_++);
      std::set<int> excluded = state_.forgotten_classes;
      if (cmd.kind == CommandKind::relearn) {
        for (const auto& t : cmd.targets) {
          if (t.kind == TargetKind::class_label) excluded.erase(static_cast<int>(t.id));
        }
      }
      const auto observe = observer(cmd.targets, excluded);
      RequestOutcome<T> out = in_stage(cmd.kind == CommandKind::relearn ? "relearn" : "unlearn", [&] {
        if (cmd.kind == CommandKind::relearn) {
          return relearn(params_, cmd.targets, cfg_.unlearning.relearn_rounds, world_.clients,
                         world_.spec, state_, req, observe);
        }
        return execute_batch(params_, {req}, world_.clients, world_.spec, state_, observe);
      });
      params_ = std::move(out.params);
      for (auto& s : out.stages) {
        log_ << to_string(s.stage) << " " << s.label << ": F-Set "
             << (s.accuracy && s.accuracy->fset ? *s.accuracy->fset : 0.0) << ", R-Set "
             << (s.accuracy && s.accuracy->rset ? *s.accuracy->rset : 0.0) << "\n";
        report_.stages.push_back(std::move(s));
      }
    }
    for (const auto& w : state_.warnings) {
      log_ << "warning: " << w << "\n";
      report_.warnings.push_back(w);
    }
    state_.warnings.clear();
  }

  /// Baselines for the first unlearning command, each with its own report.
  std::vector<ExperimentReport> baselines(const ParamSet<T>& trained) {
    std::vector<ExperimentReport> out;
    const auto targets = first_targets(cfg_.unlearning.requests);
    if (targets.empty()) return out;
    if (cfg_.baselines.retrain) {
      ExperimentReport r{"retrain", cfg_.seed, {}, {}, {}};
      auto res = in_stage("retrain", [&] {
        return retrain_baseline<T>(world_.partition.clients, targets, world_.spec, cfg_.fed,
                                   observer(targets, {}));
      });
      r.stages.push_back(std::move(res.stage));
      out.push_back(std::move(r));
    }
    if (cfg_.baselines.sga_or) {
      ExperimentReport r{"sga_or", cfg_.seed, {}, {}, {}};
      UnlearningRequest req = cfg_.unlearning.defaults;
      req.targets = targets;
      req.sga_lr = cfg_.baselines.sga_or_sga_lr;
      req.recovery_lr = cfg_.baselines.sga_or_recovery_lr;
      req.seed = derive_seed(cfg_.seed, "sga_or");
      auto res = in_stage("sga_or", [&] {
        return sga_or_baseline(trained, world_.clients, req, world_.spec, observer(targets, {}));
      });
      r.stages = std::move(res.stages);
      out.push_back(std::move(r));
    }
    return out;
  }

  void write(const ExperimentReport& r) {
    write_report(out_dir_, r);
    files_.push_back(path(r.file_stem() + ".json"));
    files_.push_back(path(r.file_stem() + ".csv"));
  }

  std::string path(const std::string& name) const { return out_dir_ + "/" + name; }

 private:
  ExperimentConfig cfg_;
  std::string out_dir_;
  std::ostream& log_;
  World<T> world_;
  ParamSet<T> params_;
  ExperimentReport report_;
  UnlearnState state_;
  std::size_t cmd_index_ = 0;
  std::vector<std::string> files_;
};

struct RunSummary {
  std::vector<ExperimentReport> reports;
  std::vector<std::string> files;
};

/// The whole workflow: federated training with in-situ distillation,
/// fine-tuning, the configured unlearning / relearning requests, then the
/// baselines. Writes checkpoints, the round log and one report per method.
template <class T>
RunSummary run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                          std::ostream& log) {
  Pipeline<T> p(cfg, out_dir, log);
  p.train();
  const ParamSet<T> trained = p.params();
  p.save_model("model_trained.qdmd");
  p.finetune();
  p.save_synthetic();
  p.run_commands(cfg.unlearning.requests);
  p.save_model("model_final.qdmd");
  RunSummary out;
  out.reports.push_back(p.report());
  for (auto& r : p.baselines(trained)) out.reports.push_back(std::move(r));
  for (const auto& r : out.reports) p.write(r);
  out.files = p.files();
  return out;
}

}  // namespace quickdrop
