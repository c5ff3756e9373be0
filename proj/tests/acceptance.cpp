// Desk-scale acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [config] [criterion ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "quickdrop/experiment.hpp"
#include "oracles.hpp"

namespace {

using namespace quickdrop;

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<RequestCommand> commands(const std::string& text) {
  std::istringstream in(text);
  return parse_requests(in);
}

const StageReport& find_stage(const ExperimentReport& r, Stage s, std::size_t nth = 0) {
  for (const auto& st : r.stages) {
    if (st.stage == s && nth-- == 0) return st;
  }
  throw std::runtime_error(r.method + ": missing stage " + to_string(s));
}

const ExperimentReport& find_method(const std::vector<ExperimentReport>& rs,
                                    const std::string& method) {
  for (const auto& r : rs) {
    if (r.method == method) return r;
  }
  throw std::runtime_error("missing report for " + method);
}

std::uint64_t counter(const ExperimentReport& r, const std::string& name) {
  for (const auto& [k, v] : r.counters) {
    if (k == name) return v;
  }
  throw std::runtime_error("missing counter " + name);
}

double class_acc(const StageReport& s, int c) {
  return s.accuracy->class_accuracy(static_cast<std::size_t>(c));
}

std::filesystem::path scratch(const std::string& name) {
  return qdtest::scratch_dir("acceptance_" + name);
}

/// One seed of the configured pipeline: QuickDrop report plus baselines.
struct SeedRun {
  std::vector<ExperimentReport> reports;
  std::size_t held_classes = 0;
};

template <class T>
SeedRun run_seed(const ExperimentConfig& cfg, const std::string& dir) {
  std::ostringstream log;
  Pipeline<T> p(cfg, dir, log);
  p.train();
  const ParamSet<T> trained = p.params();
  p.finetune();
  p.run_commands(cfg.unlearning.requests);
  SeedRun out;
  out.reports.push_back(p.report());
  for (auto& r : p.baselines(trained)) out.reports.push_back(std::move(r));
  for (const auto& c : p.world().clients) out.held_classes += c.syn.held_classes().size();
  return out;
}

SeedRun run_seed(const ExperimentConfig& cfg, const std::string& dir) {
  return cfg.precision == Precision::f64 ? run_seed<double>(cfg, dir) : run_seed<float>(cfg, dir);
}

ExperimentConfig seeded(ExperimentConfig cfg, std::uint64_t seed) {
  reseed(cfg, seed);
  return cfg;
}

// Gradient and hypergradient against central differences, 100 random MLPs.
Outcome autodiff_fd(const ExperimentConfig&) {
  double grad = 0.0, hyper = 0.0;
  std::size_t seeds = 0;
  for (std::uint64_t s = 0; s < 100; ++s, ++seeds) {
    const auto m = qdtest::random_mlp(s);
    grad = std::max(grad, qdtest::grad_fd_error(m));
    hyper = std::max(hyper, qdtest::hypergrad_fd_error(m, s));
  }
  return {grad < 1e-4 && hyper < 1e-3,
          fmt("%zu seeds, max grad rel %.2e, max hypergrad rel %.2e", seeds, grad, hyper)};
}

template <class T, class Batch>
ParamSet<T> fit(ParamSet<T> params, const ArchSpec& spec, std::size_t steps, double lr,
                Batch&& next) {
  for (std::size_t k = 0; k < steps; ++k) {
    const auto [images, labels] = next();
    params = apply_gradient(params, loss_gradient(params, spec, images, labels), lr);
  }
  return params;
}

// A model trained only on the distilled set against one trained on all data.
Outcome distilled_training(const ExperimentConfig& cfg) {
  using T = double;
  BlobSpec b = cfg.dataset.blobs;
  b.classes = 2;
  b.per_class = 500;
  const auto train = synth_blobs(b, cfg.seed, 0);
  BlobSpec tb = b;
  tb.per_class = cfg.dataset.test_per_class;
  const auto test = synth_blobs(tb, cfg.seed, 1);
  ArchSpec spec = cfg.arch;
  spec.input = b.dims;
  spec.classes = 2;

  DistillConfig dc = cfg.fed.distill_cfg;
  dc.scale = 100;
  const auto syn = distill_standalone<T>(train, spec, dc);

  const auto init = init_params<T>(spec, {derive_seed(cfg.seed, "acceptance.fresh")});
  const auto on_syn = fit(init, spec, 300, cfg.fed.lr, [&] {
    return synthetic_batch(syn, syn.held_classes());
  });
  Rng rng = make_rng(cfg.seed, "acceptance.batches");
  const auto on_all = fit(init, spec, 300, cfg.fed.lr, [&] {
    const auto rows = sample_without_replacement(train.size(), 32, rng);
    std::vector<int> labels;
    for (std::size_t r : rows) labels.push_back(train.labels[r]);
    return std::make_pair(gather_images<T>(train, rows), labels);
  });
  const double a_syn = accuracy_report(on_syn, spec, test, {}).overall;
  const double a_all = accuracy_report(on_all, spec, test, {}).overall;
  const std::size_t counts = syn.count(0);
  return {counts == 5 && syn.count(1) == 5 && a_syn >= 0.9 * a_all,
          fmt("%zu synthetic per class, distilled-only acc %.4f vs full %.4f (ratio %.3f)",
              counts, a_syn, a_all, a_syn / a_all)};
}

// Federated trajectories round by round, in 64-bit.
Outcome fedavg_equivalence(const ExperimentConfig& cfg) {
  using T = double;
  const auto world = build_world<T>(cfg);
  FedConfig one = cfg.fed;
  one.rounds = 1;
  using Trainer = std::function<FedResult<T>(std::vector<ClientState<T>>&, const ParamSet<T>&)>;
  auto trajectory = [&](bool with_syn, const Trainer& train) {
    auto clients = make_clients<T>(world.partition.clients, cfg.fed.distill_cfg.scale, cfg.seed,
                                   with_syn);
    std::vector<ParamSet<T>> out{init_params<T>(world.spec, {derive_seed(cfg.seed, "model.init")})};
    for (std::size_t k = 0; k < cfg.fed.rounds; ++k) out.push_back(train(clients, out.back()).params);
    return out;
  };
  FedConfig off = one;
  off.distill = false;
  const auto fedavg = trajectory(false, [&](auto& c, const auto& p) {
    return train_fedavg<T>(c, world.spec, one, p);
  });
  const auto disabled = trajectory(false, [&](auto& c, const auto& p) {
    return train_federated<T>(c, world.spec, off, p);
  });
  const auto enabled = trajectory(true, [&](auto& c, const auto& p) {
    return train_federated<T>(c, world.spec, one, p);
  });
  std::size_t same_off = 0, same_on = 0;
  for (std::size_t k = 0; k < fedavg.size(); ++k) {
    same_off += disabled[k].bitwise_equal(fedavg[k]);
    same_on += enabled[k].bitwise_equal(fedavg[k]);
  }
  const std::size_t n = fedavg.size();
  return {same_off == n && same_on == n,
          fmt("%zu rounds: disabled %zu/%zu bitwise, enabled %zu/%zu bitwise", n - 1, same_off,
              n, same_on, n)};
}

// One class request per seed, reused by the criteria that compare against
// the baselines.
const std::vector<SeedRun>& class_runs(const ExperimentConfig& cfg) {
  static std::map<const ExperimentConfig*, std::vector<SeedRun>> cache;
  auto& runs = cache[&cfg];
  if (runs.empty()) {
    for (std::uint64_t s : kSeeds) {
      runs.push_back(run_seed(seeded(cfg, s), scratch("seed" + std::to_string(s)).string()));
    }
  }
  return runs;
}

Outcome class_unlearning(const ExperimentConfig& cfg) {
  std::vector<double> f, r, r_retrain;
  for (const auto& run : class_runs(cfg)) {
    const auto& rec = find_stage(find_method(run.reports, "quickdrop"), Stage::recover);
    f.push_back(*rec.accuracy->fset);
    r.push_back(*rec.accuracy->rset);
    r_retrain.push_back(*find_stage(find_method(run.reports, "retrain"), Stage::unlearn).accuracy->rset);
  }
  const double gap = std::abs(mean(r) - mean(r_retrain));
  return {mean(f) < 0.05 && gap <= 0.10,
          fmt("mean over %zu seeds: F-Set %.2f%%, R-Set %.2f%% vs retrain %.2f%% (gap %.2f pts)",
              f.size(), 100 * mean(f), 100 * mean(r), 100 * mean(r_retrain), 100 * gap)};
}

Outcome unlearning_cost(const ExperimentConfig& cfg) {
  const auto& run = class_runs(cfg).front();
  auto total = [&](const std::string& m, std::uint64_t& samples, double& ms) {
    samples = 0;
    ms = 0;
    for (const auto& s : find_method(run.reports, m).stages) {
      if (s.stage == Stage::train) continue;
      samples += s.samples;
      ms += s.wall_ms;
    }
  };
  std::uint64_t qd = 0, sga = 0, retrain = 0;
  double qd_ms = 0, sga_ms = 0, retrain_ms = 0;
  total("quickdrop", qd, qd_ms);
  total("sga_or", sga, sga_ms);
  total("retrain", retrain, retrain_ms);
  const double bound = static_cast<double>(sga) / (cfg.fed.distill_cfg.scale / 2.0);
  return {static_cast<double>(qd) <= bound && qd_ms < sga_ms && sga_ms < retrain_ms,
          fmt("samples %llu <= %.1f (SGA-Or %llu); wall ms %.2f < %.2f < %.2f",
              static_cast<unsigned long long>(qd), bound, static_cast<unsigned long long>(sga),
              qd_ms, sga_ms, retrain_ms)};
}

Outcome sequential_unlearning(const ExperimentConfig& base) {
  const std::vector<int> targets{3, 5, 7};
  ExperimentConfig cfg = base;
  cfg.unlearning.requests = commands("unlearn class=3\nunlearn class=5\nunlearn class=7\n");
  cfg.baselines.retrain = cfg.baselines.sga_or = false;
  cfg.mia.enabled = false;
  // Per-class accuracy after each stage, averaged over seeds. Stage 0 is
  // training, then an unlearn and a recover stage per request.
  std::vector<std::vector<double>> acc;
  for (std::uint64_t s : kSeeds) {
    const auto run = run_seed(seeded(cfg, s), scratch("sequence").string());
    const auto& stages = run.reports.front().stages;
    acc.resize(stages.size(), std::vector<double>(cfg.dataset.classes, 0.0));
    for (std::size_t i = 0; i < stages.size(); ++i) {
      for (int c = 0; c < static_cast<int>(cfg.dataset.classes); ++c) {
        acc[i][c] += class_acc(stages[i], c) / static_cast<double>(std::size(kSeeds));
      }
    }
  }
  double worst_forgotten = 0.0, worst_drift = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    // From this request's recovery stage to the end.
    for (std::size_t i = 2 * k + 2; i < acc.size(); ++i) {
      worst_forgotten = std::max(worst_forgotten, acc[i][targets[k]]);
    }
  }
  for (int c = 0; c < static_cast<int>(cfg.dataset.classes); ++c) {
    if (std::find(targets.begin(), targets.end(), c) != targets.end()) continue;
    worst_drift = std::max(worst_drift, std::abs(acc.front()[c] - acc.back()[c]));
  }
  return {worst_forgotten < 0.05 && worst_drift <= 0.10,
          fmt("mean over %zu seeds: max unlearned-class acc %.2f%%, max retained-class change "
              "%.2f pts",
              std::size(kSeeds), 100 * worst_forgotten, 100 * worst_drift)};
}

Outcome finetune_effect(const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  cfg.baselines.retrain = cfg.baselines.sga_or = false;
  cfg.mia.enabled = false;
  std::vector<double> r0, r50;
  bool counters_exact = true;
  for (std::uint64_t s : kSeeds) {
    cfg.finetune_steps = 0;
    const auto a = run_seed(seeded(cfg, s), scratch("finetune").string());
    cfg.finetune_steps = 50;
    const auto b = run_seed(seeded(cfg, s), scratch("finetune").string());
    const auto& qa = a.reports.front();
    const auto& qb = b.reports.front();
    r0.push_back(*find_stage(qa, Stage::recover).accuracy->rset);
    r50.push_back(*find_stage(qb, Stage::recover).accuracy->rset);
    const std::uint64_t steps0 = counter(qa, "train_match_steps") + counter(qa, "finetune_match_steps");
    const std::uint64_t steps50 = counter(qb, "train_match_steps") + counter(qb, "finetune_match_steps");
    counters_exact = counters_exact && a.held_classes == b.held_classes &&
                     steps50 == steps0 + 50 * cfg.fed.distill_cfg.inner_steps * a.held_classes;
  }
  return {mean(r50) >= mean(r0) && counters_exact,
          fmt("mean R-Set F=50 %.2f%% vs F=0 %.2f%%; step counters %s", 100 * mean(r50),
              100 * mean(r0), counters_exact ? "exact" : "MISMATCH")};
}

Outcome membership_inference(const ExperimentConfig& cfg) {
  std::vector<double> before, after, retrain;
  for (const auto& run : class_runs(cfg)) {
    const auto& qd = find_method(run.reports, "quickdrop");
    before.push_back(find_stage(qd, Stage::train).mia->forget_member_rate);
    after.push_back(find_stage(qd, Stage::recover).mia->forget_member_rate);
    retrain.push_back(
        find_stage(find_method(run.reports, "retrain"), Stage::unlearn).mia->forget_member_rate);
  }
  const double gap = std::abs(mean(after) - mean(retrain));
  return {mean(after) <= mean(before) && gap <= 0.15,
          fmt("forget member rate over %zu seeds: before %.2f%%, after %.2f%%, retrain %.2f%%",
              before.size(), 100 * mean(before), 100 * mean(after), 100 * mean(retrain))};
}

template <class T>
bool checkpoints_round_trip(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  const auto world = build_world<T>(cfg);
  bool ok = true;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto params = init_params<T>(world.spec, {s});
    const auto path = (dir / "m.qdmd").string();
    save_model(path, params, world.spec);
    ok = ok && load_model<T>(path, world.spec).bitwise_equal(params);
  }
  for (const auto& c : world.clients) {
    DistillConfig dc = cfg.fed.distill_cfg;
    dc.outer_steps = 2;
    const auto syn = distill_standalone<T>(c.data, world.spec, dc);
    const auto path = (dir / "s.qdsy").string();
    save_synthetic(path, syn);
    ok = ok && load_synthetic<T>(path).bitwise_equal(syn);
  }
  return ok;
}

Outcome determinism(const ExperimentConfig& cfg) {
  std::vector<std::filesystem::path> dirs{scratch("determinism_a"), scratch("determinism_b")};
  std::ostringstream log;
  for (const auto& d : dirs) {
    if (cfg.precision == Precision::f64) {
      run_experiment<double>(cfg, d.string(), log);
    } else {
      run_experiment<float>(cfg, d.string(), log);
    }
  }
  std::size_t compared = 0, identical = 0;
  for (const auto& e : std::filesystem::directory_iterator(dirs[0])) {
    const auto ext = e.path().extension();
    if (ext != ".json" && ext != ".qdmd" && ext != ".qdsy") continue;
    ++compared;
    identical += read_bytes(e.path()) == read_bytes(dirs[1] / e.path().filename());
  }
  const auto ck = scratch("checkpoints");
  const bool trip = checkpoints_round_trip<float>(cfg, ck) && checkpoints_round_trip<double>(cfg, ck);
  return {compared > 0 && identical == compared && trip,
          fmt("%zu/%zu report and checkpoint files byte-identical; round-trips %s", identical,
              compared, trip ? "bitwise" : "DIFFER")};
}

Outcome partition_properties(const ExperimentConfig& cfg) {
  BlobSpec b = cfg.dataset.blobs;
  b.per_class = 97;
  const auto data = synth_blobs(b, cfg.seed, 0);
  std::vector<std::size_t> all = data.ids;
  std::sort(all.begin(), all.end());
  std::size_t cases = 0, conserved = 0, balanced = 0, balanced_cases = 0;
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t n : {2u, 4u, 10u}) {
    for (double alpha : {0.1, 0.5, 1.0, 100.0, inf}) {
      for (std::uint64_t s = 0; s < 5; ++s) {
        for (auto mode : {PartitionMode::per_class, PartitionMode::per_client}) {
          const auto part = dirichlet_partition(data, n, alpha, s, mode);
          std::vector<std::size_t> ids;
          bool rows_match = true;
          for (const auto& c : part.clients) {
            for (std::size_t r = 0; r < c.size(); ++r) {
              ids.push_back(c.ids[r]);
              rows_match = rows_match && c.labels[r] == data.labels[c.ids[r]] &&
                           std::equal(c.sample(r).begin(), c.sample(r).end(),
                                      data.sample(c.ids[r]).begin());
            }
          }
          std::sort(ids.begin(), ids.end());
          ++cases;
          conserved += ids == all && rows_match;
          if (alpha != inf) continue;
          ++balanced_cases;
          bool ok = true;
          for (std::size_t c = 0; c < b.classes; ++c) {
            const double share = static_cast<double>(b.per_class) / static_cast<double>(n);
            for (const auto& row : part.plan.counts) {
              ok = ok && std::abs(static_cast<double>(row[c]) - share) <= 1.0;
            }
          }
          balanced += ok;
        }
      }
    }
  }
  return {conserved == cases && balanced == balanced_cases,
          fmt("multiset conserved in %zu/%zu partitions; alpha=inf within +-1 in %zu/%zu",
              conserved, cases, balanced, balanced_cases)};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)(const ExperimentConfig&);
};

}  // namespace

int main(int argc, char** argv) {
  std::string config = std::string(QDROP_SOURCE_DIR) + "/configs/desk.json";
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (!a.empty() && std::all_of(a.begin(), a.end(), ::isdigit)) {
      only.push_back(std::stoi(a));
    } else {
      config = a;
    }
  }
  const ExperimentConfig cfg = load_config(config);
  const std::vector<Criterion> criteria{
      {1, "autodiff matches finite differences", autodiff_fd},
      {2, "distilled set trains a model", distilled_training},
      {3, "distillation leaves FedAvg trajectory bitwise", fedavg_equivalence},
      {4, "class unlearning forgets and recovers", class_unlearning},
      {5, "unlearning cost below SGA-Or and retraining", unlearning_cost},
      {6, "sequential unlearning of three classes", sequential_unlearning},
      {7, "fine-tuning the distilled sets", finetune_effect},
      {8, "membership inference after unlearning", membership_inference},
      {9, "deterministic reports and checkpoints", determinism},
      {10, "Dirichlet partition properties", partition_properties},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(cfg);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail
              << fmt(" (%.1fs)", secs) << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
