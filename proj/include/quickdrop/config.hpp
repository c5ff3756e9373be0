#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "quickdrop/data.hpp"
#include "quickdrop/distill.hpp"
#include "quickdrop/federated.hpp"
#include "quickdrop/model.hpp"
#include "quickdrop/unlearn.hpp"

namespace quickdrop {

enum class DatasetKind { blobs, idx };
enum class Precision { f32, f64 };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::blobs;
  BlobSpec blobs;
  std::size_t test_per_class = 100;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t classes = 10;
  /// Stratified fraction of the IDX training set to keep.
  double subset = 1.0;
};

struct UnlearnConfig {
  UnlearningRequest defaults;
  std::size_t relearn_rounds = 2;
  std::vector<RequestCommand> requests;
};

struct BaselineConfig {
  bool retrain = true;
  bool sga_or = true;
  double sga_or_sga_lr = 0.01;
  double sga_or_recovery_lr = 0.01;
};

struct MiaSettings {
  bool enabled = true;
  std::size_t max_pool = 1000;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  Precision precision = Precision::f32;
  DatasetConfig dataset;
  std::size_t clients = 10;
  double alpha = 0.1;
  PartitionMode partition_mode = PartitionMode::per_class;
  FedConfig fed;
  ArchSpec arch;
  std::size_t finetune_steps = 0;
  UnlearnConfig unlearning;
  BaselineConfig baselines;
  MiaSettings mia;
};

/// Sets the master seed and every stream seed derived from it.
inline void reseed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.fed.seed = seed;
  cfg.fed.distill_cfg.seed = seed;
  cfg.unlearning.defaults.seed = derive_seed(seed, "unlearning");
}

struct ConfigIssue {
  std::string field;
  std::string message;

  std::string str() const { return field.empty() ? message : field + ": " + message; }
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues)
      : std::runtime_error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<ConfigIssue>& issues) {
    std::string out;
    for (const auto& i : issues) out += (out.empty() ? "" : "\n") + i.str();
    return out;
  }
  std::vector<ConfigIssue> issues_;
};

namespace detail {

using json = nlohmann::json;

// Typed access to one JSON object that records problems instead of throwing
// and flags keys nobody asked for.
class Fields {
 public:
  Fields(const json* j, std::string path, std::vector<ConfigIssue>& issues)
      : j_(j), path_(std::move(path)), issues_(issues) {
    if (j_ && !j_->is_object()) {
      fail("", "expected an object");
      j_ = nullptr;
    }
  }

  std::string at(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void fail(const std::string& key, const std::string& msg) const {
    issues_.push_back({key.empty() ? path_ : at(key), msg});
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    if (!j_) return nullptr;
    auto it = j_->find(key);
    return it == j_->end() ? nullptr : &*it;
  }

  bool has(const std::string& key) { return find(key) != nullptr; }

  Fields child(const std::string& key) { return Fields(find(key), at(key), issues_); }

  double number(const std::string& key, double def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number()) {
      fail(key, "expected a number");
      return def;
    }
    return v->get<double>();
  }

  std::size_t count(const std::string& key, std::size_t def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_number_integer() || v->get<long long>() < 0) {
      fail(key, "expected a non-negative integer");
      return def;
    }
    return v->get<std::size_t>();
  }

  bool flag(const std::string& key, bool def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_boolean()) {
      fail(key, "expected true or false");
      return def;
    }
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& def) {
    const json* v = find(key);
    if (!v) return def;
    if (!v->is_string()) {
      fail(key, "expected a string");
      return def;
    }
    return v->get<std::string>();
  }

  std::string choice(const std::string& key, const std::string& def,
                     const std::vector<std::string>& allowed) {
    std::string v = text(key, def);
    for (const auto& a : allowed) {
      if (v == a) return v;
    }
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    fail(key, "'" + v + "' is not one of: " + list);
    return def;
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> def) {
    const json* v = find(key);
    if (!v) return def;
    std::vector<std::size_t> out;
    if (!v->is_array()) {
      fail(key, "expected an array of non-negative integers");
      return def;
    }
    for (const auto& e : *v) {
      if (!e.is_number_integer() || e.get<long long>() < 0) {
        fail(key, "expected an array of non-negative integers");
        return def;
      }
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  /// Reports keys that were never read.
  void finish() const {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!seen_.contains(it.key())) fail(it.key(), "unknown field");
    }
  }

 private:
  const json* j_;
  std::string path_;
  std::vector<ConfigIssue>& issues_;
  std::set<std::string> seen_;
};

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

inline void parse_dataset(Fields f, const std::filesystem::path& base, DatasetConfig& d) {
  const std::string kind = f.choice("kind", "blobs", {"blobs", "idx"});
  d.kind = kind == "idx" ? DatasetKind::idx : DatasetKind::blobs;
  d.classes = f.count("classes", 10);
  if (d.classes < 2) f.fail("classes", "must be >= 2");
  if (d.kind == DatasetKind::blobs) {
    d.blobs.classes = d.classes;
    d.blobs.per_class = f.count("per_class", 100);
    d.test_per_class = f.count("test_per_class", 100);
    const auto dims = f.counts("dims", {1, 8, 8});
    if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
      f.fail("dims", "expected [channels, height, width] with positive entries");
    } else {
      d.blobs.dims = {dims[0], dims[1], dims[2]};
    }
    d.blobs.separation = f.number("separation", 3.0);
    d.blobs.noise = f.number("noise", 0.1);
    if (d.blobs.per_class == 0) f.fail("per_class", "must be >= 1");
    if (d.test_per_class == 0) f.fail("test_per_class", "must be >= 1");
    if (!(d.blobs.separation >= 0.0)) f.fail("separation", "must be >= 0");
    if (!(d.blobs.noise >= 0.0)) f.fail("noise", "must be >= 0");
  } else {
    for (auto [key, target] : {std::pair{"train_images", &d.train_images},
                               std::pair{"train_labels", &d.train_labels},
                               std::pair{"test_images", &d.test_images},
                               std::pair{"test_labels", &d.test_labels}}) {
      *target = resolve(base, f.text(key, ""));
      if (target->empty()) {
        f.fail(key, "required for idx datasets");
      } else if (!std::filesystem::exists(*target)) {
        f.fail(key, "file not found: " + *target);
      }
    }
    d.subset = f.number("subset", 1.0);
    if (!(d.subset > 0.0 && d.subset <= 1.0)) f.fail("subset", "must be in (0,1]");
  }
  f.finish();
}

inline void parse_model(Fields f, ArchSpec& a) {
  a.kind = f.choice("kind", "mlp", {"mlp", "convnet"}) == "convnet" ? ArchKind::convnet
                                                                    : ArchKind::mlp;
  a.hidden = f.counts("hidden", a.hidden);
  a.depth = f.count("depth", a.depth);
  a.width = f.count("width", a.width);
  a.kernel = f.count("kernel", a.kernel);
  a.pool = f.count("pool", a.pool);
  a.norm = f.choice("norm", "instance", {"instance", "none"}) == "none" ? NormKind::none
                                                                       : NormKind::instance;
  a.activation = f.choice("activation", "relu", {"relu", "tanh"}) == "tanh" ? Activation::tanh
                                                                           : Activation::relu;
  f.finish();
}

inline void parse_requests_field(Fields& f, const std::string& key,
                                 std::vector<RequestCommand>& out) {
  const json* v = f.find(key);
  if (!v) return;
  if (!v->is_array()) {
    f.fail(key, "expected an array of request lines");
    return;
  }
  for (std::size_t i = 0; i < v->size(); ++i) {
    const auto& line = (*v)[i];
    const std::string field = key + "[" + std::to_string(i) + "]";
    if (!line.is_string()) {
      f.fail(field, "expected a request line such as \"unlearn class=9\"");
      continue;
    }
    try {
      std::istringstream in(line.get<std::string>());
      for (auto& cmd : parse_requests(in)) {
        cmd.line = i;
        out.push_back(std::move(cmd));
      }
    } catch (const RequestParseError& e) {
      std::string msg = e.what();
      f.fail(field, msg.substr(msg.find(": ") + 2));
    }
  }
}

}  // namespace detail

/// Parses and checks a config. All problems are collected in `issues`; the
/// returned config is only meaningful when `issues` stays empty.
inline ExperimentConfig parse_config(const nlohmann::json& root,
                                     const std::filesystem::path& base_dir,
                                     std::vector<ConfigIssue>& issues) {
  using detail::Fields;
  ExperimentConfig cfg;
  Fields top(&root, "", issues);
  if (!root.is_object()) return cfg;

  if (const auto* seed = top.find("seed"); !seed) {
    top.fail("seed", "required (runs are seeded explicitly)");
  } else if (!seed->is_number_unsigned()) {
    top.fail("seed", "expected a non-negative integer");
  } else {
    cfg.seed = seed->get<std::uint64_t>();
  }
  cfg.output_dir = top.text("output_dir", cfg.output_dir);
  cfg.precision =
      top.choice("precision", "float", {"float", "double"}) == "double" ? Precision::f64
                                                                          : Precision::f32;

  detail::parse_dataset(top.child("dataset"), base_dir, cfg.dataset);
  cfg.arch.classes = cfg.dataset.classes;
  cfg.arch.input = cfg.dataset.kind == DatasetKind::blobs ? cfg.dataset.blobs.dims
                                                          : ImageDims{1, 28, 28};

  {
    Fields f = top.child("federation");
    cfg.clients = f.count("clients", cfg.clients);
    if (cfg.clients == 0) f.fail("clients", "must be >= 1");
    if (const auto* a = f.find("alpha"); a && a->is_string()) {
      if (a->get<std::string>() == "inf") {
        cfg.alpha = std::numeric_limits<double>::infinity();
      } else {
        f.fail("alpha", "expected a positive number or \"inf\"");
      }
    } else {
      cfg.alpha = f.number("alpha", cfg.alpha);
      if (!(cfg.alpha > 0.0)) f.fail("alpha", "must be > 0 (got " + std::to_string(cfg.alpha) + ")");
    }
    cfg.partition_mode = f.choice("partition_mode", "per_class", {"per_class", "per_client"}) ==
                                 "per_client"
                             ? PartitionMode::per_client
                             : PartitionMode::per_class;
    cfg.fed.participation = f.number("participation", cfg.fed.participation);
    if (!(cfg.fed.participation > 0.0 && cfg.fed.participation <= 1.0)) {
      f.fail("participation", "must be in (0,1]");
    }
    cfg.fed.rounds = f.count("rounds", cfg.fed.rounds);
    cfg.fed.local_steps = f.count("local_steps", cfg.fed.local_steps);
    cfg.fed.lr = f.number("lr", cfg.fed.lr);
    cfg.fed.batch_per_class = f.count("batch_per_class", cfg.fed.batch_per_class);
    cfg.fed.threads = f.count("threads", cfg.fed.threads);
    if (cfg.fed.batch_per_class == 0) f.fail("batch_per_class", "must be >= 1");
    if (cfg.fed.threads == 0) f.fail("threads", "must be >= 1");
    if (!(cfg.fed.lr >= 0.0)) f.fail("lr", "must be >= 0");
    f.finish();
  }

  if (top.has("model")) detail::parse_model(top.child("model"), cfg.arch);
  for (const auto& e : cfg.arch.validate()) issues.push_back({"model", e});

  {
    Fields f = top.child("distill");
    DistillConfig& d = cfg.fed.distill_cfg;
    cfg.fed.distill = f.flag("enabled", true);
    d.scale = f.number("scale", d.scale);
    d.syn_steps = f.count("syn_steps", d.syn_steps);
    d.syn_lr = f.number("syn_lr", d.syn_lr);
    d.inner_steps = f.count("inner_steps", d.inner_steps);
    d.outer_steps = f.count("outer_steps", DistillConfig::standalone().outer_steps);
    d.model_lr = f.number("model_lr", d.model_lr);
    d.real_batch_per_class = f.count("real_batch_per_class", d.real_batch_per_class);
    cfg.finetune_steps = f.count("finetune_steps", cfg.finetune_steps);
    if (!(d.scale > 0.0)) f.fail("scale", "must be > 0");
    if (!(d.syn_lr >= 0.0)) f.fail("syn_lr", "must be >= 0");
    if (!(d.model_lr >= 0.0)) f.fail("model_lr", "must be >= 0");
    if (d.real_batch_per_class == 0) f.fail("real_batch_per_class", "must be >= 1");
    f.finish();
  }

  {
    Fields f = top.child("unlearning");
    UnlearningRequest& r = cfg.unlearning.defaults;
    r.unlearn_rounds = f.count("unlearn_rounds", r.unlearn_rounds);
    r.recovery_rounds = f.count("recovery_rounds", r.recovery_rounds);
    r.sga_lr = f.number("sga_lr", cfg.fed.lr);
    r.recovery_lr = f.number("recovery_lr", cfg.fed.lr);
    r.mix_per_class = f.count("mix_per_class", r.mix_per_class);
    r.pass_batch = f.count("pass_batch", r.pass_batch);
    r.weighting = f.choice("weighting", "synthetic", {"synthetic", "original"}) == "original"
                      ? SgaWeighting::original
                      : SgaWeighting::synthetic;
    r.threads = cfg.fed.threads;
    cfg.unlearning.relearn_rounds = f.count("relearn_rounds", cfg.unlearning.relearn_rounds);
    if (r.pass_batch == 0) f.fail("pass_batch", "must be >= 1");
    if (!(r.sga_lr >= 0.0)) f.fail("sga_lr", "must be >= 0");
    if (!(r.recovery_lr >= 0.0)) f.fail("recovery_lr", "must be >= 0");
    detail::parse_requests_field(f, "requests", cfg.unlearning.requests);
    for (std::size_t i = 0; i < cfg.unlearning.requests.size(); ++i) {
      for (const auto& t : cfg.unlearning.requests[i].targets) {
        const std::size_t limit =
            t.kind == TargetKind::class_label ? cfg.dataset.classes : cfg.clients;
        if (t.id >= limit) {
          f.fail("requests[" + std::to_string(cfg.unlearning.requests[i].line) + "]",
                 "unknown " + std::string(t.kind == TargetKind::class_label ? "class" : "client") +
                     " id " + std::to_string(t.id));
        }
      }
    }
    f.finish();
  }

  {
    Fields f = top.child("baselines");
    cfg.baselines.retrain = f.flag("retrain", cfg.baselines.retrain);
    cfg.baselines.sga_or = f.flag("sga_or", cfg.baselines.sga_or);
    cfg.baselines.sga_or_sga_lr = f.number("sga_or_sga_lr", cfg.unlearning.defaults.sga_lr);
    cfg.baselines.sga_or_recovery_lr =
        f.number("sga_or_recovery_lr", cfg.unlearning.defaults.recovery_lr);
    f.finish();
  }

  {
    Fields f = top.child("mia");
    cfg.mia.enabled = f.flag("enabled", cfg.mia.enabled);
    cfg.mia.max_pool = f.count("max_pool", cfg.mia.max_pool);
    if (cfg.mia.max_pool < 2) f.fail("max_pool", "must be >= 2");
    f.finish();
  }
  top.finish();
  reseed(cfg, cfg.seed);
  return cfg;
}

/// Problems with the config at `path`; empty means valid.
inline std::vector<ConfigIssue> validate_config(const std::string& path) {
  std::vector<ConfigIssue> issues;
  std::ifstream in(path);
  if (!in) return {{"", "cannot read " + path}};
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    return {{"", std::string("invalid JSON: ") + e.what()}};
  }
  parse_config(root, std::filesystem::path(path).parent_path(), issues);
  return issues;
}

/// Parses `path`; throws ConfigError listing every problem.
inline ExperimentConfig load_config(const std::string& path) {
  std::vector<ConfigIssue> issues;
  std::ifstream in(path);
  if (!in) throw ConfigError({{"", "cannot read " + path}});
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({{"", std::string("invalid JSON: ") + e.what()}});
  }
  ExperimentConfig cfg = parse_config(root, std::filesystem::path(path).parent_path(), issues);
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

}  // namespace quickdrop
