#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "quickdrop/metrics.hpp"

namespace quickdrop {

enum class Stage { train, unlearn, recover, relearn };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::train: return "train";
    case Stage::unlearn: return "unlearn";
    case Stage::recover: return "recover";
    case Stage::relearn: return "relearn";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::train, Stage::unlearn, Stage::recover, Stage::relearn}) {
    if (s == to_string(st)) return st;
  }
  throw std::invalid_argument("unknown stage '" + s + "'");
}

struct StageReport {
  Stage stage = Stage::train;
  /// Targets handled by this stage, e.g. "class=9" or "client=3,class=5".
  std::string label;
  std::vector<int> forget_classes;
  std::optional<AccuracyReport> accuracy;
  std::optional<MiaResult> mia;
  std::size_t rounds = 0;
  std::uint64_t samples = 0;
  /// Monotonic-clock time spent inside the stage's rounds.
  double wall_ms = 0.0;
};

inline constexpr int kReportSchemaVersion = 1;

/// Results of one method on one seed. QuickDrop and the baselines share this
/// schema.
struct ExperimentReport {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<StageReport> stages;
  std::vector<std::string> warnings;
  /// Named work counters, in insertion order.
  std::vector<std::pair<std::string, std::uint64_t>> counters;

  std::string file_stem() const { return method + "_seed" + std::to_string(seed); }

  /// Wall times are left out so identical runs serialise identically.
  nlohmann::ordered_json to_json() const {
    using nlohmann::ordered_json;
    ordered_json out;
    out["schema_version"] = kReportSchemaVersion;
    out["method"] = method;
    out["seed"] = seed;
    ordered_json stages_json = ordered_json::array();
    for (const auto& s : stages) {
      ordered_json j;
      j["stage"] = to_string(s.stage);
      j["label"] = s.label;
      j["forget_classes"] = s.forget_classes;
      j["rounds"] = s.rounds;
      j["samples"] = s.samples;
      if (s.accuracy) {
        const auto& a = *s.accuracy;
        ordered_json acc;
        acc["correct"] = a.correct;
        acc["total"] = a.total;
        acc["fset"] = a.fset ? ordered_json(*a.fset) : ordered_json(nullptr);
        acc["rset"] = a.rset ? ordered_json(*a.rset) : ordered_json(nullptr);
        acc["overall"] = a.overall;
        std::vector<double> per_class;
        for (std::size_t c = 0; c < a.total.size(); ++c) per_class.push_back(a.class_accuracy(c));
        acc["per_class"] = per_class;
        j["accuracy"] = acc;
      } else {
        j["accuracy"] = nullptr;
      }
      if (s.mia) {
        j["mia"] = {{"threshold", s.mia->threshold},
                    {"train_balanced_accuracy", s.mia->train_balanced_accuracy},
                    {"eval_balanced_accuracy", s.mia->eval_balanced_accuracy},
                    {"forget_member_rate", s.mia->forget_member_rate}};
      } else {
        j["mia"] = nullptr;
      }
      stages_json.push_back(std::move(j));
    }
    out["stages"] = std::move(stages_json);
    out["warnings"] = warnings;
    ordered_json counters_json = ordered_json::object();
    for (const auto& [name, value] : counters) counters_json[name] = value;
    out["counters"] = std::move(counters_json);
    return out;
  }

  static ExperimentReport from_json(const nlohmann::ordered_json& j) {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw std::runtime_error("report schema version " +
                               std::to_string(j.at("schema_version").get<int>()) +
                               " is not supported (expected " +
                               std::to_string(kReportSchemaVersion) + ")");
    }
    ExperimentReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("stages")) {
      StageReport st;
      st.stage = stage_from_string(s.at("stage").get<std::string>());
      st.label = s.at("label").get<std::string>();
      st.forget_classes = s.at("forget_classes").get<std::vector<int>>();
      st.rounds = s.at("rounds").get<std::size_t>();
      st.samples = s.at("samples").get<std::uint64_t>();
      if (!s.at("accuracy").is_null()) {
        const auto& a = s.at("accuracy");
        st.accuracy = AccuracyReport::from_counts(
            a.at("correct").get<std::vector<std::uint64_t>>(),
            a.at("total").get<std::vector<std::uint64_t>>(), st.forget_classes);
      }
      if (!s.at("mia").is_null()) {
        const auto& m = s.at("mia");
        st.mia = MiaResult{m.at("threshold").get<double>(),
                           m.at("train_balanced_accuracy").get<double>(),
                           m.at("eval_balanced_accuracy").get<double>(),
                           m.at("forget_member_rate").get<double>()};
      }
      r.stages.push_back(std::move(st));
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& [name, value] : j.at("counters").items()) {
      r.counters.emplace_back(name, value.get<std::uint64_t>());
    }
    return r;
  }

  /// One row per stage; empty cells for metrics a stage does not have.
  std::string to_csv() const {
    std::ostringstream out;
    out << "method,seed,stage,label,rounds,samples,wall_ms,fset,rset,overall,mia_forget_rate\n";
    auto cell = [](const std::optional<double>& v) {
      if (!v) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", *v);
      return std::string(buf);
    };
    for (const auto& s : stages) {
      char wall[32];
      std::snprintf(wall, sizeof wall, "%.3f", s.wall_ms);
      out << method << ',' << seed << ',' << to_string(s.stage) << ",\"" << s.label << "\","
          << s.rounds << ',' << s.samples << ',' << wall << ','
          << cell(s.accuracy ? s.accuracy->fset : std::nullopt) << ','
          << cell(s.accuracy ? s.accuracy->rset : std::nullopt) << ','
          << cell(s.accuracy ? std::optional<double>(s.accuracy->overall) : std::nullopt) << ','
          << cell(s.mia ? std::optional<double>(s.mia->forget_member_rate) : std::nullopt)
          << '\n';
    }
    return out.str();
  }
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path);
  out << text;
  if (!out) throw std::ios_base::failure("write failed: " + path);
}

/// Writes <dir>/<method>_seed<seed>.json and .csv.
inline void write_report(const std::string& dir, const ExperimentReport& report) {
  write_text(dir + "/" + report.file_stem() + ".json", report.to_json().dump(2) + "\n");
  write_text(dir + "/" + report.file_stem() + ".csv", report.to_csv());
}

}  // namespace quickdrop
