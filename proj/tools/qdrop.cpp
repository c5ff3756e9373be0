// Command-line entry point: run, validate, distill, unlearn, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "quickdrop/experiment.hpp"

namespace {

using namespace quickdrop;

enum Exit { kOk = 0, kFailure = 1, kValidation = 2, kNumeric = 3, kIo = 4 };

std::string output_dir(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("QDROP_OUTPUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

template <class Fn>
int dispatch(const ExperimentConfig& cfg, Fn&& fn) {
  return cfg.precision == Precision::f64 ? fn.template operator()<double>()
                                         : fn.template operator()<float>();
}

int cmd_validate(const std::string& config) {
  const auto issues = validate_config(config);
  for (const auto& i : issues) std::cerr << "error: " << i.str() << "\n";
  if (!issues.empty()) return kValidation;
  std::cout << config << ": ok\n";
  return kOk;
}

int cmd_run(const std::string& config) {
  const ExperimentConfig cfg = load_config(config);
  const std::string dir = output_dir(cfg);
  return dispatch(cfg, [&]<class T>() {
    const RunSummary summary = run_experiment<T>(cfg, dir, std::cout);
    for (const auto& f : summary.files) std::cout << "wrote " << f << "\n";
    return kOk;
  });
}

int cmd_distill(const std::string& config) {
  const ExperimentConfig cfg = load_config(config);
  const std::string dir = output_dir(cfg);
  return dispatch(cfg, [&]<class T>() {
    Pipeline<T> p(cfg, dir, std::cout);
    p.distill_standalone_sets();
    p.save_synthetic();
    for (const auto& c : p.world().clients) {
      std::cout << "client " << c.id << ": " << c.syn.total() << " synthetic samples over "
                << c.syn.buckets.size() << " classes\n";
    }
    for (const auto& f : p.files()) std::cout << "wrote " << f << "\n";
    return kOk;
  });
}

int cmd_unlearn(const std::string& config, const std::string& requests) {
  const ExperimentConfig cfg = load_config(config);
  std::ifstream in(requests);
  if (!in) throw std::filesystem::filesystem_error("cannot read request file", requests,
                                                   std::make_error_code(std::errc::no_such_file_or_directory));
  const auto cmds = parse_requests(in);
  const std::string dir = output_dir(cfg);
  return dispatch(cfg, [&]<class T>() {
    Pipeline<T> p(cfg, dir, std::cout);
    p.load_checkpoints("model_trained.qdmd");
    p.report().method = "quickdrop_requests";
    p.run_commands(cmds);
    p.save_model("model_unlearned.qdmd");
    p.write(p.report());
    for (const auto& f : p.files()) std::cout << "wrote " << f << "\n";
    return kOk;
  });
}

int cmd_report(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::filesystem::filesystem_error("not a directory", dir,
                                            std::make_error_code(std::errc::not_a_directory));
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".json") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  std::cout << std::left << std::setw(20) << "method" << std::setw(6) << "seed" << std::setw(9)
            << "stage" << std::setw(16) << "targets" << std::right << std::setw(9) << "F-Set"
            << std::setw(9) << "R-Set" << std::setw(10) << "samples" << std::setw(8) << "MIA"
            << "\n";
  auto pct = [](std::optional<double> v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(2) << 100.0 * *v;
    } else {
      s << "-";
    }
    return s.str();
  };
  for (const auto& path : paths) {
    std::ifstream in(path);
    const auto report = ExperimentReport::from_json(nlohmann::ordered_json::parse(in));
    for (const auto& s : report.stages) {
      std::cout << std::left << std::setw(20) << report.method << std::setw(6) << report.seed
                << std::setw(9) << to_string(s.stage) << std::setw(16)
                << (s.label.empty() ? "-" : s.label) << std::right << std::setw(9)
                << pct(s.accuracy ? s.accuracy->fset : std::nullopt) << std::setw(9)
                << pct(s.accuracy ? s.accuracy->rset : std::nullopt) << std::setw(10)
                << s.samples << std::setw(8)
                << pct(s.mia ? std::optional<double>(s.mia->forget_member_rate) : std::nullopt)
                << "\n";
    }
    for (const auto& w : report.warnings) std::cout << "  warning: " << w << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated unlearning with distilled data"};
  app.require_subcommand(1);
  std::string config, requests, dir;

  auto* run = app.add_subcommand("run", "Train, distill, unlearn and evaluate from a config");
  run->add_option("config", config, "Experiment config (JSON)")->required();
  auto* validate = app.add_subcommand("validate", "Check a config and list every problem");
  validate->add_option("config", config, "Experiment config (JSON)")->required();
  auto* distill = app.add_subcommand("distill", "Distill each client's data without training");
  distill->add_option("config", config, "Experiment config (JSON)")->required();
  auto* unlearn = app.add_subcommand("unlearn", "Apply a request file to a trained run's checkpoints");
  unlearn->add_option("config", config, "Experiment config (JSON)")->required();
  unlearn->add_option("--requests", requests, "Request file, one command per line")->required();
  auto* report = app.add_subcommand("report", "Summarise the report files in a directory");
  report->add_option("dir", dir, "Directory holding report JSON files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  try {
    if (*validate) return cmd_validate(config);
    if (*run) return cmd_run(config);
    if (*distill) return cmd_distill(config);
    if (*unlearn) return cmd_unlearn(config, requests);
    if (*report) return cmd_report(dir);
  } catch (const ConfigError& e) {
    for (const auto& i : e.issues()) std::cerr << "error: " << i.str() << "\n";
    return kValidation;
  } catch (const RequestParseError& e) {
    std::cerr << "error: " << requests << ": " << e.what() << "\n";
    return kValidation;
  } catch (const UnlearnError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const StageFailure& e) {
    std::cerr << "numeric abort in stage " << e.what() << "\n";
    return kNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const CheckpointError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const IdxError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
