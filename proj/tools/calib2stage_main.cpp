// calib2stage command-line driver: train, eval, report.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calib2stage/errors.hpp"
#include "calib2stage/experiment.hpp"
#include "calib2stage/io.hpp"
#include "json.hpp"

using namespace calib2stage;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3 };

int run_train(const std::string& config_path, const std::string& stage_name) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  StageTag stage;
  try {
    stage = parse_stage_tag(stage_name);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("--stage: ") + e.what());
  }
  const TrainSummary s = cmd_train(cfg, stage);
  for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& r : s.runs) {
    std::cout << r.checkpoint.string() << " epochs " << r.epochs << " best_epoch " << r.best_epoch
              << " best_val_loss " << format_number(r.best_val_loss) << '\n';
  }
  return kOk;
}

int run_eval(const std::string& config_path, const std::vector<std::size_t>& m_list) {
  const ExperimentConfig cfg = load_experiment_config(config_path);
  const EvalSummary s = cmd_eval(cfg, m_list);
  std::cout << s.csv.string() << ": " << s.rows.size() << " rows (" << s.checkpoints.size()
            << " checkpoints x " << (m_list.empty() ? cfg.m_values.size() : m_list.size()) << " m x "
            << s.eval_sets.size() << " eval sets)\n";
  if (!s.temperature_csv.empty()) {
    std::cout << s.temperature_csv.string() << ": " << s.temperature_rows.size() << " rows\n";
  }
  return kOk;
}

int run_report(const std::string& pattern, const std::string& out) {
  const auto files = expand_glob(pattern);
  if (files.empty()) throw DataError("report: nothing matches " + pattern);
  const Report r = build_report(files);
  const std::filesystem::path csv(out);
  write_file_atomic(csv, r.csv);
  std::filesystem::path txt = csv;
  txt.replace_extension(".txt");
  write_file_atomic(txt, r.text);
  std::cout << r.text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage and variational two-stage training with calibration evaluation"};
  app.require_subcommand(1);

  std::string config, stage, inputs, out = "report.csv";
  std::vector<std::size_t> m_list;

  auto* train = app.add_subcommand("train", "Train one stage for every configured seed (and Z)");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--stage", stage, "stage1 | tst | vtst | e2e | var_e2e")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on test, shifted and OOD sets");
  eval->add_option("--config", config, "Experiment config (JSON)")->required();
  eval->add_option("--m", m_list, "MC sample counts, e.g. 1,10,100 (default: config m_values)")->delimiter(',');

  auto* report = app.add_subcommand("report", "Aggregate eval CSVs over seeds");
  report->add_option("--inputs", inputs, "Glob of eval CSV files")->required();
  report->add_option("--out", out, "Aggregate CSV path; a .txt table is written next to it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return run_train(config, stage);
    if (*eval) return run_eval(config, m_list);
    return run_report(inputs, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumericError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ParseError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
}
