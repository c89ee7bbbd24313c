#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calib2stage/config.hpp"

namespace calib2stage {

// Parallel-seed cap: CALIB2STAGE_THREADS if set (a positive integer, else
// ConfigError), otherwise the hardware concurrency.
std::size_t thread_cap();

// Runs fn(0..count-1) on up to `threads` workers. The exception of the
// lowest failing index is rethrown after all workers finish.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn);

// "stage1_seed<k>.json" for Stage 1, "<tag>_z<Z>_seed<k>.json" otherwise.
std::string checkpoint_file_name(StageTag stage, std::size_t z, std::uint64_t seed);

// printf "%.6g"
std::string format_number(double v);

// ---- train -----------------------------------------------------------------

struct TrainRun {
  StageTag stage = StageTag::stage1;
  std::size_t z = 0;  // 0 for Stage 1
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

struct TrainSummary {
  std::vector<TrainRun> runs;
  std::vector<std::string> warnings;
  std::filesystem::path csv;
};

// Stage 1 runs once per stage1 seed; every other stage once per (Z, seed).
// Writes checkpoints, logs/<name>.log per run and train_<stage>.csv.
TrainSummary cmd_train(const ExperimentConfig& cfg, StageTag stage);

// ---- eval ------------------------------------------------------------------

struct EvalRow {
  std::string model_tag;  // "stage1", "tst_z32", "stage1_ts", ...
  StageTag stage = StageTag::stage1;
  std::size_t z = 0;
  std::uint64_t seed = 0;
  std::size_t m = 1;
  std::string eval_set;  // "train", "test", "rot<deg>", "ood:<name>"
  std::size_t n = 0;
  std::optional<EvalReport> report;  // empty for OOD sets
  std::optional<OodReport> ood;      // OOD sets only
  std::optional<double> temperature;
  std::string checkpoint;  // file name
};

struct EvalSummary {
  std::vector<EvalRow> rows;              // |checkpoints| x |m| x |eval sets|
  std::vector<EvalRow> temperature_rows;  // temperature-scaled Stage-1 checkpoints
  std::vector<std::string> eval_sets;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path csv;
  std::filesystem::path temperature_csv;
};

// Evaluation sets in row order: train, test, each rotation, each OOD dataset.
std::vector<std::string> eval_set_names(const ExperimentConfig& cfg);

// Checkpoint files to evaluate, sorted by name.
std::vector<std::filesystem::path> eval_checkpoints(const ExperimentConfig& cfg);

// Writes eval.csv, eval_temperature.csv (when enabled) and one JSON sidecar
// per row under eval/ with reliability bins and the entropy histogram.
EvalSummary cmd_eval(const ExperimentConfig& cfg, std::vector<std::size_t> m_list);

inline const std::vector<std::string> kEvalColumns{
    "model_tag", "stage", "z", "seed", "m", "eval_set", "n", "accuracy", "ece", "mce",
    "nll", "ood_auroc", "ood_fpr95", "temperature", "checkpoint"};

std::string eval_csv(std::span<const EvalRow> rows);

// ---- report ----------------------------------------------------------------

struct MeanSem {
  double mean = 0.0;
  std::optional<double> sem;  // empty for a single value
};

// SEM = sample standard deviation / sqrt(n).
MeanSem mean_sem(std::span<const double> values);

struct ReportCell {
  std::optional<MeanSem> value;
  bool best = false;
};

struct ReportLine {
  std::string model;  // "<model_tag>@m<m>"
  std::string eval_set;
  std::size_t seeds = 0;
  std::map<std::string, ReportCell> cells;
};

inline const std::vector<std::string> kReportMetrics{"accuracy", "ece", "mce", "nll", "ood_auroc",
                                                     "ood_fpr95"};

// Higher is better for accuracy and AUROC, lower for the rest.
bool higher_is_better(const std::string& metric);

struct Report {
  std::vector<ReportLine> lines;
  std::string text;
  std::string csv;
};

// Files sorted by path matching a shell glob.
std::vector<std::filesystem::path> expand_glob(const std::string& pattern);

// Aggregates eval CSVs over seeds per (model tag, m, eval set). Throws
// DataError when files disagree on their columns or hold no rows.
Report build_report(std::span<const std::filesystem::path> files);

}  // namespace calib2stage
