#include "calib2stage/experiment.hpp"

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <iomanip>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "calib2stage/errors.hpp"
#include "calib2stage/io.hpp"
#include "calib2stage/training.hpp"

namespace calib2stage {

using nlohmann::json;

std::size_t thread_cap() {
  const char* env = std::getenv("CALIB2STAGE_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) {
    throw ConfigError(std::string("CALIB2STAGE_THREADS must be a positive integer, got '") + env + "'");
  }
  return static_cast<std::size_t>(v);
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min(std::max<std::size_t>(threads, 1), count);
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string checkpoint_file_name(StageTag stage, std::size_t z, std::uint64_t seed) {
  if (stage == StageTag::stage1) return "stage1_seed" + std::to_string(seed) + ".json";
  return std::string(to_string(stage)) + "_z" + std::to_string(z) + "_seed" + std::to_string(seed) + ".json";
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

std::string csv_line(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += cells[i];
  }
  return line + '\n';
}

std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

}  // namespace

// ---- train -----------------------------------------------------------------

TrainSummary cmd_train(const ExperimentConfig& cfg, StageTag stage) {
  TrainSummary summary;
  const ExperimentData ed = build_experiment_data(cfg);
  const ModelSpec spec = stage1_model_spec(cfg, ed.test.example_shape());

  std::optional<Checkpoint> stage1;
  if (is_two_stage(stage)) {
    const auto path = cfg.stage1_path();
    if (!std::filesystem::exists(path)) {
      throw ConfigError("stage-1 checkpoint not found: " + path.string() + " (run train --stage stage1 first)");
    }
    stage1 = load_checkpoint(path);
    if (stage1->stage != StageTag::stage1) {
      throw ConfigError(path.string() + " is a " + std::string(to_string(stage1->stage)) + " checkpoint, not stage1");
    }
    if (stage1->model.spec().input_shape != spec.input_shape ||
        stage1->model.spec().num_classes != spec.num_classes) {
      throw ConfigError(path.string() + " does not match the configured dataset");
    }
  } else if (cfg.stage1_checkpoint && stage != StageTag::stage1) {
    summary.warnings.push_back("stage1_checkpoint is ignored for stage " + std::string(to_string(stage)));
  }

  if (stage == StageTag::stage1) {
    for (auto seed : cfg.stage1_seeds) summary.runs.push_back({stage, 0, seed, {}, 0, 0, 0.0});
  } else {
    for (auto z : cfg.z_dims)
      for (auto seed : cfg.seeds) summary.runs.push_back({stage, z, seed, {}, 0, 0, 0.0});
  }

  std::filesystem::create_directories(cfg.output_dir / "logs");
  parallel_for(summary.runs.size(), thread_cap(), [&](std::size_t i) {
    TrainRun& run = summary.runs[i];
    const std::string name = checkpoint_file_name(stage, run.z, run.seed);
    run.checkpoint = cfg.output_dir / name;
    const TrainConfig tc = train_config_for(cfg, stage, run.seed);

    std::ostringstream log;
    log << "start " << timestamp() << " stage " << to_string(stage) << " z " << run.z << " seed " << run.seed << '\n';
    auto on_epoch = [&](const EpochLog& e) {
      log << "epoch " << e.epoch << " train_loss " << format_number(e.train_loss) << " val_loss "
          << format_number(e.val_loss) << '\n';
    };
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = [&] {
      switch (stage) {
        case StageTag::stage1:
          return run_stage1(Model(spec, run.seed), ed.data, tc, on_epoch);
        case StageTag::tst:
          return run_stage2(*stage1, ed.data, tc, HeadKind::deterministic, run.z, on_epoch);
        case StageTag::vtst:
          return run_stage2(*stage1, ed.data, tc, HeadKind::gaussian, run.z, on_epoch);
        case StageTag::e2e:
          return run_end_to_end(spec, ed.data, tc, HeadKind::deterministic, run.z, on_epoch);
        case StageTag::var_e2e:
          break;
      }
      return run_end_to_end(spec, ed.data, tc, HeadKind::gaussian, run.z, on_epoch);
    }();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_checkpoint(r.checkpoint, run.checkpoint);
    run.epochs = r.history.size();
    run.best_epoch = r.best_epoch;
    run.best_val_loss = r.best_val_loss;
    log << "best_epoch " << r.best_epoch << " best_val_loss " << format_number(r.best_val_loss) << '\n';
    log << "end " << timestamp() << " seconds " << format_number(secs) << '\n';
    write_file_atomic(cfg.output_dir / "logs" / (run.checkpoint.stem().string() + ".log"), log.str());
  });

  std::string csv = csv_line({"checkpoint", "stage", "z", "seed", "epochs", "best_epoch", "best_val_loss"});
  for (const auto& run : summary.runs) {
    csv += csv_line({run.checkpoint.filename().string(), std::string(to_string(stage)), std::to_string(run.z),
                     std::to_string(run.seed), std::to_string(run.epochs), std::to_string(run.best_epoch),
                     format_number(run.best_val_loss)});
  }
  summary.csv = cfg.output_dir / ("train_" + std::string(to_string(stage)) + ".csv");
  write_file_atomic(summary.csv, csv);
  return summary;
}

// ---- eval ------------------------------------------------------------------

std::vector<std::string> eval_set_names(const ExperimentConfig& cfg) {
  std::vector<std::string> names{"train", "test"};
  for (double d : cfg.rotations) names.push_back("rot" + format_number(d));
  for (const auto& o : cfg.ood) names.push_back("ood:" + o.name);
  return names;
}

std::vector<std::filesystem::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::filesystem::path> out;
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::filesystem::path> eval_checkpoints(const ExperimentConfig& cfg) {
  std::vector<std::filesystem::path> out;
  if (!cfg.checkpoints.empty()) {
    for (const auto& pattern : cfg.checkpoints) {
      const std::filesystem::path p(pattern);
      const auto full = p.is_absolute() ? p : cfg.output_dir / p;
      const auto found = expand_glob(full.string());
      if (found.empty()) throw ConfigError("key 'checkpoints': nothing matches " + full.string());
      out.insert(out.end(), found.begin(), found.end());
    }
  } else if (std::filesystem::is_directory(cfg.output_dir)) {
    static const std::regex kName(R"((stage1|(tst|vtst|e2e|var_e2e)_z\d+)_seed\d+\.json)");
    for (const auto& entry : std::filesystem::directory_iterator(cfg.output_dir)) {
      if (entry.is_regular_file() && std::regex_match(entry.path().filename().string(), kName)) {
        out.push_back(entry.path());
      }
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw ConfigError("no checkpoints to evaluate in " + cfg.output_dir.string());
  return out;
}

namespace {

std::string model_tag(const Checkpoint& c) {
  if (c.stage == StageTag::stage1) return "stage1";
  return std::string(to_string(c.stage)) + "_z" + std::to_string(c.model.spec().z_dim);
}

json bins_json(const EvalReport& r) {
  json bins = json::array();
  for (const auto& b : r.bins) {
    json jb{{"lower", b.lower}, {"upper", b.upper}, {"count", b.count}};
    jb["mean_confidence"] = b.count ? json(b.mean_confidence) : json(nullptr);
    jb["accuracy"] = b.accuracy ? json(*b.accuracy) : json(nullptr);
    bins.push_back(jb);
  }
  return bins;
}

json entropy_json(const EntropyHistogram& h) {
  return {{"max_entropy", h.max_entropy}, {"counts", h.counts}};
}

EntropyHistogram entropy_histogram_of(const Tensor& probs) {
  EntropyHistogram h;
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  h.max_entropy = std::log(static_cast<double>(k));
  h.counts.assign(kEntropyBins, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = predictive_entropy(std::span<const double>(probs.raw() + i * k, k));
    const auto bin = static_cast<std::size_t>(std::clamp(e / h.max_entropy, 0.0, 1.0) * kEntropyBins);
    ++h.counts[std::min(bin, kEntropyBins - 1)];
  }
  return h;
}

struct EvalSets {
  std::vector<std::string> names;
  std::vector<const Dataset*> labelled;  // train, test, rotations
  std::vector<Dataset> rotated;
  const std::vector<Dataset>* ood = nullptr;
};

// Rows of one model for one m, plus the sidecar documents keyed by file name.
void evaluate_model(const Model& model, const Checkpoint& ckpt, const std::string& tag,
                    const std::string& file, std::size_t m, const ExperimentConfig& cfg,
                    const EvalSets& sets, std::optional<double> temperature,
                    const std::function<Tensor(const Tensor&)>& predict, std::vector<EvalRow>& rows,
                    std::vector<std::pair<std::string, std::string>>& sidecars) {
  (void)model;
  Tensor test_probs;
  std::size_t set_index = 0;
  auto base_row = [&] {
    EvalRow row;
    row.model_tag = tag;
    row.stage = ckpt.stage;
    row.z = ckpt.stage == StageTag::stage1 ? 0 : ckpt.model.spec().z_dim;
    row.seed = ckpt.seed;
    row.m = m;
    row.temperature = temperature;
    row.checkpoint = file;
    return row;
  };
  const std::string stem = std::filesystem::path(file).stem().string() + (temperature ? "_ts" : "");
  for (const Dataset* ds : sets.labelled) {
    const Tensor probs = predict(ds->features);
    if (sets.names[set_index] == "test") test_probs = probs;
    EvalRow row = base_row();
    row.eval_set = sets.names[set_index];
    row.report = evaluate_probs(probs, ds->labels);
    row.n = row.report->n;
    json side{{"model_tag", tag}, {"checkpoint", file}, {"m", m}, {"eval_set", row.eval_set},
              {"reliability_bins", bins_json(*row.report)},
              {"entropy_histogram", entropy_json(row.report->entropy_histogram)}};
    sidecars.emplace_back(stem + "__m" + std::to_string(m) + "__" + row.eval_set + ".json", side.dump(1) + "\n");
    rows.push_back(std::move(row));
    ++set_index;
  }
  for (const Dataset& ds : *sets.ood) {
    const Tensor probs = predict(ds.features);
    EvalRow row = base_row();
    row.eval_set = sets.names[set_index++];
    row.n = ds.size();
    row.ood = ood_report(test_probs, probs, cfg.ood_score);
    json side{{"model_tag", tag}, {"checkpoint", file}, {"m", m}, {"eval_set", row.eval_set},
              {"score", to_string(cfg.ood_score)}, {"entropy_histogram", entropy_json(entropy_histogram_of(probs))}};
    std::string name = row.eval_set;
    std::replace(name.begin(), name.end(), ':', '_');
    sidecars.emplace_back(stem + "__m" + std::to_string(m) + "__" + name + ".json", side.dump(1) + "\n");
    rows.push_back(std::move(row));
  }
}

}  // namespace

std::string eval_csv(std::span<const EvalRow> rows) {
  std::string csv = csv_line(kEvalColumns);
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.model_tag, std::string(to_string(r.stage)), std::to_string(r.z),
                                   std::to_string(r.seed), std::to_string(r.m), r.eval_set,
                                   std::to_string(r.n)};
    if (r.report) {
      for (double v : {r.report->accuracy, r.report->ece, r.report->mce, r.report->nll}) cells.push_back(format_number(v));
    } else {
      cells.insert(cells.end(), 4, "");
    }
    if (r.ood) {
      cells.push_back(format_number(r.ood->auroc));
      cells.push_back(format_number(r.ood->fpr95));
    } else {
      cells.insert(cells.end(), 2, "");
    }
    cells.push_back(opt_number(r.temperature));
    cells.push_back(r.checkpoint);
    csv += csv_line(cells);
  }
  return csv;
}

EvalSummary cmd_eval(const ExperimentConfig& cfg, std::vector<std::size_t> m_list) {
  if (m_list.empty()) m_list = cfg.m_values;
  for (std::size_t m : m_list) {
    if (m < 1) throw ConfigError("--m values must be >= 1");
  }
  EvalSummary summary;
  summary.checkpoints = eval_checkpoints(cfg);
  const ExperimentData ed = build_experiment_data(cfg);

  EvalSets sets;
  sets.names = eval_set_names(cfg);
  for (double d : cfg.rotations) sets.rotated.push_back(rotate(ed.test, d));
  sets.labelled = {&ed.data.train, &ed.test};
  for (const auto& r : sets.rotated) sets.labelled.push_back(&r);
  sets.ood = &ed.ood;
  summary.eval_sets = sets.names;

  struct PerCheckpoint {
    std::vector<EvalRow> rows, ts_rows;
    std::vector<std::pair<std::string, std::string>> sidecars;
  };
  std::vector<PerCheckpoint> results(summary.checkpoints.size());
  parallel_for(summary.checkpoints.size(), thread_cap(), [&](std::size_t i) {
    const auto& path = summary.checkpoints[i];
    const Checkpoint ckpt = load_checkpoint(path);
    const ModelSpec& s = ckpt.model.spec();
    if (s.input_shape != ed.test.example_shape() || s.num_classes != ed.test.num_classes) {
      throw DimensionError("checkpoint " + path.filename().string() + " expects inputs " +
                           shape_to_string(s.input_shape) + " with " + std::to_string(s.num_classes) +
                           " classes; the configured dataset has " + shape_to_string(ed.test.example_shape()) +
                           " with " + std::to_string(ed.test.num_classes));
    }
    const std::string file = path.filename().string();
    const std::string tag = model_tag(ckpt);
    auto& out = results[i];
    for (std::size_t m : m_list) {
      const PredictConfig pc{m, 1, cfg.eval_seed};
      evaluate_model(ckpt.model, ckpt, tag, file, m, cfg, sets, std::nullopt,
                     [&](const Tensor& x) { return predict_probs(ckpt.model, x, pc); }, out.rows, out.sidecars);
    }
    if (cfg.temperature_scaling && ckpt.stage == StageTag::stage1) {
      const double T = fit_temperature(ckpt.model.logits(ed.data.val.features), ed.data.val.labels).T;
      for (std::size_t m : m_list) {
        evaluate_model(ckpt.model, ckpt, "stage1_ts", file, m, cfg, sets, T,
                       [&](const Tensor& x) { return softmax_at_temperature(ckpt.model.logits(x), T); },
                       out.ts_rows, out.sidecars);
      }
    }
  });

  std::filesystem::create_directories(cfg.output_dir / "eval");
  for (auto& r : results) {
    for (auto& [name, text] : r.sidecars) write_file_atomic(cfg.output_dir / "eval" / name, text);
    summary.rows.insert(summary.rows.end(), r.rows.begin(), r.rows.end());
    summary.temperature_rows.insert(summary.temperature_rows.end(), r.ts_rows.begin(), r.ts_rows.end());
  }
  summary.csv = cfg.output_dir / "eval.csv";
  write_file_atomic(summary.csv, eval_csv(summary.rows));
  if (cfg.temperature_scaling) {
    summary.temperature_csv = cfg.output_dir / "eval_temperature.csv";
    write_file_atomic(summary.temperature_csv, eval_csv(summary.temperature_rows));
  }
  return summary;
}

// ---- report ----------------------------------------------------------------

MeanSem mean_sem(std::span<const double> values) {
  if (values.empty()) throw ContractError("mean of an empty list");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, std::nullopt};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return {mean, sd / std::sqrt(static_cast<double>(values.size()))};
}

bool higher_is_better(const std::string& metric) { return metric == "accuracy" || metric == "ood_auroc"; }

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw DataError(where + ": not a number: '" + s + "'");
  return v;
}

std::string cell_text(const ReportCell& c) {
  if (!c.value) return "";
  std::string s = format_number(c.value->mean);
  if (c.value->sem) s += " ± " + format_number(*c.value->sem);
  return c.best ? "**" + s + "**" : s;
}

}  // namespace

Report build_report(std::span<const std::filesystem::path> files) {
  if (files.empty()) throw DataError("report: no input files");
  std::vector<std::string> header;
  struct Group {
    std::string model, eval_set;
    std::set<std::string> seeds;
    std::map<std::string, std::vector<double>> values;
  };
  std::vector<Group> groups;
  std::map<std::pair<std::string, std::string>, std::size_t> index;

  for (const auto& f : files) {
    std::istringstream in(read_file(f));
    std::string line;
    if (!std::getline(in, line)) throw DataError(f.string() + ": empty file");
    const auto cols = split_csv(line);
    if (header.empty()) {
      header = cols;
    } else if (cols != header) {
      throw DataError("inconsistent column sets: " + f.string() + " differs from " + files.front().string());
    }
    auto col = [&](const std::string& name) {
      const auto it = std::find(cols.begin(), cols.end(), name);
      if (it == cols.end()) throw DataError(f.string() + ": missing column '" + name + "'");
      return static_cast<std::size_t>(it - cols.begin());
    };
    const std::size_t c_tag = col("model_tag"), c_m = col("m"), c_set = col("eval_set"), c_seed = col("seed");
    std::vector<std::size_t> c_metric;
    for (const auto& metric : kReportMetrics) c_metric.push_back(col(metric));
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = split_csv(line);
      const std::string where = f.string() + ":" + std::to_string(line_no);
      if (cells.size() != cols.size()) throw DataError(where + ": expected " + std::to_string(cols.size()) + " cells");
      const std::string model = cells[c_tag] + "@m" + cells[c_m];
      auto [it, fresh] = index.try_emplace({model, cells[c_set]}, groups.size());
      if (fresh) groups.push_back({model, cells[c_set], {}, {}});
      Group& g = groups[it->second];
      g.seeds.insert(cells[c_seed]);
      for (std::size_t k = 0; k < kReportMetrics.size(); ++k) {
        const std::string& v = cells[c_metric[k]];
        if (!v.empty()) g.values[kReportMetrics[k]].push_back(parse_double(v, where));
      }
    }
  }
  if (groups.empty()) throw DataError("report: input files hold no rows");

  Report report;
  for (const auto& g : groups) {
    ReportLine line{g.model, g.eval_set, g.seeds.size(), {}};
    for (const auto& metric : kReportMetrics) {
      ReportCell cell;
      if (auto it = g.values.find(metric); it != g.values.end()) cell.value = mean_sem(it->second);
      line.cells[metric] = cell;
    }
    report.lines.push_back(std::move(line));
  }

  // One best mark per metric per eval set; the first line wins ties.
  std::vector<std::string> sets;
  for (const auto& l : report.lines) {
    if (std::find(sets.begin(), sets.end(), l.eval_set) == sets.end()) sets.push_back(l.eval_set);
  }
  for (const auto& set : sets) {
    for (const auto& metric : kReportMetrics) {
      ReportCell* best = nullptr;
      for (auto& l : report.lines) {
        if (l.eval_set != set) continue;
        ReportCell& c = l.cells[metric];
        if (!c.value) continue;
        const bool better = !best || (higher_is_better(metric) ? c.value->mean > best->value->mean
                                                               : c.value->mean < best->value->mean);
        if (better) best = &c;
      }
      if (best) best->best = true;
    }
  }

  std::vector<std::string> csv_header{"model", "eval_set", "seeds"};
  for (const auto& metric : kReportMetrics) {
    csv_header.push_back(metric + "_mean");
    csv_header.push_back(metric + "_sem");
    csv_header.push_back(metric + "_best");
  }
  report.csv = csv_line(csv_header);
  for (const auto& l : report.lines) {
    std::vector<std::string> cells{l.model, l.eval_set, std::to_string(l.seeds)};
    for (const auto& metric : kReportMetrics) {
      const ReportCell& c = l.cells.at(metric);
      cells.push_back(c.value ? format_number(c.value->mean) : "");
      cells.push_back(c.value && c.value->sem ? format_number(*c.value->sem) : "");
      cells.push_back(c.value ? (c.best ? "1" : "0") : "");
    }
    report.csv += csv_line(cells);
  }

  std::ostringstream text;
  for (const auto& set : sets) {
    text << "## " << set << "\n\n| model | seeds |";
    for (const auto& metric : kReportMetrics) text << ' ' << metric << " |";
    text << "\n|---|---|";
    for (std::size_t k = 0; k < kReportMetrics.size(); ++k) text << "---|";
    text << '\n';
    for (const auto& l : report.lines) {
      if (l.eval_set != set) continue;
      text << "| " << l.model << " | " << l.seeds << " |";
      for (const auto& metric : kReportMetrics) text << ' ' << cell_text(l.cells.at(metric)) << " |";
      text << '\n';
    }
    text << '\n';
  }
  report.text = text.str();
  return report;
}

}  // namespace calib2stage
