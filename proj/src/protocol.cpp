#include "genood/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>

#include "genood/detectors.hpp"
#include "genood/errors.hpp"
#include "genood/extract.hpp"
#include "genood/tokenizer.hpp"

namespace genood::bench {
namespace {

namespace fs = std::filesystem;
using toylm::CurvePoint;
using toylm::Extraction;
using toylm::ToyLM;

ClassTokenMap class_map_for(const SyntheticTask& task) {
  return ClassTokenMap::build(task.class_names,
                              [](const std::string& s) { return toylm::byte_tokenize(s); });
}

struct Splits {
  std::vector<Example> train, val;
};

Splits shot_splits(const SyntheticTask& task, const Shots& shots, int seed) {
  if (shots.is_full()) return {task.train, task.val};
  const int k = *shots.per_class;
  const auto s = static_cast<uint64_t>(seed);
  return {subsample_shots(task.train, k, s), subsample_shots(task.val, k, s + 0x9e37)};
}

struct Extracted {
  Extraction train, val, test;
  std::vector<std::pair<std::string, Extraction>> ood;
};

Extracted extract_all(const ToyLM& model, const Splits& splits, const SyntheticTask& task,
                      const ClassTokenMap& map, bool with_train) {
  Extracted e;
  if (with_train) e.train = toylm::extract_dump(model, splits.train, map);
  e.val = toylm::extract_dump(model, splits.val, map);
  e.test = toylm::extract_dump(model, task.test, map);
  for (const auto& [name, examples] : task.ood_sets) {
    e.ood.emplace_back(name, toylm::extract_dump(model, examples, map));
  }
  return e;
}

struct DetectorScores {
  bool degenerate = false;
  std::vector<double> id_test;
  std::vector<std::vector<double>> ood;  // parallel to Extracted::ood
};

// A detector that cannot be fitted scores everything alike, which is exactly
// what the reported chance-level metrics describe.
DetectorScores score_detector(DetectorKind kind, const Extraction& fit, const Extracted& e) {
  DetectorScores out;
  std::optional<detectors::FittedDetector> det;
  try {
    det = detectors::fit_detector(kind, fit.dump);
  } catch (const DegenerateFitError&) {
    out.degenerate = true;
  }
  auto score = [&](const Extraction& x) {
    if (!det) return std::vector<double>(x.dump.records.size(), 0.0);
    return detectors::score_records(*det, x.dump, x.vocab_log_partition);
  };
  out.id_test = score(e.test);
  for (const auto& [name, x] : e.ood) out.ood.push_back(score(x));
  return out;
}

double id_accuracy(const ToyLM& model, const std::vector<Example>& examples,
                   const ClassTokenMap& map) {
  return model.has_classifier_head() ? toylm::discriminative_accuracy(model, examples)
                                     : toylm::generative_accuracy(model, examples, map);
}

std::string fmt_fixed(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Per-epoch AUROC of every detector against every OOD set.
void append_ood_curve(int epoch, const ToyLM& model, const Splits& splits,
                      const SyntheticTask& task, const ClassTokenMap& map,
                      const std::vector<DetectorKind>& kinds, FitSplit fit_split,
                      std::vector<CurvePoint>& curve) {
  const auto e = extract_all(model, splits, task, map, fit_split == FitSplit::kTrain);
  const Extraction& fit = fit_split == FitSplit::kTrain ? e.train : e.val;
  for (auto kind : kinds) {
    const auto s = score_detector(kind, fit, e);
    for (size_t o = 0; o < e.ood.size(); ++o) {
      const double a = s.degenerate ? 0.5 : metrics::auroc(s.id_test, s.ood[o]);
      curve.push_back({epoch, e.ood[o].first, "auroc." + to_string(kind), a});
    }
  }
}

class Evaluator {
 public:
  Evaluator(const SyntheticTask& task, const RunConfig& config, const ClassTokenMap& map,
            MetricsReport& report)
      : task_(task), config_(config), map_(map), report_(report) {}

  void run(Setting setting, int seed, const ToyLM& model, const Splits& splits,
           FitSplit fit_split, SeedRun stats) {
    const auto e = extract_all(model, splits, task_, map_, true);
    const fs::path rel = fs::path("seed" + std::to_string(seed)) / to_string(setting);
    const bool write = !config_.out_dir.empty();
    const fs::path dir = config_.out_dir / rel;
    if (write) write_dumps(dir, e, fit_split);

    stats.setting = setting;
    stats.seed = seed;
    stats.id_accuracy = id_accuracy(model, task_.test, map_);
    stats.anisotropy = metrics::anisotropy(detectors::embedding_matrix(e.test.dump));
    report_.runs.push_back(stats);

    const Extraction& fit = fit_split == FitSplit::kTrain ? e.train : e.val;
    for (auto kind : config_.detectors) {
      const auto s = score_detector(kind, fit, e);
      const std::string name = to_string(kind);
      const fs::path score_rel = rel / "scores" / (name + ".tsv");
      if (write) {
        std::vector<detectors::ScoreRow> rows;
        const auto& recs = e.test.dump.records;
        for (size_t i = 0; i < recs.size(); ++i) {
          rows.push_back({recs[i].id, "id_test", name, s.id_test[i]});
        }
        std::vector<std::pair<std::string, std::vector<double>>> by_split = {
            {"id_test", s.id_test}};
        for (size_t o = 0; o < e.ood.size(); ++o) {
          const auto& orecs = e.ood[o].second.dump.records;
          for (size_t i = 0; i < orecs.size(); ++i) {
            rows.push_back({orecs[i].id, "ood." + e.ood[o].first, name, s.ood[o][i]});
          }
          by_split.emplace_back("ood." + e.ood[o].first, s.ood[o]);
        }
        fs::create_directories(dir / "scores");
        detectors::write_scores(config_.out_dir / score_rel, rows);
        fs::create_directories(dir / "density");
        write_density(dir / "density" / (name + ".tsv"), density_table(by_split));
      }
      for (size_t o = 0; o < e.ood.size(); ++o) {
        Cell cell;
        cell.setting = setting;
        cell.seed = seed;
        cell.detector = kind;
        cell.ood_set = e.ood[o].first;
        cell.degenerate = s.degenerate;
        cell.metrics = s.degenerate
                           ? metrics::degenerate_metrics(s.id_test.size(), s.ood[o].size())
                           : metrics::evaluate(s.id_test, s.ood[o]);
        if (write) cell.score_file = score_rel.generic_string();
        report_.cells.push_back(std::move(cell));
      }
    }
  }

 private:
  void write_dumps(const fs::path& dir, const Extracted& e, FitSplit fit_split) {
    const fs::path dumps = dir / "dumps";
    fs::create_directories(dumps);
    write_dump(e.train.dump, dumps / "train.edf1");
    write_dump(e.val.dump, dumps / "val.edf1");
    write_dump(e.test.dump, dumps / "test.edf1");
    DatasetManifest manifest;
    manifest.id_train = "train.edf1";
    manifest.id_val = "val.edf1";
    manifest.id_test = "test.edf1";
    manifest.fit_split = fit_split;
    for (const auto& [name, x] : e.ood) {
      write_dump(x.dump, dumps / ("ood." + name + ".edf1"));
      manifest.ood_sets.emplace_back(name, "ood." + name + ".edf1");
    }
    std::ofstream(dumps / "manifest.txt") << manifest.to_text();
  }

  const SyntheticTask& task_;
  const RunConfig& config_;
  const ClassTokenMap& map_;
  MetricsReport& report_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace

std::string to_string(Setting setting) {
  return setting == Setting::kZeroGrad ? "zero_grad" : "fine_tuned";
}

metrics::DetectionMetrics MetricsReport::mean(Setting setting, DetectorKind detector,
                                              const std::string& ood_set) const {
  metrics::DetectionMetrics sum;
  int n = 0;
  for (const auto& c : cells) {
    if (c.setting != setting || c.detector != detector || c.ood_set != ood_set) continue;
    sum.auroc += c.metrics.auroc;
    sum.far95 += c.metrics.far95;
    sum.aupr += c.metrics.aupr;
    ++n;
  }
  if (n == 0) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {nan, nan, nan};
  }
  return {sum.auroc / n, sum.far95 / n, sum.aupr / n};
}

double MetricsReport::mean_auroc(Setting setting, DetectorKind detector) const {
  double sum = 0.0;
  for (const auto& name : ood_sets) sum += mean(setting, detector, name).auroc;
  return ood_sets.empty() ? std::numeric_limits<double>::quiet_NaN()
                          : sum / static_cast<double>(ood_sets.size());
}

double MetricsReport::mean_accuracy(Setting setting) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : runs) {
    if (r.setting == setting) {
      sum += r.id_accuracy;
      ++n;
    }
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

bool MetricsReport::any_degenerate(Setting setting, DetectorKind detector) const {
  return std::any_of(cells.begin(), cells.end(), [&](const Cell& c) {
    return c.setting == setting && c.detector == detector && c.degenerate;
  });
}

// Rows: setting x ID task x shots x OOD set; columns: detector x metric.
std::string MetricsReport::to_table() const {
  std::ostringstream os;
  os << "mean over " << seeds.size() << " seed(s); (d) marks a degenerate fit\n\n";
  const int label_w = 34;
  os << std::left << std::setw(label_w) << "";
  for (auto det : detectors) os << std::left << std::setw(29) << genood::to_string(det);
  os << "\n" << std::left << std::setw(label_w) << "setting/task/shots/ood";
  for (size_t i = 0; i < detectors.size(); ++i) {
    os << std::left << std::setw(10) << "AUROC" << std::setw(9) << "FAR@95" << std::setw(10)
       << "AUPR";
  }
  os << "\n" << std::fixed << std::setprecision(4);
  for (auto setting : {Setting::kZeroGrad, Setting::kFineTuned}) {
    for (const auto& name : ood_sets) {
      const std::string label = to_string(setting) + "/" + genood::to_string(regime) + "/" +
                                shots.to_string() + "/" + name;
      os << std::left << std::setw(label_w) << label;
      for (auto det : detectors) {
        const auto m = mean(setting, det, name);
        const std::string mark = any_degenerate(setting, det) ? "(d)" : "";
        os << std::left << std::setw(10) << (fmt_fixed(m.auroc) + mark) << std::setw(9)
           << fmt_fixed(m.far95) << std::setw(10) << fmt_fixed(m.aupr);
      }
      os << "\n";
    }
  }
  os << "\n";
  for (auto setting : {Setting::kZeroGrad, Setting::kFineTuned}) {
    double aniso = 0.0;
    int n = 0;
    for (const auto& r : runs) {
      if (r.setting == setting) {
        aniso += r.anisotropy;
        ++n;
      }
    }
    os << to_string(setting) << ": ID accuracy " << fmt_fixed(mean_accuracy(setting))
       << ", anisotropy " << fmt_fixed(n ? aniso / n : 0.0) << "\n";
  }
  return os.str();
}

std::string MetricsReport::to_key_values() const {
  std::ostringstream os;
  os << "regime = " << genood::to_string(regime) << "\n"
     << "shots = " << shots.to_string() << "\n";
  for (const auto& c : cells) {
    const std::string key = "seed" + std::to_string(c.seed) + "." + to_string(c.setting) +
                            "." + genood::to_string(c.detector) + "." + c.ood_set;
    os << key << ".auroc = " << fmt(c.metrics.auroc) << "\n"
       << key << ".far95 = " << fmt(c.metrics.far95) << "\n"
       << key << ".aupr = " << fmt(c.metrics.aupr) << "\n"
       << key << ".degenerate = " << (c.degenerate ? "true" : "false") << "\n";
    if (!c.score_file.empty()) os << key << ".scores = " << c.score_file << "\n";
  }
  for (auto setting : {Setting::kZeroGrad, Setting::kFineTuned}) {
    for (auto det : detectors) {
      for (const auto& name : ood_sets) {
        const auto m = mean(setting, det, name);
        const std::string key =
            "mean." + to_string(setting) + "." + genood::to_string(det) + "." + name;
        os << key << ".auroc = " << fmt(m.auroc) << "\n"
           << key << ".far95 = " << fmt(m.far95) << "\n"
           << key << ".aupr = " << fmt(m.aupr) << "\n";
      }
    }
  }
  for (const auto& r : runs) {
    const std::string key = "seed" + std::to_string(r.seed) + "." + to_string(r.setting);
    os << key << ".accuracy = " << fmt(r.id_accuracy) << "\n"
       << key << ".anisotropy = " << fmt(r.anisotropy) << "\n";
    if (r.setting == Setting::kFineTuned) {
      os << key << ".epochs_run = " << r.epochs_run << "\n"
         << key << ".best_epoch = " << r.best_epoch << "\n";
    }
  }
  return os.str();
}

ToyLM build_base_model(const RunConfig& config, std::vector<CurvePoint>* curve) {
  if (!config.base_model.empty()) {
    ToyLM model = toylm::load_checkpoint(config.base_model);
    const auto& m = model.config();
    if (m.d_model != config.model.d_model || m.layers != config.model.layers ||
        m.heads != config.model.heads || m.context != config.model.context) {
      throw DimensionError("base model '" + config.base_model.string() +
                           "' does not match the configured architecture");
    }
    if (model.has_lora() || model.has_classifier_head()) {
      throw ConfigError("base model must not carry adapters or a classifier head");
    }
    return model;
  }
  ToyLM model(config.model, config.pretrain_seed);
  if (config.pretrain_epochs > 0) {
    toylm::PretrainConfig pc;
    pc.epochs = config.pretrain_epochs;
    const auto corpus = pretraining_corpus(config.pretrain_seed, config.pretrain_per_grammar);
    auto points = toylm::pretrain(model, corpus, pc, config.pretrain_seed);
    if (curve) *curve = std::move(points);
  }
  return model;
}

MetricsReport run_protocol(const SyntheticTask& task, const RunConfig& config) {
  return run_protocol(task, config, build_base_model(config));
}

MetricsReport run_protocol(const SyntheticTask& task, const RunConfig& config,
                           const ToyLM& base) {
  config.validate();
  const auto map = class_map_for(task);
  MetricsReport report;
  report.regime = task.regime;
  report.shots = config.shots;
  report.seeds = config.seeds;
  report.detectors = config.detectors;
  for (const auto& [name, examples] : task.ood_sets) report.ood_sets.push_back(name);
  if (!config.out_dir.empty()) fs::create_directories(config.out_dir);

  Evaluator evaluator(task, config, map, report);
  for (int seed : config.seeds) {
    const auto splits = shot_splits(task, config.shots, seed);

    evaluator.run(Setting::kZeroGrad, seed, base, splits, config.zero_grad_fit_split, {});

    ToyLM model = base;
    toylm::TrainHooks hooks;
    if (config.track_ood_curves) {
      hooks.on_epoch_end = [&](int epoch, const ToyLM& m, std::vector<CurvePoint>& curve) {
        append_ood_curve(epoch, m, splits, task, map, config.detectors,
                         config.tuned_fit_split, curve);
      };
    }
    const auto result = toylm::train(model, splits.train, splits.val, map, config.train,
                                     static_cast<uint64_t>(seed), hooks);
    if (!config.out_dir.empty()) {
      const fs::path dir = config.out_dir / ("seed" + std::to_string(seed));
      fs::create_directories(dir);
      toylm::write_curve(dir / "curve.tsv", result.curve);
    }
    SeedRun stats;
    stats.epochs_run = result.epochs_run;
    stats.best_epoch = result.best_epoch;
    evaluator.run(Setting::kFineTuned, seed, model, splits, config.tuned_fit_split, stats);
  }

  if (!config.out_dir.empty()) {
    write_text(config.out_dir / "report.txt", report.to_table());
    write_text(config.out_dir / "report.kv", report.to_key_values());
    write_text(config.out_dir / "run_config.txt", config.to_text());
  }
  return report;
}

double TuningComparison::late_epoch_auroc(TuningMode mode, DetectorKind detector,
                                          int last_epochs) const {
  const std::string metric = "auroc." + to_string(detector);
  double total = 0.0;
  int runs_seen = 0;
  for (const auto& run : runs) {
    if (run.mode != mode) continue;
    int last = 0;
    for (const auto& p : run.curve) {
      if (p.metric == metric) last = std::max(last, p.epoch);
    }
    double sum = 0.0;
    int n = 0;
    for (const auto& p : run.curve) {
      if (p.metric == metric && p.epoch > last - last_epochs) {
        sum += p.value;
        ++n;
      }
    }
    if (n == 0) continue;
    total += sum / n;
    ++runs_seen;
  }
  return runs_seen ? total / runs_seen : std::numeric_limits<double>::quiet_NaN();
}

TuningComparison compare_tuning_modes(const SyntheticTask& task, const RunConfig& config,
                                      const ToyLM& base) {
  config.validate();
  const auto map = class_map_for(task);
  TuningComparison out;
  for (int seed : config.seeds) {
    const auto splits = shot_splits(task, config.shots, seed);
    for (auto mode : {TuningMode::kGenerative, TuningMode::kDiscriminative}) {
      ToyLM model = base;
      TrainConfig tc = config.train;
      tc.mode = mode;
      toylm::TrainHooks hooks;
      hooks.on_epoch_end = [&](int epoch, const ToyLM& m, std::vector<CurvePoint>& curve) {
        append_ood_curve(epoch, m, splits, task, map, config.detectors,
                         config.tuned_fit_split, curve);
      };
      auto result = toylm::train(model, splits.train, splits.val, map, tc,
                                 static_cast<uint64_t>(seed), hooks);
      out.runs.push_back({mode, seed, std::move(result.curve), std::move(result.epoch_orders)});
    }
  }
  if (!config.out_dir.empty()) {
    fs::create_directories(config.out_dir);
    std::ostringstream os;
    os << "mode\tseed\tepoch\tsplit\tmetric\tvalue\n";
    for (const auto& run : out.runs) {
      for (const auto& p : run.curve) {
        os << to_string(run.mode) << "\t" << run.seed << "\t" << p.epoch << "\t" << p.split
           << "\t" << p.metric << "\t" << fmt(p.value) << "\n";
      }
    }
    write_text(config.out_dir / "compare_curves.tsv", os.str());
  }
  return out;
}

std::vector<DensityRow> density_table(
    const std::vector<std::pair<std::string, std::vector<double>>>& splits, int bins) {
  if (bins <= 0) throw ConfigError("density table needs at least one bin");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& [name, scores] : splits) {
    for (double s : scores) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  std::vector<DensityRow> rows;
  if (!std::isfinite(lo)) return rows;
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / bins;
  for (const auto& [name, scores] : splits) {
    std::vector<int> counts(static_cast<size_t>(bins), 0);
    for (double s : scores) {
      const int b = std::min(bins - 1, static_cast<int>((s - lo) / width));
      ++counts[static_cast<size_t>(b)];
    }
    for (int b = 0; b < bins; ++b) {
      rows.push_back({lo + b * width, lo + (b + 1) * width, name, counts[static_cast<size_t>(b)]});
    }
  }
  return rows;
}

void write_density(const fs::path& path, const std::vector<DensityRow>& rows) {
  std::ostringstream os;
  os << "bin_lo\tbin_hi\tsplit\tcount\n";
  for (const auto& r : rows) {
    os << fmt(r.bin_lo) << "\t" << fmt(r.bin_hi) << "\t" << r.split << "\t" << r.count << "\n";
  }
  write_text(path, os.str());
}

}  // namespace genood::bench
