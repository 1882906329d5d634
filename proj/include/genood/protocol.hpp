#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "genood/config.hpp"
#include "genood/metrics.hpp"
#include "genood/synthetic.hpp"
#include "genood/trainer.hpp"

namespace genood::bench {

enum class Setting { kZeroGrad, kFineTuned };
std::string to_string(Setting setting);

// One (setting, seed, detector, OOD set) evaluation.
struct Cell {
  Setting setting = Setting::kZeroGrad;
  int seed = 0;
  DetectorKind detector = DetectorKind::kMaha;
  std::string ood_set;
  metrics::DetectionMetrics metrics;
  bool degenerate = false;          // detector could not be fitted
  std::string score_file;           // relative to the output directory
};

struct SeedRun {
  Setting setting = Setting::kZeroGrad;
  int seed = 0;
  double id_accuracy = 0.0;
  double anisotropy = 0.0;
  int epochs_run = 0;
  int best_epoch = 0;
};

struct MetricsReport {
  Regime regime = Regime::kFar;
  Shots shots;
  std::vector<int> seeds;
  std::vector<DetectorKind> detectors;
  std::vector<std::string> ood_sets;
  std::vector<Cell> cells;
  std::vector<SeedRun> runs;

  // Arithmetic mean over seeds.
  metrics::DetectionMetrics mean(Setting setting, DetectorKind detector,
                                 const std::string& ood_set) const;
  // Mean AUROC over seeds and OOD sets.
  double mean_auroc(Setting setting, DetectorKind detector) const;
  double mean_accuracy(Setting setting) const;
  bool any_degenerate(Setting setting, DetectorKind detector) const;

  std::string to_table() const;
  // Flat "key = value" lines: per-seed cells, their means, and run stats.
  std::string to_key_values() const;
};

// Loads config.base_model when set; otherwise pretrains a fresh model on the
// synthetic pretraining corpus (pretrain_epochs = 0 leaves it untrained).
toylm::ToyLM build_base_model(const RunConfig& config,
                              std::vector<toylm::CurvePoint>* curve = nullptr);

// Zero-grad and fine-tuned evaluation of every seed, starting each from
// `base`. With a non-empty config.out_dir, writes per seed and setting:
// EDF1 dumps plus a manifest, one score file per detector, score density
// tables; per seed the training curve; and report.txt / report.kv.
MetricsReport run_protocol(const SyntheticTask& task, const RunConfig& config,
                           const toylm::ToyLM& base);
MetricsReport run_protocol(const SyntheticTask& task, const RunConfig& config);

struct ModeRun {
  TuningMode mode = TuningMode::kGenerative;
  int seed = 0;
  std::vector<toylm::CurvePoint> curve;
  std::vector<std::vector<uint32_t>> epoch_orders;
};

struct TuningComparison {
  std::vector<ModeRun> runs;
  // Mean over seeds of the AUROC over the last `last_epochs` recorded
  // epochs, averaged across OOD sets.
  double late_epoch_auroc(TuningMode mode, DetectorKind detector,
                          int last_epochs = 5) const;
};

// Trains generative and discriminative variants from `base` on identical
// data and seeds, recording per-epoch detector AUROC for both. Writes
// compare_curves.tsv into config.out_dir when set.
TuningComparison compare_tuning_modes(const SyntheticTask& task, const RunConfig& config,
                                      const toylm::ToyLM& base);

// Equal-width histogram of each split's scores over their joint range.
struct DensityRow {
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::string split;
  int count = 0;
};
std::vector<DensityRow> density_table(
    const std::vector<std::pair<std::string, std::vector<double>>>& splits, int bins = 20);
void write_density(const std::filesystem::path& path, const std::vector<DensityRow>& rows);

}  // namespace genood::bench
