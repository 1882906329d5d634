#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace genood {

// Post-hoc score functions. kMsp is the full-vocabulary softmax variant and
// needs full logits; kMspRenorm works from the K selected logits alone.
enum class DetectorKind { kMsp, kMspRenorm, kEnergy, kMaha, kCosine };

std::string to_string(DetectorKind kind);
DetectorKind parse_detector(const std::string& name);
std::vector<DetectorKind> all_detectors();
bool is_distance_detector(DetectorKind kind);

enum class FitSplit { kTrain, kVal };
std::string to_string(FitSplit split);
FitSplit parse_fit_split(const std::string& name);

enum class TuningMode { kGenerative, kDiscriminative };
std::string to_string(TuningMode mode);
TuningMode parse_tuning_mode(const std::string& name);

enum class Regime { kFar, kNear };
std::string to_string(Regime regime);
Regime parse_regime(const std::string& name);

// Examples per class; nullopt means the full split.
struct Shots {
  std::optional<int> per_class;
  bool is_full() const { return !per_class.has_value(); }
  std::string to_string() const;
  static Shots parse(const std::string& text);
};

struct ModelConfig {
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int context = 128;
  float init_scale = 0.02f;
};

struct TrainConfig {
  int epochs = 50;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 16;
  // Stop once validation accuracy has declined this many epochs in a row...
  int patience = 6;
  // ...and the (1-based) epoch number exceeds this.
  int min_epochs = 15;
  bool lora = false;
  int lora_rank = 16;
  double lora_alpha = 16.0;
  TuningMode mode = TuningMode::kGenerative;
};

// Paths of the EDF1 dumps making up one evaluation. Relative paths in the
// text form resolve against the manifest's own directory.
struct DatasetManifest {
  std::filesystem::path id_train;
  std::filesystem::path id_val;
  std::filesystem::path id_test;
  std::vector<std::pair<std::string, std::filesystem::path>> ood_sets;
  FitSplit fit_split = FitSplit::kVal;

  static DatasetManifest parse(const std::string& text,
                               const std::filesystem::path& base_dir = {});
  static DatasetManifest load(const std::filesystem::path& path);
  std::string to_text() const;

  // Loads every referenced dump and checks they agree on d, and that the ID
  // splits agree on the class names.
  void check_consistency() const;
};

struct RunConfig {
  std::vector<int> seeds = {1, 2, 3, 4, 5};
  // Seed of the synthetic corpus; the run seeds above drive few-shot
  // subsampling and training only, so every seed sees the same task.
  uint64_t task_seed = 0;
  Shots shots;
  std::vector<DetectorKind> detectors = all_detectors();
  Regime regime = Regime::kFar;
  FitSplit zero_grad_fit_split = FitSplit::kVal;
  FitSplit tuned_fit_split = FitSplit::kTrain;
  ModelConfig model;
  TrainConfig train;
  // Base model every run starts from. Empty: pretrain one from scratch.
  std::filesystem::path base_model;
  int pretrain_epochs = 12;
  int pretrain_per_grammar = 400;
  uint64_t pretrain_seed = 1234;
  // Record per-epoch OOD metrics while training (curve output).
  bool track_ood_curves = false;
  std::filesystem::path out_dir = "out";

  void validate() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

// "key = value" documents; '#' starts a comment. Unknown keys are rejected by
// the typed parsers above.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace genood
