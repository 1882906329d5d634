#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "genood/class_token_map.hpp"
#include "genood/config.hpp"
#include "genood/dump.hpp"

// Post-hoc OOD score functions. Every score is oriented so that higher means
// more in-distribution.
namespace genood::detectors {

enum class MspMode { kFullVocab, kRenormalized };

// Numerically stable log(sum(exp(x))). Throws NonFiniteError on NaN/inf.
double log_sum_exp(std::span<const float> logits);

// kFullVocab: `logits` spans the whole vocabulary; softmax over all of it,
// then the max over the mapped class tokens. kRenormalized: `logits` holds
// exactly the K selected values.
double msp_score(std::span<const float> logits, const ClassTokenMap& map,
                 MspMode mode);
// Full-vocabulary MSP when only the K selected logits and the vocabulary
// log-partition are at hand.
double msp_from_partition(std::span<const float> selected,
                          double vocab_log_partition);
double msp_renormalized(std::span<const float> selected);

double energy_score(std::span<const float> selected_logits);

struct GaussianBank {
  std::vector<int> classes;  // class index of each row of `means`
  Eigen::MatrixXd means;     // one row per class with >= 1 fit sample
  Eigen::MatrixXd shared_covariance;
  Eigen::LLT<Eigen::MatrixXd> factor;
  double shrinkage = 0.0;

  int dim() const { return static_cast<int>(shared_covariance.rows()); }
};

inline constexpr double kDefaultShrinkage = 1e-5;

// Tied-covariance Gaussian fit. `embeddings` holds one sample per row and
// `labels[i]` is its class. Throws DegenerateFitError when no class has two
// samples and FactorizationError when the shrunk covariance is not PD.
GaussianBank fit_maha(const Eigen::MatrixXd& embeddings,
                      std::span<const int> labels,
                      double shrinkage_rel = kDefaultShrinkage);

// -min_c (z - mu_c)^T Sigma^-1 (z - mu_c), via two triangular solves.
double maha_score(const GaussianBank& bank, const Eigen::VectorXd& z);

struct CosineBank {
  Eigen::MatrixXd bank;  // unit-norm rows
  int dim() const { return static_cast<int>(bank.cols()); }
};

// `ids` names rows for error messages; may be empty.
CosineBank fit_cosine(const Eigen::MatrixXd& embeddings,
                      std::span<const std::string> ids = {});
double cosine_score(const CosineBank& bank, const Eigen::VectorXd& z);

// A detector fitted on one dump, ready to score others.
struct FittedDetector {
  DetectorKind kind = DetectorKind::kEnergy;
  std::variant<std::monostate, GaussianBank, CosineBank> state;
};

struct FitParams {
  double shrinkage_rel = kDefaultShrinkage;
};

FittedDetector fit_detector(DetectorKind kind, const EmbeddingDump& fit,
                            const FitParams& params = {});

// One score per record, in record order. `vocab_log_partition` supplies the
// per-record full-vocabulary log-sum-exp that full-vocabulary MSP needs; EDF1
// dumps do not carry it.
std::vector<double> score_records(
    const FittedDetector& detector, const EmbeddingDump& dump,
    std::span<const double> vocab_log_partition = {});

Eigen::MatrixXd embedding_matrix(const EmbeddingDump& dump);

struct ScoredSplits {
  DetectorKind kind;
  std::vector<double> id_test;
  std::vector<std::pair<std::string, std::vector<double>>> ood;
};

// Fits on the manifest's fit split, then scores id_test and every OOD set.
ScoredSplits score_dump(const DatasetManifest& manifest, DetectorKind kind,
                        const FitParams& params = {});

// Tab-separated rows "id  split  detector  score" with a header line.
struct ScoreRow {
  std::string id;
  std::string split;
  std::string detector;
  double score;
};
void write_scores(const std::filesystem::path& path,
                  const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> read_scores(const std::filesystem::path& path);

}  // namespace genood::detectors
