#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

// Detection metrics treat ID as the positive class and OOD as negative.
// Tied scores are always handled as an atomic group, which makes every
// metric invariant to record order.
namespace genood::metrics {

// Mann-Whitney AUROC via midranks, O(n log n).
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

// False alarm rate at the threshold admitting at least 95% of ID samples.
double far_at_95(std::span<const double> id_scores, std::span<const double> ood_scores);

// Average precision with step interpolation; precision is evaluated after
// each tied group.
double aupr(std::span<const double> id_scores, std::span<const double> ood_scores);

struct DetectionMetrics {
  double auroc = 0.0;
  double far95 = 0.0;
  double aupr = 0.0;
};

DetectionMetrics evaluate(std::span<const double> id_scores,
                          std::span<const double> ood_scores);

// What a detector that cannot be fitted reports: chance AUROC, every OOD
// sample accepted, AUPR at the positive prior.
DetectionMetrics degenerate_metrics(size_t n_id, size_t n_ood);

// Output is cut at the first end-of-sequence marker and both sides are
// trimmed of surrounding whitespace before exact comparison.
inline constexpr char kEndOfSequenceMarker[] = "</s>";
std::string normalize_decoded(std::string_view decoded);
double strict_match_accuracy(const std::vector<std::string>& decoded,
                             const std::vector<std::string>& gold);

// |sum_{i != j} cos(x_i, x_j)| / (n^2 - n), one embedding per row.
double anisotropy(const Eigen::MatrixXd& embeddings);

}  // namespace genood::metrics
