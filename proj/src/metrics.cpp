#include "genood/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

#include "genood/errors.hpp"

namespace genood::metrics {
namespace {

void require_nonempty(std::span<const double> id, std::span<const double> ood,
                      const char* what) {
  if (id.empty() || ood.empty()) {
    throw EmptyInputError(std::string(what) +
                          ": ID and OOD score lists must be non-empty");
  }
}

// (score, is_id) sorted by descending score.
std::vector<std::pair<double, bool>> merged_descending(
    std::span<const double> id, std::span<const double> ood) {
  std::vector<std::pair<double, bool>> all;
  all.reserve(id.size() + ood.size());
  for (double s : id) all.emplace_back(s, true);
  for (double s : ood) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  return all;
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\v\f");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\v\f");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores, "auroc");
  auto all = merged_descending(id_scores, ood_scores);
  // Walk ascending so rank 1 is the lowest score; tied groups share a midrank.
  std::reverse(all.begin(), all.end());
  double id_rank_sum = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    size_t ids_in_group = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      ids_in_group += all[j].second;
      ++j;
    }
    // Ranks i+1 .. j; midrank is their mean. Kept in halves to stay exact.
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    id_rank_sum += midrank * static_cast<double>(ids_in_group);
    i = j;
  }
  const double n_id = static_cast<double>(id_scores.size());
  const double n_ood = static_cast<double>(ood_scores.size());
  return (id_rank_sum - n_id * (n_id + 1.0) / 2.0) / (n_id * n_ood);
}

double far_at_95(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores, "far_at_95");
  std::vector<double> sorted(id_scores.begin(), id_scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // ceil(0.95 * n) in integer arithmetic.
  const size_t k = (95 * sorted.size() + 99) / 100;
  const double threshold = sorted[k - 1];
  const auto accepted = std::count_if(ood_scores.begin(), ood_scores.end(),
                                      [&](double s) { return s >= threshold; });
  return static_cast<double>(accepted) / static_cast<double>(ood_scores.size());
}

double aupr(std::span<const double> id_scores, std::span<const double> ood_scores) {
  require_nonempty(id_scores, ood_scores, "aupr");
  const auto all = merged_descending(id_scores, ood_scores);
  const double n_id = static_cast<double>(id_scores.size());
  double tp = 0.0, fp = 0.0, ap = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    double group_tp = 0.0, group_fp = 0.0;
    size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) {
      (all[j].second ? group_tp : group_fp) += 1.0;
      ++j;
    }
    tp += group_tp;
    fp += group_fp;
    if (group_tp > 0.0) ap += (group_tp / n_id) * (tp / (tp + fp));
    i = j;
  }
  return ap;
}

DetectionMetrics evaluate(std::span<const double> id_scores,
                          std::span<const double> ood_scores) {
  return {auroc(id_scores, ood_scores), far_at_95(id_scores, ood_scores),
          aupr(id_scores, ood_scores)};
}

DetectionMetrics degenerate_metrics(size_t n_id, size_t n_ood) {
  if (n_id == 0 || n_ood == 0) {
    throw EmptyInputError("degenerate_metrics: empty split");
  }
  return {0.5, 1.0, static_cast<double>(n_id) / static_cast<double>(n_id + n_ood)};
}

std::string normalize_decoded(std::string_view decoded) {
  if (auto eos = decoded.find(kEndOfSequenceMarker); eos != std::string_view::npos) {
    decoded = decoded.substr(0, eos);
  }
  return trim(decoded);
}

double strict_match_accuracy(const std::vector<std::string>& decoded,
                             const std::vector<std::string>& gold) {
  if (decoded.size() != gold.size()) {
    throw DimensionError("strict_match_accuracy: " + std::to_string(decoded.size()) +
                         " predictions vs " + std::to_string(gold.size()) + " labels");
  }
  if (gold.empty()) throw EmptyInputError("strict_match_accuracy: no examples");
  size_t correct = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    correct += normalize_decoded(decoded[i]) == trim(gold[i]);
  }
  return static_cast<double>(correct) / static_cast<double>(gold.size());
}

double anisotropy(const Eigen::MatrixXd& embeddings) {
  const auto n = embeddings.rows();
  if (n < 2) throw EmptyInputError("anisotropy needs at least 2 embeddings");
  Eigen::RowVectorXd unit_sum = Eigen::RowVectorXd::Zero(embeddings.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = embeddings.row(i).norm();
    if (!(norm > 0.0)) {
      throw ZeroVectorError("anisotropy: embedding " + std::to_string(i) +
                            " is the zero vector");
    }
    unit_sum += embeddings.row(i) / norm;
  }
  // sum_{i != j} cos = |sum_i u_i|^2 - sum_i |u_i|^2, and |u_i| = 1.
  const double pair_sum = unit_sum.squaredNorm() - static_cast<double>(n);
  const double nn = static_cast<double>(n);
  return std::min(1.0, std::abs(pair_sum) / (nn * nn - nn));
}

}  // namespace genood::metrics
