#include "genood/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "genood/errors.hpp"

namespace genood::detectors {
namespace {

void require_finite(std::span<const float> values, const char* what) {
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(what) + " contains a non-finite value");
    }
  }
}

double max_softmax(std::span<const float> selected, double log_partition) {
  const float top = *std::max_element(selected.begin(), selected.end());
  return std::exp(static_cast<double>(top) - log_partition);
}

}  // namespace

double log_sum_exp(std::span<const float> logits) {
  if (logits.empty()) throw EmptyInputError("log-sum-exp of an empty vector");
  require_finite(logits, "logits");
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - top);
  return top + std::log(sum);
}

double msp_score(std::span<const float> logits, const ClassTokenMap& map,
                 MspMode mode) {
  if (map.empty()) throw EmptyInputError("class token map is empty");
  if (mode == MspMode::kRenormalized) {
    if (logits.size() != map.size()) {
      throw DimensionError("renormalized MSP expects exactly K=" +
                           std::to_string(map.size()) + " logits, got " +
                           std::to_string(logits.size()));
    }
    return msp_renormalized(logits);
  }
  std::vector<float> selected;
  selected.reserve(map.size());
  for (int id : map.token_ids()) {
    if (id < 0 || static_cast<size_t>(id) >= logits.size()) {
      throw DimensionError("class token id " + std::to_string(id) +
                           " outside the vocabulary logits");
    }
    selected.push_back(logits[static_cast<size_t>(id)]);
  }
  return msp_from_partition(selected, log_sum_exp(logits));
}

double msp_from_partition(std::span<const float> selected,
                          double vocab_log_partition) {
  if (selected.empty()) throw EmptyInputError("no class logits selected");
  require_finite(selected, "class logits");
  if (!std::isfinite(vocab_log_partition)) {
    throw NonFiniteError("vocabulary log-partition is not finite");
  }
  return max_softmax(selected, vocab_log_partition);
}

double msp_renormalized(std::span<const float> selected) {
  return max_softmax(selected, log_sum_exp(selected));
}

double energy_score(std::span<const float> selected_logits) {
  return log_sum_exp(selected_logits);
}

GaussianBank fit_maha(const Eigen::MatrixXd& embeddings,
                      std::span<const int> labels, double shrinkage_rel) {
  const auto n = embeddings.rows();
  const auto d = embeddings.cols();
  if (n == 0 || d == 0) throw EmptyInputError("no fit embeddings");
  if (static_cast<size_t>(n) != labels.size()) {
    throw DimensionError("fit_maha: label count differs from sample count");
  }
  std::map<int, std::vector<Eigen::Index>> members;
  for (Eigen::Index i = 0; i < n; ++i) members[labels[static_cast<size_t>(i)]].push_back(i);
  bool any_pair = false;
  for (const auto& [cls, rows] : members) any_pair |= rows.size() >= 2;
  if (!any_pair) {
    throw DegenerateFitError(
        "Mahalanobis fit is degenerate: every class has fewer than 2 samples, "
        "so no class covariance can be estimated");
  }

  GaussianBank bank;
  bank.means.resize(static_cast<Eigen::Index>(members.size()), d);
  bank.shared_covariance = Eigen::MatrixXd::Zero(d, d);
  Eigen::Index row = 0;
  for (const auto& [cls, rows] : members) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
    for (auto i : rows) mean += embeddings.row(i);
    mean /= static_cast<double>(rows.size());
    Eigen::MatrixXd centered(static_cast<Eigen::Index>(rows.size()), d);
    for (size_t j = 0; j < rows.size(); ++j) {
      centered.row(static_cast<Eigen::Index>(j)) = embeddings.row(rows[j]) - mean;
    }
    bank.shared_covariance.noalias() += centered.transpose() * centered;
    bank.means.row(row++) = mean;
    bank.classes.push_back(cls);
  }
  bank.shared_covariance /= static_cast<double>(n);
  // Symmetrize away accumulation noise.
  bank.shared_covariance =
      0.5 * (bank.shared_covariance + bank.shared_covariance.transpose());

  const double trace = bank.shared_covariance.trace();
  bank.shrinkage = trace > 0.0 ? shrinkage_rel * trace / static_cast<double>(d)
                               : shrinkage_rel;
  bank.shared_covariance.diagonal().array() += bank.shrinkage;
  bank.factor.compute(bank.shared_covariance);
  if (bank.factor.info() != Eigen::Success) {
    throw FactorizationError(
        "shared covariance plus shrinkage is not positive definite");
  }
  return bank;
}

double maha_score(const GaussianBank& bank, const Eigen::VectorXd& z) {
  if (z.size() != bank.dim()) {
    throw DimensionError("maha_score: query has d=" + std::to_string(z.size()) +
                         ", bank has d=" + std::to_string(bank.dim()));
  }
  const auto lower = bank.factor.matrixL();
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < bank.means.rows(); ++c) {
    Eigen::VectorXd diff = z - bank.means.row(c).transpose();
    lower.solveInPlace(diff);
    best = std::min(best, diff.squaredNorm());
  }
  return -best;
}

CosineBank fit_cosine(const Eigen::MatrixXd& embeddings,
                      std::span<const std::string> ids) {
  if (embeddings.rows() == 0) throw EmptyInputError("no fit embeddings");
  CosineBank out;
  out.bank = embeddings;
  for (Eigen::Index i = 0; i < out.bank.rows(); ++i) {
    const double norm = out.bank.row(i).norm();
    if (!(norm > 0.0)) {
      const std::string who = static_cast<size_t>(i) < ids.size()
                                  ? "'" + ids[static_cast<size_t>(i)] + "'"
                                  : "#" + std::to_string(i);
      throw ZeroVectorError("cosine fit: record " + who + " has a zero embedding");
    }
    out.bank.row(i) /= norm;
  }
  return out;
}

double cosine_score(const CosineBank& bank, const Eigen::VectorXd& z) {
  if (z.size() != bank.dim()) {
    throw DimensionError("cosine_score: query has d=" + std::to_string(z.size()) +
                         ", bank has d=" + std::to_string(bank.dim()));
  }
  const double norm = z.norm();
  if (!(norm > 0.0)) throw ZeroVectorError("cosine_score: zero query vector");
  const double best = (bank.bank * (z / norm)).maxCoeff();
  return std::clamp(best, -1.0, 1.0);
}

Eigen::MatrixXd embedding_matrix(const EmbeddingDump& dump) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(dump.size()), dump.dim);
  for (size_t i = 0; i < dump.size(); ++i) {
    const auto& e = dump.records[i].embedding;
    for (uint32_t j = 0; j < dump.dim; ++j) {
      m(static_cast<Eigen::Index>(i), j) = e[j];
    }
  }
  return m;
}

FittedDetector fit_detector(DetectorKind kind, const EmbeddingDump& fit,
                            const FitParams& params) {
  FittedDetector det;
  det.kind = kind;
  if (kind == DetectorKind::kMaha) {
    std::vector<int> labels;
    labels.reserve(fit.size());
    for (const auto& r : fit.records) {
      if (!r.label_index) {
        throw ConfigError("Mahalanobis fit needs labels; record '" + r.id +
                          "' has none");
      }
      labels.push_back(*r.label_index);
    }
    det.state = fit_maha(embedding_matrix(fit), labels, params.shrinkage_rel);
  } else if (kind == DetectorKind::kCosine) {
    std::vector<std::string> ids;
    ids.reserve(fit.size());
    for (const auto& r : fit.records) ids.push_back(r.id);
    det.state = fit_cosine(embedding_matrix(fit), ids);
  }
  return det;
}

std::vector<double> score_records(const FittedDetector& detector,
                                  const EmbeddingDump& dump,
                                  std::span<const double> vocab_log_partition) {
  const bool needs_logits = !is_distance_detector(detector.kind);
  if (needs_logits && dump.num_classes() == 0) {
    throw MissingLogitsError(to_string(detector.kind) +
                             " needs class logits but the dump has K=0");
  }
  if (detector.kind == DetectorKind::kMsp) {
    if (vocab_log_partition.empty()) {
      throw MissingLogitsError(
          "full-vocabulary MSP needs vocabulary logits, which EDF1 dumps do "
          "not carry; use msp_renorm for dumps");
    }
    if (vocab_log_partition.size() != dump.size()) {
      throw DimensionError("one vocabulary log-partition per record expected");
    }
  }
  std::vector<double> scores;
  scores.reserve(dump.size());
  for (size_t i = 0; i < dump.size(); ++i) {
    const auto& r = dump.records[i];
    switch (detector.kind) {
      case DetectorKind::kMsp:
        scores.push_back(msp_from_partition(r.class_logits, vocab_log_partition[i]));
        break;
      case DetectorKind::kMspRenorm:
        scores.push_back(msp_renormalized(r.class_logits));
        break;
      case DetectorKind::kEnergy:
        scores.push_back(energy_score(r.class_logits));
        break;
      case DetectorKind::kMaha:
        scores.push_back(maha_score(std::get<GaussianBank>(detector.state),
                                    Eigen::Map<const Eigen::VectorXf>(
                                        r.embedding.data(),
                                        static_cast<Eigen::Index>(r.embedding.size()))
                                        .cast<double>()));
        break;
      case DetectorKind::kCosine:
        scores.push_back(cosine_score(std::get<CosineBank>(detector.state),
                                      Eigen::Map<const Eigen::VectorXf>(
                                          r.embedding.data(),
                                          static_cast<Eigen::Index>(r.embedding.size()))
                                          .cast<double>()));
        break;
    }
  }
  return scores;
}

ScoredSplits score_dump(const DatasetManifest& manifest, DetectorKind kind,
                        const FitParams& params) {
  const auto fit = read_dump(manifest.fit_split == FitSplit::kTrain
                                 ? manifest.id_train
                                 : manifest.id_val);
  const auto det = fit_detector(kind, fit, params);
  ScoredSplits out{kind, score_records(det, read_dump(manifest.id_test)), {}};
  for (const auto& [name, path] : manifest.ood_sets) {
    out.ood.emplace_back(name, score_records(det, read_dump(path)));
  }
  return out;
}

void write_scores(const std::filesystem::path& path,
                  const std::vector<ScoreRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "id\tsplit\tdetector\tscore\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.id << '\t' << r.split << '\t' << r.detector << '\t' << r.score
        << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<ScoreRow> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<ScoreRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("id\t", 0) == 0) continue;
    if (line.empty()) continue;
    std::stringstream ss(line);
    ScoreRow row;
    std::string score;
    if (!std::getline(ss, row.id, '\t') || !std::getline(ss, row.split, '\t') ||
        !std::getline(ss, row.detector, '\t') || !std::getline(ss, score)) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 4 tab-separated fields");
    }
    try {
      row.score = std::stod(score);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": bad score '" + score + "'");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace genood::detectors
