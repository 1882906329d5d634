#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/QR>
#include <cmath>
#include <filesystem>
#include <random>

#include "genood/detectors.hpp"
#include "genood/errors.hpp"
#include "genood/tokenizer.hpp"

using namespace genood;
using namespace genood::detectors;

namespace {

Eigen::MatrixXd rows(std::initializer_list<std::initializer_list<double>> values) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(values.size()),
                    static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : values) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Eigen::MatrixXd random_orthogonal(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = n(rng);
  return Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
}

EmbeddingDump cluster_dump(std::mt19937_64& rng, const std::vector<Eigen::VectorXd>& centers,
                           int per_class, double spread, bool labeled) {
  std::normal_distribution<double> n;
  EmbeddingDump d;
  d.dim = static_cast<uint32_t>(centers[0].size());
  for (size_t c = 0; c < centers.size(); ++c) d.class_names.push_back("c" + std::to_string(c));
  for (size_t c = 0; c < centers.size(); ++c) {
    for (int i = 0; i < per_class; ++i) {
      EmbeddingRecord r;
      r.id = "c" + std::to_string(c) + "_" + std::to_string(i);
      if (labeled) r.label_index = static_cast<int32_t>(c);
      for (Eigen::Index j = 0; j < centers[c].size(); ++j) {
        r.embedding.push_back(static_cast<float>(centers[c](j) + spread * n(rng)));
      }
      for (size_t k = 0; k < centers.size(); ++k) {
        r.class_logits.push_back(static_cast<float>(n(rng)));
      }
      d.records.push_back(std::move(r));
    }
  }
  return d;
}

ClassTokenMap two_class_map() {
  return ClassTokenMap::build({"a", "b"}, [](const std::string& s) {
    return toylm::byte_tokenize(s);
  });
}

}  // namespace

TEST_CASE("renormalized MSP examples") {
  const std::vector<float> even{0.0f, 0.0f};
  const std::vector<float> lopsided{2.0f, 0.0f};
  CHECK(msp_renormalized(even) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(msp_renormalized(lopsided) == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(msp_score(lopsided, two_class_map(), MspMode::kRenormalized) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
}

TEST_CASE("full-vocabulary MSP with uniform logits is 1/V") {
  const std::vector<float> flat(toylm::kVocabSize, 3.0f);
  CHECK(msp_score(flat, two_class_map(), MspMode::kFullVocab) ==
        doctest::Approx(1.0 / toylm::kVocabSize).epsilon(1e-12));
}

TEST_CASE("MSP stays in range, full variant never exceeds the renormalized one") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 5.0f);
  const auto map = two_class_map();
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> logits(toylm::kVocabSize);
    for (auto& v : logits) v = n(rng);
    const std::vector<float> selected{logits['a'], logits['b']};
    const double full = msp_score(logits, map, MspMode::kFullVocab);
    const double renorm = msp_renormalized(selected);
    CHECK(full > 0.0);
    CHECK(full <= renorm + 1e-12);
    CHECK(renorm >= 0.5 - 1e-12);
    CHECK(renorm <= 1.0);
    CHECK(full == doctest::Approx(msp_from_partition(selected, log_sum_exp(logits))));
  }
}

TEST_CASE("renormalized MSP is shift invariant") {
  const std::vector<float> a{1.5f, -0.5f, 0.25f};
  const std::vector<float> b{101.5f, 99.5f, 100.25f};
  CHECK(msp_renormalized(a) == doctest::Approx(msp_renormalized(b)).epsilon(1e-9));
}

TEST_CASE("energy examples and stability") {
  const std::vector<float> zeros{0.0f, 0.0f};
  const std::vector<float> big{1000.0f, 1000.0f};
  CHECK(energy_score(zeros) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(energy_score(big) == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(std::isfinite(energy_score(std::vector<float>{-1e30f, 1e30f})));

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> q(-64, 64);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> x(4), shifted(4);
    const double c = q(rng);
    for (size_t i = 0; i < 4; ++i) {
      x[i] = static_cast<float>(q(rng)) / 8.0f;
      shifted[i] = x[i] + static_cast<float>(c);
    }
    CHECK(std::abs(energy_score(shifted) - (energy_score(x) + c)) < 1e-12);
    const double mx = *std::max_element(x.begin(), x.end());
    CHECK(energy_score(x) >= mx);
    CHECK(energy_score(x) <= mx + std::log(4.0) + 1e-12);
  }
}

TEST_CASE("logit detectors reject non-finite input") {
  CHECK_THROWS_AS(energy_score(std::vector<float>{NAN, 0.0f}), NonFiniteError);
  CHECK_THROWS_AS(msp_renormalized(std::vector<float>{INFINITY}), NonFiniteError);
  CHECK_THROWS_AS(energy_score(std::vector<float>{}), EmptyInputError);
  CHECK_THROWS_AS(msp_score(std::vector<float>{0.0f}, two_class_map(), MspMode::kRenormalized),
                  DimensionError);
}

TEST_CASE("Mahalanobis four-point example") {
  const auto x = rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}});
  const std::vector<int> labels{0, 0, 0, 0};
  const auto bank = fit_maha(x, labels);
  CHECK(bank.means.row(0).norm() < 1e-15);
  CHECK(bank.shared_covariance(0, 0) == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(std::abs(bank.shared_covariance(0, 1)) < 1e-15);
  CHECK(maha_score(bank, Eigen::Vector2d(1, 0)) == doctest::Approx(-2.0).epsilon(1e-4));
}

TEST_CASE("Mahalanobis score at a class mean is zero") {
  std::mt19937_64 rng(1);
  std::vector<Eigen::VectorXd> centers{Eigen::VectorXd::Constant(6, 1.0),
                                       Eigen::VectorXd::Constant(6, -2.0)};
  const auto dump = cluster_dump(rng, centers, 10, 0.5, true);
  const auto det = fit_detector(DetectorKind::kMaha, dump);
  const auto& bank = std::get<GaussianBank>(det.state);
  for (Eigen::Index c = 0; c < bank.means.rows(); ++c) {
    CHECK(maha_score(bank, bank.means.row(c).transpose()) == 0.0);
  }
  for (const auto s : score_records(det, dump)) CHECK(s <= 0.0);
}

TEST_CASE("Mahalanobis is invariant to orthogonal maps") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  const int d = 5;
  Eigen::MatrixXd x(30, d);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = n(rng) + (i % 3) * 2.0;
  std::vector<int> labels;
  for (int i = 0; i < 30; ++i) labels.push_back(i % 3);
  const auto bank = fit_maha(x, labels);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd q = random_orthogonal(d, rng);
    const auto rotated = fit_maha(x * q.transpose(), labels);
    Eigen::VectorXd z(d);
    for (int j = 0; j < d; ++j) z(j) = 2.0 * n(rng);
    const double a = maha_score(bank, z);
    const double b = maha_score(rotated, q * z);
    CHECK(std::abs(a - b) <= 1e-6 * std::abs(a));
  }
}

TEST_CASE("Mahalanobis ignores training order and never drops when a class is added") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  Eigen::MatrixXd x(12, 3);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 3; ++j) x(i, j) = n(rng);
  std::vector<int> labels{0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  const auto bank = fit_maha(x, labels);
  Eigen::MatrixXd xr = x.colwise().reverse();
  std::vector<int> lr(labels.rbegin(), labels.rend());
  const auto rev = fit_maha(xr, lr);
  const Eigen::Vector3d z(0.3, -1.0, 2.0);
  CHECK(maha_score(bank, z) == doctest::Approx(maha_score(rev, z)).epsilon(1e-12));

  // Same covariance, one more mean: the min over classes can only rise.
  GaussianBank more = bank;
  more.means.conservativeResize(3, Eigen::NoChange);
  more.means.row(2) = z.transpose();
  more.classes.push_back(2);
  CHECK(maha_score(more, z) >= maha_score(bank, z));
}

TEST_CASE("Mahalanobis fit failures") {
  const auto x = rows({{1, 0}, {0, 1}});
  SUBCASE("one sample per class is degenerate") {
    const std::vector<int> labels{0, 1};
    CHECK_THROWS_AS(fit_maha(x, labels), DegenerateFitError);
  }
  SUBCASE("label count mismatch") {
    const std::vector<int> labels{0};
    CHECK_THROWS_AS(fit_maha(x, labels), DimensionError);
  }
  SUBCASE("indefinite covariance") {
    const std::vector<int> labels{0, 0};
    CHECK_THROWS_AS(fit_maha(x, labels, -10.0), FactorizationError);
  }
  SUBCASE("unlabeled fit record") {
    EmbeddingDump d;
    d.dim = 1;
    d.records.push_back({"u", std::nullopt, {1.0f}, {}});
    CHECK_THROWS_AS(fit_detector(DetectorKind::kMaha, d), ConfigError);
  }
  SUBCASE("dimension mismatch at scoring time") {
    const std::vector<int> labels{0, 0};
    const auto bank = fit_maha(x, labels);
    CHECK_THROWS_AS(maha_score(bank, Eigen::Vector3d(1, 2, 3)), DimensionError);
  }
}

TEST_CASE("cosine examples") {
  const auto bank = fit_cosine(rows({{1, 0}, {0, 1}}));
  CHECK(cosine_score(bank, Eigen::Vector2d(3, 0)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(cosine_score(fit_cosine(rows({{1, 0}})), Eigen::Vector2d(0, 2)) ==
        doctest::Approx(0.0));
  CHECK(cosine_score(bank, Eigen::Vector2d(1, 1)) ==
        doctest::Approx(std::sqrt(2.0) / 2.0).epsilon(1e-15));
  CHECK_THROWS_AS(fit_cosine(rows({{0, 0}})), ZeroVectorError);
  CHECK_THROWS_AS(cosine_score(bank, Eigen::Vector2d(0, 0)), ZeroVectorError);
  CHECK_THROWS_AS(cosine_score(bank, Eigen::Vector3d(1, 0, 0)), DimensionError);
}

TEST_CASE("cosine is scale invariant and bounded") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  Eigen::MatrixXd x(8, 4);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 4; ++j) x(i, j) = n(rng);
  const auto bank = fit_cosine(x);
  const auto scaled_bank = fit_cosine(x * 37.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Vector4d z(n(rng), n(rng), n(rng), n(rng));
    const double s = cosine_score(bank, z);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    CHECK(std::abs(cosine_score(bank, z * 1e3) - s) < 1e-12);
    CHECK(std::abs(cosine_score(scaled_bank, z) - s) < 1e-12);
  }
}

TEST_CASE("dump-level scoring") {
  std::mt19937_64 rng(8);
  std::vector<Eigen::VectorXd> centers{Eigen::VectorXd::Unit(4, 0) * 5.0,
                                       Eigen::VectorXd::Unit(4, 1) * 5.0};
  const auto fit = cluster_dump(rng, centers, 20, 0.3, true);
  auto ood = cluster_dump(rng, {Eigen::VectorXd::Unit(4, 2) * 5.0}, 10, 0.3, false);
  ood.class_names = fit.class_names;
  for (auto& r : ood.records) r.class_logits.push_back(0.0f);

  SUBCASE("separated clusters are ranked perfectly") {
    for (auto kind : {DetectorKind::kMaha, DetectorKind::kCosine}) {
      const auto det = fit_detector(kind, fit);
      const auto id_scores = score_records(det, fit);
      const auto ood_scores = score_records(det, ood);
      CHECK(*std::min_element(id_scores.begin(), id_scores.end()) >
            *std::max_element(ood_scores.begin(), ood_scores.end()));
    }
  }
  SUBCASE("identical records get identical scores and order does not matter") {
    auto dup = fit;
    dup.records[1] = dup.records[0];
    auto permuted = dup;
    std::reverse(permuted.records.begin(), permuted.records.end());
    for (auto kind : {DetectorKind::kMaha, DetectorKind::kCosine, DetectorKind::kEnergy,
                      DetectorKind::kMspRenorm}) {
      const auto det = fit_detector(kind, dup);
      const auto a = score_records(det, dup);
      auto b = score_records(det, permuted);
      std::reverse(b.begin(), b.end());
      CHECK(a[0] == a[1]);
      CHECK(a == b);
    }
  }
  SUBCASE("logit detectors need logits") {
    auto bare = fit;
    bare.class_names.clear();
    for (auto& r : bare.records) {
      r.class_logits.clear();
      r.label_index.reset();
    }
    for (auto kind : {DetectorKind::kEnergy, DetectorKind::kMspRenorm, DetectorKind::kMsp}) {
      CHECK_THROWS_AS(score_records(fit_detector(kind, bare), bare), MissingLogitsError);
    }
    CHECK_THROWS_AS(score_records(fit_detector(DetectorKind::kMsp, fit), fit),
                    MissingLogitsError);
    CHECK_NOTHROW(score_records(fit_detector(DetectorKind::kCosine, bare), bare));
  }
  SUBCASE("full MSP from supplied partitions") {
    std::vector<double> partitions;
    for (const auto& r : fit.records) partitions.push_back(log_sum_exp(r.class_logits) + 1.0);
    const auto det = fit_detector(DetectorKind::kMsp, fit);
    const auto full = score_records(det, fit, partitions);
    const auto renorm = score_records(fit_detector(DetectorKind::kMspRenorm, fit), fit);
    for (size_t i = 0; i < full.size(); ++i) {
      CHECK(full[i] == doctest::Approx(renorm[i] * std::exp(-1.0)).epsilon(1e-9));
    }
  }
}

TEST_CASE("manifest-driven scoring and score files") {
  const auto dir = std::filesystem::temp_directory_path() / "genood_test_detectors";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(9);
  std::vector<Eigen::VectorXd> centers{Eigen::VectorXd::Unit(3, 0) * 4.0,
                                       Eigen::VectorXd::Unit(3, 1) * 4.0};
  write_dump(cluster_dump(rng, centers, 8, 0.2, true), dir / "train.edf1");
  write_dump(cluster_dump(rng, centers, 8, 0.2, true), dir / "val.edf1");
  write_dump(cluster_dump(rng, centers, 8, 0.2, true), dir / "test.edf1");
  write_dump(cluster_dump(rng, {Eigen::VectorXd::Unit(3, 2) * 4.0}, 8, 0.2, false),
             dir / "ood.edf1");
  const auto manifest = DatasetManifest::parse(
      "id_train = train.edf1\nid_val = val.edf1\nid_test = test.edf1\nood.far = ood.edf1\n", dir);
  const auto scored = score_dump(manifest, DetectorKind::kCosine);
  REQUIRE(scored.id_test.size() == 16);
  REQUIRE(scored.ood.size() == 1);
  CHECK(scored.ood[0].first == "far");
  CHECK(scored.ood[0].second.size() == 8);

  std::vector<ScoreRow> rows{{"a", "id_test", "cosine", 0.1 + 0.2},
                             {"b", "ood.far", "cosine", -1.0 / 3.0}};
  write_scores(dir / "s.tsv", rows);
  const auto back = read_scores(dir / "s.tsv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].score == rows[0].score);
  CHECK(back[1].score == rows[1].score);
  CHECK(back[1].split == "ood.far");

  std::ofstream(dir / "bad.tsv") << "id\tsplit\tdetector\tscore\nonly\ttwo\n";
  CHECK_THROWS_AS(read_scores(dir / "bad.tsv"), FormatError);
}
