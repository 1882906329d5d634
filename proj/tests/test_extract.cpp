#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Core>
#include <cmath>
#include <random>
#include <set>

#include "genood/detectors.hpp"
#include "genood/errors.hpp"
#include "genood/extract.hpp"

using namespace genood;
using namespace genood::toylm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 1;
  c.heads = 2;
  c.context = 64;
  return c;
}

ClassTokenMap pn_map() {
  return ClassTokenMap::build({"positive", "negative"},
                              [](const std::string& s) { return byte_tokenize(s); });
}

const std::vector<Example> kExamples{
    {"a", "a fine film", 0}, {"b", "a dull film", 1}, {"c", "a fine film", -1}};

}  // namespace

TEST_CASE("extracted records follow the model") {
  const ToyLM model(small_config(), 1);
  const auto map = pn_map();
  const auto ex = extract_dump(model, kExamples, map);
  const auto& dump = ex.dump;
  CHECK(dump.dim == 16);
  CHECK(dump.class_names == std::vector<std::string>{"positive", "negative"});
  REQUIRE(dump.size() == 3);
  CHECK(dump.records[0].label_index == 0);
  CHECK_FALSE(dump.records[2].label_index.has_value());
  CHECK_NOTHROW(dump.validate());

  const auto cache = model.forward(build_prompt("a dull film", 64));
  const ToyLM::Vector z = cache.z.row(cache.z.rows() - 1);
  const auto logits = model.lm_logits_row(z);
  for (int j = 0; j < 16; ++j) CHECK(dump.records[1].embedding[static_cast<size_t>(j)] == z(j));
  CHECK(dump.records[1].class_logits[0] == logits('p'));
  CHECK(dump.records[1].class_logits[1] == logits('n'));
  REQUIRE(ex.vocab_log_partition.size() == 3);
  CHECK(ex.vocab_log_partition[1] ==
        doctest::Approx(detectors::log_sum_exp(
            std::span<const float>(logits.data(), static_cast<size_t>(logits.size())))));
}

TEST_CASE("identical sentences give identical records") {
  const ToyLM model(small_config(), 2);
  const auto dump = extract_dump(model, kExamples, pn_map()).dump;
  CHECK(dump.records[0].embedding == dump.records[2].embedding);
  CHECK(dump.records[0].class_logits == dump.records[2].class_logits);
  CHECK(extract_dump(model, kExamples, pn_map()).dump == dump);
}

TEST_CASE("an empty class map gives an embeddings-only dump") {
  const ToyLM model(small_config(), 3);
  const auto ex = extract_dump(model, kExamples, ClassTokenMap{});
  CHECK(ex.dump.num_classes() == 0);
  for (const auto& r : ex.dump.records) CHECK(r.class_logits.empty());
  CHECK(ex.vocab_log_partition.empty());
  CHECK(decode_dump(encode_dump(ex.dump)) == ex.dump);
}

TEST_CASE("a classifier head supplies the class logits") {
  ToyLM model(small_config(), 4);
  model.add_classifier_head(2, 5);
  const auto ex = extract_dump(model, kExamples, pn_map());
  const auto cache = model.forward(build_prompt("a fine film", 64));
  const auto head = model.head_logits(cache.z.row(cache.z.rows() - 1));
  CHECK(ex.dump.records[0].class_logits[0] == head(0));
  CHECK(ex.dump.records[0].class_logits[1] == head(1));

  ToyLM three(small_config(), 4);
  three.add_classifier_head(3, 5);
  CHECK_THROWS_AS(extract_dump(three, kExamples, pn_map()), DimensionError);
  CHECK_THROWS_AS(extract_dump(model, {}, pn_map()), EmptyInputError);
}

TEST_CASE("precision names") {
  for (auto p : {Precision::kF32, Precision::kF16Sim, Precision::kInt8Sim}) {
    CHECK(parse_precision(to_string(p)) == p);
  }
  CHECK_THROWS_AS(parse_precision("bf16"), ConfigError);
}

TEST_CASE("simulated quantization") {
  std::mt19937_64 rng(6);
  std::normal_distribution<float> n(0.0f, 3.0f);
  EmbeddingDump dump;
  dump.dim = 32;
  dump.class_names = {"a", "b", "c"};
  for (int i = 0; i < 20; ++i) {
    EmbeddingRecord r{"r" + std::to_string(i), i % 3, {}, {}};
    for (int j = 0; j < 32; ++j) r.embedding.push_back(n(rng));
    for (int j = 0; j < 3; ++j) r.class_logits.push_back(n(rng) * 10.0f);
    dump.records.push_back(std::move(r));
  }

  SUBCASE("f32 is the identity") { CHECK(quantize_sim(dump, Precision::kF32) == dump); }

  SUBCASE("f16 keeps half-representable values") {
    auto exact = dump;
    for (auto& r : exact.records) {
      for (auto& v : r.embedding) v = static_cast<float>(Eigen::half(v));
      for (auto& v : r.class_logits) v = static_cast<float>(Eigen::half(v));
    }
    CHECK(quantize_sim(exact, Precision::kF16Sim) == exact);
    const auto q = quantize_sim(dump, Precision::kF16Sim);
    CHECK(q == exact);
    for (size_t i = 0; i < dump.size(); ++i) {
      for (size_t j = 0; j < dump.dim; ++j) {
        const float v = dump.records[i].embedding[j];
        CHECK(std::abs(q.records[i].embedding[j] - v) <= std::abs(v) * 0x1p-11f + 0x1p-25f);
      }
    }
  }

  SUBCASE("int8 error is bounded by half a step") {
    const auto q = quantize_sim(dump, Precision::kInt8Sim);
    CHECK_NOTHROW(q.validate());
    for (size_t i = 0; i < dump.size(); ++i) {
      const auto& e = dump.records[i].embedding;
      float max_abs = 0.0f;
      for (float v : e) max_abs = std::max(max_abs, std::abs(v));
      const float step = max_abs / 127.0f;
      std::set<float> levels;
      for (size_t j = 0; j < e.size(); ++j) {
        CHECK(std::abs(q.records[i].embedding[j] - e[j]) <= 0.5f * step * 1.0001f);
        levels.insert(q.records[i].embedding[j]);
      }
      CHECK(levels.size() <= 255);
    }
    CHECK(q.records[0].id == dump.records[0].id);
    CHECK(q.records[0].label_index == dump.records[0].label_index);
  }

  SUBCASE("all-zero vectors stay zero") {
    auto zeros = dump;
    std::fill(zeros.records[0].embedding.begin(), zeros.records[0].embedding.end(), 0.0f);
    CHECK(quantize_sim(zeros, Precision::kInt8Sim).records[0].embedding == zeros.records[0].embedding);
  }
}
