#include "genood/extract.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "genood/detectors.hpp"
#include "genood/errors.hpp"

namespace genood::toylm {
namespace {

void quantize_int8(std::vector<float>& values) {
  float max_abs = 0.0f;
  for (float v : values) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0f) return;
  const float scale = max_abs / 127.0f;
  for (auto& v : values) {
    const float q = std::clamp(std::nearbyint(v / scale), -127.0f, 127.0f);
    v = q * scale;
  }
}

void round_half(std::vector<float>& values) {
  for (auto& v : values) v = static_cast<float>(Eigen::half(v));
}

}  // namespace

Extraction extract_dump(const ToyLM& model, const std::vector<Example>& examples,
                        const ClassTokenMap& map) {
  if (examples.empty()) throw EmptyInputError("no sentences to extract");
  const bool use_head = model.has_classifier_head();
  if (use_head && static_cast<size_t>(model.num_head_classes()) != map.size()) {
    throw DimensionError("classifier head size differs from the class map");
  }
  const auto token_ids = map.token_ids();
  Extraction out;
  out.dump.dim = static_cast<uint32_t>(model.config().d_model);
  for (const auto& e : map.entries()) out.dump.class_names.push_back(e.original);
  out.dump.records.reserve(examples.size());
  out.vocab_log_partition.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto prompt = build_prompt(ex.sentence, model.config().context);
    const auto cache = model.forward(prompt);
    const ToyLM::Vector z = cache.z.row(cache.z.rows() - 1);
    EmbeddingRecord rec;
    rec.id = ex.id;
    if (ex.label >= 0) rec.label_index = ex.label;
    rec.embedding.assign(z.data(), z.data() + z.size());
    const ToyLM::Vector logits = use_head ? model.head_logits(z) : model.lm_logits_row(z);
    if (!map.empty()) {
      if (use_head) {
        rec.class_logits.assign(logits.data(), logits.data() + logits.size());
      } else {
        for (int id : token_ids) rec.class_logits.push_back(logits(id));
      }
      out.vocab_log_partition.push_back(detectors::log_sum_exp(
          std::span<const float>(logits.data(), static_cast<size_t>(logits.size()))));
    }
    out.dump.records.push_back(std::move(rec));
  }
  if (map.empty()) out.vocab_log_partition.clear();
  return out;
}

Precision parse_precision(const std::string& name) {
  if (name == "f32") return Precision::kF32;
  if (name == "f16_sim") return Precision::kF16Sim;
  if (name == "int8_sim") return Precision::kInt8Sim;
  throw ConfigError("precision must be f32, f16_sim or int8_sim; got '" + name + "'");
}

std::string to_string(Precision precision) {
  switch (precision) {
    case Precision::kF32: return "f32";
    case Precision::kF16Sim: return "f16_sim";
    case Precision::kInt8Sim: return "int8_sim";
  }
  return "?";
}

EmbeddingDump quantize_sim(const EmbeddingDump& dump, Precision precision) {
  EmbeddingDump out = dump;
  if (precision == Precision::kF32) return out;
  for (auto& rec : out.records) {
    if (precision == Precision::kF16Sim) {
      round_half(rec.embedding);
      round_half(rec.class_logits);
    } else {
      quantize_int8(rec.embedding);
      quantize_int8(rec.class_logits);
    }
  }
  return out;
}

}  // namespace genood::toylm
