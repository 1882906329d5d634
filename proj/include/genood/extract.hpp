#pragma once

#include <string>
#include <vector>

#include "genood/class_token_map.hpp"
#include "genood/dump.hpp"
#include "genood/trainer.hpp"

namespace genood::toylm {

struct Extraction {
  EmbeddingDump dump;
  // Per record log-sum-exp over the model's full output space (vocabulary,
  // or the classifier head when present). Full-vocabulary MSP needs it.
  std::vector<double> vocab_log_partition;
};

// Runs each templated sentence and records the final-position penultimate
// representation plus the first-token logits of every mapped class. With a
// classifier head the class logits are the head's outputs instead.
Extraction extract_dump(const ToyLM& model, const std::vector<Example>& examples,
                        const ClassTokenMap& map);

enum class Precision { kF32, kF16Sim, kInt8Sim };
Precision parse_precision(const std::string& name);
std::string to_string(Precision precision);

// Simulated reduced-precision storage: f16 rounds to the nearest half value;
// int8 applies symmetric quantize/dequantize with one scale per record
// vector (embedding and logits scaled separately).
EmbeddingDump quantize_sim(const EmbeddingDump& dump, Precision precision);

}  // namespace genood::toylm
