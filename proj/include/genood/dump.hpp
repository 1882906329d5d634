#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace genood {

// One extracted example: last-token representation plus the logits of each
// class's first token.
struct EmbeddingRecord {
  std::string id;
  std::optional<int32_t> label_index;
  std::vector<float> embedding;
  std::vector<float> class_logits;  // empty iff the dump has K == 0

  bool operator==(const EmbeddingRecord& other) const;
};

struct EmbeddingDump {
  static constexpr uint32_t kFormatVersion = 1;

  uint32_t format_version = kFormatVersion;
  uint32_t dim = 0;
  std::vector<std::string> class_names;
  std::vector<EmbeddingRecord> records;

  size_t size() const { return records.size(); }
  size_t num_classes() const { return class_names.size(); }

  // Throws InconsistentDumpError naming the first violated invariant.
  void validate() const;

  bool operator==(const EmbeddingDump& other) const;
};

// EDF1 serialization. Output bytes are a pure function of the dump value.
std::vector<uint8_t> encode_dump(const EmbeddingDump& dump);
EmbeddingDump decode_dump(const std::vector<uint8_t>& bytes);

void write_dump(const EmbeddingDump& dump, const std::filesystem::path& path);

// Keeps `per_class` labeled records of every class, chosen by a seeded
// shuffle, in their original order. Unlabeled records are dropped.
EmbeddingDump subsample_per_class(const EmbeddingDump& dump, int per_class, uint64_t seed);
EmbeddingDump read_dump(const std::filesystem::path& path);

}  // namespace genood
