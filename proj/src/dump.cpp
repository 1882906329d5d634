#include "genood/dump.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "genood/errors.hpp"

namespace genood {
namespace {

constexpr char kMagic[4] = {'E', 'D', 'F', '1'};

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end(),
                    [](float x, float y) {
                      return std::bit_cast<uint32_t>(x) ==
                             std::bit_cast<uint32_t>(y);
                    });
}

class ByteWriter {
 public:
  void u16(uint16_t v) {
    out_.push_back(static_cast<uint8_t>(v));
    out_.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) {
      out_.push_back(static_cast<uint8_t>(v >> shift));
    }
  }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void str16(const std::string& s) {
    u16(static_cast<uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, size_t n) { out_.insert(out_.end(), p, p + n); }

  std::vector<uint8_t> take() { return std::move(out_); }

 private:
  std::vector<uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& in) : in_(in) {}

  void set_context(std::string ctx) { context_ = std::move(ctx); }

  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(in_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str16() {
    const uint16_t len = u16();
    need(len);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  in_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    return s;
  }
  size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(size_t n) const {
    if (in_.size() - pos_ < n) {
      throw TruncatedError("EDF1 payload truncated while reading " + context_);
    }
  }

  const std::vector<uint8_t>& in_;
  size_t pos_ = 0;
  std::string context_ = "header";
};

}  // namespace

bool EmbeddingRecord::operator==(const EmbeddingRecord& other) const {
  return id == other.id && label_index == other.label_index &&
         same_bits(embedding, other.embedding) &&
         same_bits(class_logits, other.class_logits);
}

bool EmbeddingDump::operator==(const EmbeddingDump& other) const {
  return format_version == other.format_version && dim == other.dim &&
         class_names == other.class_names && records == other.records;
}

void EmbeddingDump::validate() const {
  if (records.empty()) {
    throw InconsistentDumpError("dump must contain at least one record (n >= 1)");
  }
  if (dim == 0) {
    throw InconsistentDumpError("embedding dimension must be >= 1");
  }
  if (records.size() > std::numeric_limits<uint32_t>::max()) {
    throw InconsistentDumpError("record count exceeds u32 range");
  }
  std::set<std::string> seen;
  for (const auto& name : class_names) {
    if (name.size() > std::numeric_limits<uint16_t>::max()) {
      throw InconsistentDumpError("class name longer than 65535 bytes");
    }
    if (!seen.insert(name).second) {
      throw InconsistentDumpError("duplicate class name '" + name + "'");
    }
  }
  const size_t k = class_names.size();
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = "record " + std::to_string(i) + " ('" + r.id + "')";
    if (r.id.size() > std::numeric_limits<uint16_t>::max()) {
      throw InconsistentDumpError(where + ": id longer than 65535 bytes");
    }
    if (r.embedding.size() != dim) {
      throw InconsistentDumpError(where + ": embedding length " +
                                  std::to_string(r.embedding.size()) +
                                  " != d " + std::to_string(dim));
    }
    if (r.class_logits.size() != k) {
      throw InconsistentDumpError(where + ": class_logits length " +
                                  std::to_string(r.class_logits.size()) +
                                  " != K " + std::to_string(k));
    }
    if (r.label_index) {
      if (*r.label_index < 0 || (k > 0 && static_cast<size_t>(*r.label_index) >= k)) {
        throw InconsistentDumpError(where + ": label_index " +
                                    std::to_string(*r.label_index) +
                                    " outside [0, K)");
      }
    }
  }
}

std::vector<uint8_t> encode_dump(const EmbeddingDump& dump) {
  dump.validate();
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(dump.format_version);
  w.u32(static_cast<uint32_t>(dump.records.size()));
  w.u32(dump.dim);
  w.u32(static_cast<uint32_t>(dump.class_names.size()));
  for (const auto& name : dump.class_names) w.str16(name);
  for (const auto& r : dump.records) {
    w.str16(r.id);
    w.i32(r.label_index.value_or(-1));
    for (float v : r.embedding) w.f32(v);
    for (float v : r.class_logits) w.f32(v);
  }
  return w.take();
}

EmbeddingDump decode_dump(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw BadMagicError("not an EDF1 file (bad magic)");
  }
  std::vector<uint8_t> body(bytes.begin() + 4, bytes.end());
  ByteReader r(body);
  EmbeddingDump dump;
  dump.format_version = r.u32();
  if (dump.format_version != EmbeddingDump::kFormatVersion) {
    throw VersionMismatchError("unsupported EDF1 version " +
                               std::to_string(dump.format_version));
  }
  const uint32_t n = r.u32();
  dump.dim = r.u32();
  const uint32_t k = r.u32();
  if (n == 0 || dump.dim == 0) {
    throw InconsistentDumpError("header declares n=" + std::to_string(n) +
                                ", d=" + std::to_string(dump.dim) +
                                "; both must be >= 1");
  }
  // Every record needs at least its fixed-size part; reject absurd headers
  // before allocating.
  const uint64_t min_record = 2 + 4 + 4ull * dump.dim + 4ull * k;
  r.set_context("class names");
  dump.class_names.reserve(std::min<size_t>(k, r.remaining() / 2));
  for (uint32_t c = 0; c < k; ++c) dump.class_names.push_back(r.str16());
  dump.records.reserve(std::min<uint64_t>(n, r.remaining() / min_record + 1));
  for (uint32_t i = 0; i < n; ++i) {
    r.set_context("record " + std::to_string(i));
    EmbeddingRecord rec;
    rec.id = r.str16();
    const int32_t label = r.i32();
    if (label != -1) rec.label_index = label;
    rec.embedding.resize(dump.dim);
    for (auto& v : rec.embedding) v = r.f32();
    rec.class_logits.resize(k);
    for (auto& v : rec.class_logits) v = r.f32();
    dump.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw InconsistentDumpError(std::to_string(r.remaining()) +
                                " trailing bytes after the last record; "
                                "header d/K disagree with the payload");
  }
  dump.validate();
  return dump;
}

void write_dump(const EmbeddingDump& dump, const std::filesystem::path& path) {
  const auto bytes = encode_dump(dump);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

EmbeddingDump read_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return decode_dump(bytes);
}

EmbeddingDump subsample_per_class(const EmbeddingDump& dump, int per_class, uint64_t seed) {
  if (per_class <= 0) throw ConfigError("shots per class must be positive");
  std::vector<size_t> order(dump.records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::map<int32_t, int> taken;
  std::vector<size_t> keep;
  for (size_t i : order) {
    const auto& label = dump.records[i].label_index;
    if (label && taken[*label]++ < per_class) keep.push_back(i);
  }
  std::sort(keep.begin(), keep.end());
  EmbeddingDump out;
  out.format_version = dump.format_version;
  out.dim = dump.dim;
  out.class_names = dump.class_names;
  for (size_t i : keep) out.records.push_back(dump.records[i]);
  return out;
}

}  // namespace genood
