#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace genood {

// Tokenizes a string into vocabulary ids. Only the first id of a class name
// matters for the map.
using Tokenizer = std::function<std::vector<int>(const std::string&)>;

// Maps each class (by index) to the vocabulary id of the first token of its
// name. Logit-based detectors read exactly these K entries.
class ClassTokenMap {
 public:
  struct Entry {
    std::string original;  // name as given by the task
    std::string name;      // name after renames; this is what the model emits
    int token_id;
  };

  ClassTokenMap() = default;

  // Throws CollisionError listing every group of names that share a first
  // token. Renames are applied first; nothing is renamed automatically.
  static ClassTokenMap build(
      const std::vector<std::string>& class_names, const Tokenizer& tokenizer,
      const std::map<std::string, std::string>& renames = {});

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  const std::vector<std::pair<std::string, std::string>>& renames() const {
    return renames_;
  }
  std::vector<int> token_ids() const;
  // Names the model is trained to generate, in class-index order.
  std::vector<std::string> target_names() const;

 private:
  std::vector<Entry> entries_;
  std::vector<std::pair<std::string, std::string>> renames_;
};

}  // namespace genood
