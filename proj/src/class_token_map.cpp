#include "genood/class_token_map.hpp"

#include <set>

#include "genood/errors.hpp"

namespace genood {
namespace {

std::string describe_groups(const std::vector<std::vector<std::string>>& groups) {
  std::string msg = "class names share a first token:";
  for (const auto& group : groups) {
    msg += " {";
    for (size_t i = 0; i < group.size(); ++i) {
      if (i) msg += ", ";
      msg += group[i];
    }
    msg += "}";
  }
  msg += "; supply a rename for all but one name in each group "
         "(e.g. position=location)";
  return msg;
}

}  // namespace

CollisionError::CollisionError(std::vector<std::vector<std::string>> groups)
    : Error(describe_groups(groups)), groups_(std::move(groups)) {}

ClassTokenMap ClassTokenMap::build(
    const std::vector<std::string>& class_names, const Tokenizer& tokenizer,
    const std::map<std::string, std::string>& renames) {
  if (class_names.empty()) throw EmptyInputError("class name list is empty");
  std::set<std::string> distinct(class_names.begin(), class_names.end());
  if (distinct.size() != class_names.size()) {
    throw ConfigError("class names must be distinct");
  }
  for (const auto& [from, to] : renames) {
    if (!distinct.count(from)) {
      throw ConfigError("rename source '" + from + "' is not a class name");
    }
  }

  ClassTokenMap map;
  std::map<int, std::vector<std::string>> by_token;
  for (const auto& original : class_names) {
    std::string name = original;
    if (auto it = renames.find(original); it != renames.end()) {
      name = it->second;
      map.renames_.emplace_back(original, name);
    }
    const auto tokens = tokenizer(name);
    if (tokens.empty()) {
      throw ConfigError("class name '" + name + "' tokenizes to nothing");
    }
    map.entries_.push_back({original, name, tokens.front()});
    by_token[tokens.front()].push_back(name);
  }

  std::vector<std::vector<std::string>> groups;
  for (auto& [token, names] : by_token) {
    if (names.size() > 1) groups.push_back(std::move(names));
  }
  if (!groups.empty()) throw CollisionError(std::move(groups));
  return map;
}

std::vector<int> ClassTokenMap::token_ids() const {
  std::vector<int> ids;
  ids.reserve(entries_.size());
  for (const auto& e : entries_) ids.push_back(e.token_id);
  return ids;
}

std::vector<std::string> ClassTokenMap::target_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.name);
  return names;
}

}  // namespace genood
