#include "genood/tokenizer.hpp"

#include "genood/errors.hpp"

namespace genood::toylm {

std::vector<int> byte_tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string detokenize(const std::vector<int>& tokens) {
  std::string out;
  for (int t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

std::vector<int> build_prompt(std::string_view sentence, int context,
                              int reserve) {
  if (sentence.empty()) throw EmptyInputError("cannot template an empty sentence");
  const size_t length = 1 + kPromptHead.size() + sentence.size() + kPromptTail.size();
  if (length + static_cast<size_t>(reserve) > static_cast<size_t>(context)) {
    throw ContextOverflowError("templated input needs " +
                               std::to_string(length + reserve) +
                               " tokens; context is " + std::to_string(context));
  }
  std::vector<int> tokens;
  tokens.reserve(length + static_cast<size_t>(reserve));
  tokens.push_back(kBos);
  for (std::string_view part : {kPromptHead, sentence, kPromptTail}) {
    for (char c : part) tokens.push_back(static_cast<unsigned char>(c));
  }
  return tokens;
}

}  // namespace genood::toylm
