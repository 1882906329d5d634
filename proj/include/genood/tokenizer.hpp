#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace genood::toylm {

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS and EOS.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kVocabSize = 258;

inline constexpr std::string_view kPromptHead = "### Input:\n";
inline constexpr std::string_view kPromptTail = " ### Output:\n";

std::vector<int> byte_tokenize(std::string_view text);

// Bytes of the byte ids in `tokens`; BOS/EOS are dropped.
std::string detokenize(const std::vector<int>& tokens);

// BOS + "### Input:\n" + sentence + " ### Output:\n". Throws EmptyInputError
// for an empty sentence and ContextOverflowError when the result (plus
// `reserve` tokens for the answer) exceeds `context`.
std::vector<int> build_prompt(std::string_view sentence, int context,
                              int reserve = 0);

}  // namespace genood::toylm
