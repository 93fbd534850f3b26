#pragma once

#include <array>
#include <string_view>

#include "storygen/ops.hpp"

namespace storygen::special {

inline constexpr TokenId pad = 0;
inline constexpr TokenId unknown = 1;
inline constexpr TokenId end_of_document = 2;
inline constexpr TokenId end_of_prompt = 3;
inline constexpr TokenId newline = 4;
inline constexpr std::size_t count = 5;

/// The decoder is primed with end_of_document before the first real token.
inline constexpr TokenId begin_of_sequence = end_of_document;

inline constexpr std::array<std::string_view, count> surface{"<pad>", "<unk>", "</s>", "<eop>", "<newline>"};

}  // namespace storygen::special
