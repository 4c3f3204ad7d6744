// Residue token vocabulary: 20 canonical amino acids plus GAP.
#pragma once

#include <array>
#include <optional>
#include <string>

namespace refold {

// Canonical one-letter alphabet in alphabetical order; GAP is index 20.
inline constexpr int kNumResidues = 20;
inline constexpr int kGapIndex = 20;
inline constexpr int kVocabSize = 21;
inline constexpr char kResidueLetters[kVocabSize + 1] = "ACDEFGHIKLMNPQRSTVWY-";

inline char token_to_char(int token) { return kResidueLetters[token]; }

inline std::optional<int> char_to_token(char c) {
    if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    if (c == '-') return kGapIndex;
    for (int i = 0; i < kNumResidues; ++i)
        if (kResidueLetters[i] == c) return i;
    return std::nullopt;
}

inline bool is_canonical(int token) { return token >= 0 && token < kNumResidues; }

}  // namespace refold
