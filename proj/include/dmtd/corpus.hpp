#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dmtd {

// Byte-level vocabulary: ids 0..255 are bytes, except that the document
// separator byte maps to the reserved id 256.
inline constexpr unsigned char kSeparatorByte = 0x1E;
inline constexpr int kSeparatorId = 256;
inline constexpr int kByteVocabSize = 257;

std::vector<int> tokenize(std::string_view bytes);
// Throws IndexError for ids outside [0, 257).
std::string detokenize(const std::vector<int>& ids);

struct CorpusSplit {
  std::vector<std::vector<int>> train;
  std::vector<std::vector<int>> eval;
  std::size_t total_tokens = 0;
};

// Reads every file (DataError when unreadable or all empty), joins them with
// the separator, cuts non-overlapping windows of `window` tokens, and assigns
// a seeded permutation's first ceil(eval_fraction * N) windows to eval.
CorpusSplit load_corpus(const std::vector<std::filesystem::path>& files, int window, double eval_fraction,
                        std::uint64_t seed);

// Same split over in-memory bytes.
CorpusSplit split_corpus(std::string_view bytes, int window, double eval_fraction, std::uint64_t seed);

}  // namespace dmtd
