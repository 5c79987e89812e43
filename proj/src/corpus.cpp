#include "dmtd/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dmtd/errors.hpp"

namespace dmtd {

std::vector<int> tokenize(std::string_view bytes) {
  std::vector<int> ids;
  ids.reserve(bytes.size());
  for (char c : bytes) {
    const auto b = static_cast<unsigned char>(c);
    ids.push_back(b == kSeparatorByte ? kSeparatorId : static_cast<int>(b));
  }
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kByteVocabSize) throw IndexError("detokenize: invalid token id " + std::to_string(id));
    out.push_back(static_cast<char>(id == kSeparatorId ? kSeparatorByte : static_cast<unsigned char>(id)));
  }
  return out;
}

CorpusSplit split_corpus(std::string_view bytes, int window, double eval_fraction, std::uint64_t seed) {
  if (window < 2) throw ConfigError("corpus window must be at least 2 tokens");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must lie in (0, 1)");
  const auto ids = tokenize(bytes);
  const std::size_t w = static_cast<std::size_t>(window);
  const std::size_t n_windows = ids.size() / w;
  if (n_windows < 2) throw DataError("corpus too small: need at least two windows of " + std::to_string(window) + " bytes");

  std::vector<std::size_t> order(n_windows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0xC0FFEEULL);
  for (std::size_t i = n_windows; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

  auto n_eval = static_cast<std::size_t>(std::ceil(eval_fraction * static_cast<double>(n_windows)));
  n_eval = std::clamp<std::size_t>(n_eval, 1, n_windows - 1);
  CorpusSplit split;
  split.total_tokens = ids.size();
  for (std::size_t k = 0; k < n_windows; ++k) {
    const std::size_t start = order[k] * w;
    std::vector<int> win(ids.begin() + static_cast<std::ptrdiff_t>(start),
                         ids.begin() + static_cast<std::ptrdiff_t>(start + w));
    (k < n_eval ? split.eval : split.train).push_back(std::move(win));
  }
  return split;
}

CorpusSplit load_corpus(const std::vector<std::filesystem::path>& files, int window, double eval_fraction,
                        std::uint64_t seed) {
  if (files.empty()) throw ConfigError("no corpus files configured");
  std::string joined;
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::ifstream in(files[i], std::ios::binary);
    if (!in) throw DataError("cannot read corpus file " + files[i].string());
    std::ostringstream buf;
    buf << in.rdbuf();
    if (i > 0) joined.push_back(static_cast<char>(kSeparatorByte));
    joined += buf.str();
  }
  if (joined.empty()) throw DataError("corpus is empty");
  return split_corpus(joined, window, eval_fraction, seed);
}

}  // namespace dmtd
