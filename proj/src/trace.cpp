#include "dmtd/trace.hpp"

#include <set>

#include "dmtd/errors.hpp"

namespace dmtd {

void InvocationTrace::record(std::int64_t pass_index, RangeId range, std::vector<int> positions) {
  if (!entries_.empty() && pass_index < entries_.back().pass_index) {
    throw ContractError("trace: pass indices must not decrease");
  }
  for (std::size_t i = 1; i < positions.size(); ++i) {
    if (positions[i] <= positions[i - 1]) throw ContractError("trace: positions must be strictly increasing");
  }
  entries_.push_back({pass_index, range, std::move(positions)});
}

std::size_t InvocationTrace::pass_count() const {
  std::set<std::int64_t> passes;
  for (const auto& e : entries_) passes.insert(e.pass_index);
  return passes.size();
}

std::size_t InvocationTrace::range_invocations(RangeId range) const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.range == range;
  return n;
}

std::int64_t InvocationTrace::layer_invocations(const LayerPartition& partition) const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += partition.get(e.range).size();
  return n;
}

void InvocationTrace::append(const InvocationTrace& other) {
  for (const auto& e : other.entries_) record(e.pass_index, e.range, e.positions);
}

}  // namespace dmtd
