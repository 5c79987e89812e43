#pragma once

#include <cstdint>
#include <vector>

#include "dmtd/model.hpp"

namespace dmtd {

// One layer range run by one forward pass over the listed positions.
struct TraceEntry {
  std::int64_t pass_index = 0;
  RangeId range = RangeId::Encoding;
  std::vector<int> positions;  // strictly increasing
};

class InvocationTrace {
 public:
  // Pass indices must be nondecreasing and positions strictly increasing.
  void record(std::int64_t pass_index, RangeId range, std::vector<int> positions);

  const std::vector<TraceEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  std::size_t pass_count() const;

  // How many passes ran the given range.
  std::size_t range_invocations(RangeId range) const;
  // Sum over entries of the number of layers in the entry's range: one
  // invocation per (pass, layer) however many tokens the pass carries.
  std::int64_t layer_invocations(const LayerPartition& partition) const;

  void append(const InvocationTrace& other);

 private:
  std::vector<TraceEntry> entries_;
};

}  // namespace dmtd
