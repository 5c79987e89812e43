#pragma once

// Layer-invocation cost model and measurement harness.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <boost/rational.hpp>

#include "dmtd/infer.hpp"
#include "dmtd/model.hpp"
#include "dmtd/trace.hpp"

namespace dmtd {

using Rational = boost::rational<std::int64_t>;

double to_double(const Rational& r);

// (L + (tau - 1) * reused) / (tau * L): the fraction of layers a generated
// token traverses when every cycle runs one full pass and tau - 1 passes
// through `reused` layers. Throws ConfigError unless 1 <= reused <= L, tau >= 1.
Rational plt_theoretical(int n_layers, int reused_layers, int tau);

// Layers a light pass traverses: the decoding range, plus the encoding range
// for the encoding-base variant.
int reused_layer_count(const LayerPartition& partition, MaskVariant variant);

struct PltReport {
  int n_layers = 0;
  int n_encoding = 0;
  int n_thinking = 0;
  int n_decoding = 0;
  int tau = 1;
  std::int64_t generated_tokens = 0;
  std::int64_t layer_invocations = 0;
  Rational theoretical{1};
  Rational measured{1};
  bool full_cycles = false;  // generated_tokens is a positive multiple of tau
  bool match = false;        // measured == theoretical on full cycles
};

// measured = layer invocations in the trace / (generated_tokens * L). The
// trace holds every pass that emitted a token, the prefill pass included.
// Throws ConfigError on an empty trace.
PltReport measure_plt(const InvocationTrace& trace, const LayerPartition& partition, MaskVariant variant,
                      int tau, std::int64_t generated_tokens);

struct ScalingFit {
  std::vector<std::pair<double, double>> points;  // (tokens, loss)
  double slope = 0.0;                             // loss change per decade of tokens
  double intercept = 0.0;
  double r_squared = 0.0;
};

// Ordinary least squares of loss on log10(tokens). R^2 is 1 when both the
// residual and the total variance vanish. Throws ConfigError with fewer than
// two distinct token counts or a non-positive count.
ScalingFit fit_scaling_law(const std::vector<std::pair<double, double>>& points);

struct ThroughputRow {
  int tau = 1;
  int batch = 1;
  int generated_per_stream = 0;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
  std::int64_t stream_layer_invocations = 0;  // per stream
  std::int64_t batch_layer_invocations = 0;   // lockstep: one per (pass, layer) for the whole batch
  PltReport plt;
};

struct ThroughputOptions {
  std::vector<int> taus{1, 2, 3, 4};
  std::vector<int> batch_sizes{1};
  int context_length = 32;
  int gen_length = 48;
  std::uint64_t seed = 0;
  MaskVariant variant = MaskVariant::EmbeddingBase;
};

// Steps `batch` independent streams in lockstep per (tau, batch) pair over
// seeded random contexts. Wall-clock figures are advisory on CPU; the
// invocation counts are exact.
std::vector<ThroughputRow> throughput_bench(const Model<float>& model, const ThroughputOptions& options);

inline constexpr int kReportSchemaVersion = 1;

// Tab-separated table with a leading "# schema_version=N" comment line.
std::string throughput_table_tsv(const std::vector<ThroughputRow>& rows);
// JSON summary of the same rows plus model and partition metadata.
std::string throughput_summary_json(const std::vector<ThroughputRow>& rows, const ModelConfig& config);

}  // namespace dmtd
