#pragma once

// Cycle-based generation. Each cycle is one full pass followed by
// tau_infer - 1 light passes through the reused layers only; the next cycle's
// full pass also refills the encoding/thinking KV slots the light passes
// skipped.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dmtd/model.hpp"
#include "dmtd/trace.hpp"
#include "dmtd/train.hpp"

namespace dmtd {

enum class SamplerMode { Greedy, Temperature };

struct SamplerConfig {
  SamplerMode mode = SamplerMode::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Greedy: argmax, lowest id on ties. Temperature: categorical draw from
// softmax(logits / temperature) using `rng`. Non-finite logits throw NumericError.
int sample_token(std::span<const float> logits, const SamplerConfig& config, std::mt19937_64& rng);

enum class PassKind { Prefill, Light, Boundary, Extend };

const char* pass_kind_name(PassKind kind);

struct PassRecord {
  std::int64_t index = 0;
  PassKind kind = PassKind::Prefill;
  std::vector<int> refill_positions;  // encoding/thinking batch of a boundary pass
  int position = 0;                   // position whose logits the pass produced
};

struct PendingToken {
  int position = 0;
  int token = 0;
};

struct DecodeState {
  KvCache<float> cache;
  int next_position = 0;  // position of the next fed token
  int cycle_phase = 0;    // light passes completed in the current cycle
  int tau_infer = 1;
  MaskVariant variant = MaskVariant::EmbeddingBase;
  std::vector<PendingToken> pending_refill{};
  std::vector<std::vector<float>> stored_base{};  // base states of pending tokens
  InvocationTrace trace{};
  std::vector<PassRecord> passes{};

  // Light pass when cycle_phase < tau_infer - 1, boundary pass otherwise.
  bool next_is_boundary() const { return cycle_phase >= tau_infer - 1; }

  // Throws ContractError when the occupancy or pending bookkeeping is off:
  // |pending| == cycle_phase; positions before the pending ones are Filled
  // everywhere; pending ones are Filled at decoding layers and PendingRefill
  // at the deferred layers.
  void check_invariants(const LayerPartition& partition) const;
};

struct PrefillOptions {
  // Context decoding inputs follow the cyclical mask anchored so the last
  // context position is a cycle start. When false every context position
  // takes the full-path input.
  bool masked_context = true;
};

struct PrefillResult {
  DecodeState state;
  std::vector<float> logits;  // at the last context position
};

// Full pass over the whole context through all three ranges; its logits
// produce the first generated token.
PrefillResult prefill(const Model<float>& model, std::span<const int> context, const CyclePlan& plan,
                      const PrefillOptions& options = {});

// Feeds `token` through the reused layers only and returns its logits.
std::vector<float> light_pass(const Model<float>& model, DecodeState& state, int token);

// Cycle start: batches the pending tokens plus `token` through the deferred
// layers (refilling their KV), then sends only `token` on through the
// decoding layers.
std::vector<float> cycle_boundary_pass(const Model<float>& model, DecodeState& state, int token);

// Light or boundary pass, whichever the cycle phase calls for.
std::vector<float> decode_step(const Model<float>& model, DecodeState& state, int token);

// Appends tokens to a stream whose generation stopped (possibly mid-cycle):
// first refills the pending slots, then runs the new tokens through every
// range like a prefill chunk. The returned logits start a fresh cycle.
std::vector<float> extend_context(const Model<float>& model, DecodeState& state, std::span<const int> tokens,
                                  const PrefillOptions& options = {});

struct GenerateOptions {
  std::optional<int> stop_token;
  bool record_logits = false;
  PrefillOptions prefill;
};

struct GenerationReport {
  std::vector<int> context;
  std::vector<int> tokens;
  InvocationTrace trace{};
  std::vector<PassRecord> passes{};
  std::vector<std::vector<float>> logits;  // one row per generated token, when recorded
  int tau_infer = 1;
  int tau_train = 1;
  MaskVariant variant = MaskVariant::EmbeddingBase;
  bool truncated = false;  // stopped at max_seq_len before max_new_tokens
  bool stopped = false;    // emitted the stop token
  // counts[range][state] over the final cache.
  std::size_t occupancy[3][3] = {};
};

// Prefill, then {boundary pass, tau_infer - 1 light passes} until
// max_new_tokens tokens exist, the stop token appears, or the sequence would
// exceed max_seq_len (reported through `truncated`).
GenerationReport generate(const Model<float>& model, std::span<const int> context, int max_new_tokens,
                          const CyclePlan& plan, const SamplerConfig& sampler,
                          const GenerateOptions& options = {});

// Reference decoder: token-by-token full passes with the full-path input at
// every position. Equals generate() at tau_infer == 1.
std::vector<int> generate_plain(const Model<float>& model, std::span<const int> context, int max_new_tokens,
                                const CyclePlan& plan, const SamplerConfig& sampler);

// Structured transcript: tokens, pass schedule, trace and occupancy summary.
std::string transcript_json(const GenerationReport& report, const LayerPartition& partition);

}  // namespace dmtd
