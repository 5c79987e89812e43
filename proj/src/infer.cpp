#include "dmtd/infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dmtd/errors.hpp"

namespace dmtd {

void SamplerConfig::validate() const {
  if (mode == SamplerMode::Temperature && !(temperature > 0.0)) {
    throw ConfigError("temperature must be positive");
  }
}

int sample_token(std::span<const float> logits, const SamplerConfig& config, std::mt19937_64& rng) {
  if (logits.empty()) throw DimensionError("sample: empty logits");
  for (float v : logits) {
    if (!std::isfinite(v)) throw NumericError("sample: non-finite logits");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  if (config.mode == SamplerMode::Greedy) return static_cast<int>(best);

  config.validate();
  std::vector<double> probs(logits.size());
  const double mx = logits[best];
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp((static_cast<double>(logits[i]) - mx) / config.temperature);
    total += probs[i];
  }
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(best);
}

const char* pass_kind_name(PassKind kind) {
  switch (kind) {
    case PassKind::Prefill: return "prefill";
    case PassKind::Light: return "light";
    case PassKind::Boundary: return "boundary";
    case PassKind::Extend: return "extend";
  }
  return "unknown";
}

void DecodeState::check_invariants(const LayerPartition& partition) const {
  if (pending_refill.size() != static_cast<std::size_t>(cycle_phase)) {
    throw ContractError("decode state: pending tokens do not match the cycle phase");
  }
  if (stored_base.size() != pending_refill.size()) throw ContractError("decode state: stored base states missing");
  const int first_pending = next_position - static_cast<int>(pending_refill.size());
  const LayerRange all = partition.all();
  for (int l = all.begin; l < all.end; ++l) {
    for (int p = 0; p < first_pending; ++p) {
      if (cache.state(l, p) != SlotState::Filled) {
        throw ContractError("decode state: slot (" + std::to_string(l) + ", " + std::to_string(p) +
                            ") should be Filled");
      }
    }
  }
  for (const auto& pending : pending_refill) {
    for (int l = all.begin; l < all.end; ++l) {
      const RangeId owner = partition.owner(l);
      SlotState expected = SlotState::Filled;
      if (owner == RangeId::Thinking) expected = SlotState::PendingRefill;
      if (owner == RangeId::Encoding && variant == MaskVariant::EmbeddingBase) expected = SlotState::PendingRefill;
      if (cache.state(l, pending.position) != expected) {
        throw ContractError("decode state: pending slot (" + std::to_string(l) + ", " +
                            std::to_string(pending.position) + ") is " +
                            slot_state_name(cache.state(l, pending.position)));
      }
    }
  }
}

namespace {

std::vector<int> iota_positions(int begin, int count) {
  std::vector<int> out(static_cast<std::size_t>(count));
  std::iota(out.begin(), out.end(), begin);
  return out;
}

std::int64_t next_pass_index(const DecodeState& state) {
  return state.passes.empty() ? 0 : state.passes.back().index + 1;
}

void record_range(DecodeState& state, const LayerPartition& part, std::int64_t pass, RangeId range,
                  std::vector<int> positions) {
  if (!part.get(range).empty()) state.trace.record(pass, range, std::move(positions));
}

std::vector<float> logits_row(const Model<float>& model, const Tensor& state) {
  auto logits = model.lm_head(state);
  return {logits.data().begin(), logits.data().end()};
}

std::vector<float> last_row_logits(const Model<float>& model, const Tensor& states) {
  const std::size_t rows = states.rows();
  return logits_row(model, slice_rows(states, rows - 1, rows));
}

// Runs `tokens` at consecutive positions starting at state.next_position
// through every range, writing all KV slots. Decoding inputs follow the
// cyclical mask anchored at the final token (or all full-path when unmasked).
std::vector<float> full_chunk(const Model<float>& model, DecodeState& state, std::span<const int> tokens,
                              const PrefillOptions& options, PassKind kind) {
  const auto& part = model.partition();
  const int n = static_cast<int>(tokens.size());
  const int start = state.next_position;
  if (start + n > model.config().max_seq_len) {
    throw ConfigError("context of " + std::to_string(start + n) + " tokens exceeds max_seq_len " +
                      std::to_string(model.config().max_seq_len));
  }
  const auto positions = iota_positions(start, n);
  const std::int64_t pass = next_pass_index(state);

  auto h_emb = model.embed(tokens);
  auto h_enc = model.forward_range(h_emb, part.encoding, positions, &state.cache, true);
  auto h_think = model.forward_range(h_enc, part.thinking, positions, &state.cache, true);
  const Tensor& base = state.variant == MaskVariant::EmbeddingBase ? h_emb : h_enc;

  std::vector<float> factors(static_cast<std::size_t>(n), 1.0f);
  if (options.masked_context) {
    const int tau = state.tau_infer;
    for (int i = 0; i < n; ++i) factors[static_cast<std::size_t>(i)] = ((n - 1 - i) % tau == 0) ? 1.0f : 0.0f;
  }
  auto h_masked = add(base, mul_rows<float>(h_think, factors));
  auto out = model.forward_range(h_masked, part.decoding, positions, &state.cache, true);

  record_range(state, part, pass, RangeId::Encoding, positions);
  record_range(state, part, pass, RangeId::Thinking, positions);
  record_range(state, part, pass, RangeId::Decoding, positions);
  state.passes.push_back({pass, kind, {}, start + n - 1});
  state.next_position = start + n;
  state.cycle_phase = 0;
  return last_row_logits(model, out);
}

Tensor row_tensor(const std::vector<float>& row) {
  return Tensor::from_data({1, row.size()}, row);
}

}  // namespace

PrefillResult prefill(const Model<float>& model, std::span<const int> context, const CyclePlan& plan,
                      const PrefillOptions& options) {
  plan.validate(&model.config());
  if (context.empty()) throw ConfigError("prefill: empty context");
  NoGradGuard no_grad;
  PrefillResult result{DecodeState{.cache = model.make_cache()}, {}};
  result.state.tau_infer = plan.tau_infer;
  result.state.variant = plan.variant;
  result.logits = full_chunk(model, result.state, context, options, PassKind::Prefill);
  return result;
}

std::vector<float> light_pass(const Model<float>& model, DecodeState& state, int token) {
  if (state.next_is_boundary()) throw ContractError("light pass requested at a cycle boundary");
  NoGradGuard no_grad;
  const auto& part = model.partition();
  const int p = state.next_position;
  const std::vector<int> position{p};
  const std::int64_t pass = next_pass_index(state);

  Tensor base = model.embed(std::span<const int>(&token, 1));
  if (state.variant == MaskVariant::EncodingBase) {
    base = model.forward_range(base, part.encoding, position, &state.cache, true);
    record_range(state, part, pass, RangeId::Encoding, position);
  } else {
    for (int l = part.encoding.begin; l < part.encoding.end; ++l) state.cache.set_state(l, p, SlotState::PendingRefill);
  }
  for (int l = part.thinking.begin; l < part.thinking.end; ++l) state.cache.set_state(l, p, SlotState::PendingRefill);

  auto out = model.forward_range(base, part.decoding, position, &state.cache, true);
  record_range(state, part, pass, RangeId::Decoding, position);

  state.pending_refill.push_back({p, token});
  state.stored_base.emplace_back(base.data().begin(), base.data().end());
  state.passes.push_back({pass, PassKind::Light, {}, p});
  ++state.cycle_phase;
  ++state.next_position;
  return logits_row(model, out);
}

std::vector<float> cycle_boundary_pass(const Model<float>& model, DecodeState& state, int token) {
  if (!state.next_is_boundary()) throw ContractError("boundary pass requested mid-cycle");
  NoGradGuard no_grad;
  const auto& part = model.partition();
  const int p = state.next_position;
  const std::int64_t pass = next_pass_index(state);

  std::vector<int> batch_positions;
  for (const auto& pending : state.pending_refill) batch_positions.push_back(pending.position);
  batch_positions.push_back(p);
  for (std::size_t i = 1; i < batch_positions.size(); ++i) {
    if (batch_positions[i] != batch_positions[i - 1] + 1) {
      throw ContractError("refill batch positions are not consecutive and ordered");
    }
  }
  const std::vector<int> position{p};

  std::vector<Tensor> stored;
  for (const auto& row : state.stored_base) stored.push_back(row_tensor(row));
  Tensor emb = model.embed(std::span<const int>(&token, 1));
  Tensor base, h_enc_all;
  if (state.variant == MaskVariant::EmbeddingBase) {
    base = emb;
    stored.push_back(emb);
    h_enc_all = model.forward_range(concat_rows(stored), part.encoding, batch_positions, &state.cache, true);
    record_range(state, part, pass, RangeId::Encoding, batch_positions);
  } else {
    // Encoding KV of the pending tokens was written by their light passes.
    base = model.forward_range(emb, part.encoding, position, &state.cache, true);
    record_range(state, part, pass, RangeId::Encoding, position);
    stored.push_back(base);
    h_enc_all = concat_rows(stored);
  }
  auto h_think_all = model.forward_range(h_enc_all, part.thinking, batch_positions, &state.cache, true);
  record_range(state, part, pass, RangeId::Thinking, batch_positions);

  const std::size_t rows = h_think_all.rows();
  auto h_masked = add(base, slice_rows(h_think_all, rows - 1, rows));
  auto out = model.forward_range(h_masked, part.decoding, position, &state.cache, true);
  record_range(state, part, pass, RangeId::Decoding, position);

  state.passes.push_back({pass, PassKind::Boundary, batch_positions, p});
  state.pending_refill.clear();
  state.stored_base.clear();
  state.cycle_phase = 0;
  ++state.next_position;
  return logits_row(model, out);
}

std::vector<float> decode_step(const Model<float>& model, DecodeState& state, int token) {
  return state.next_is_boundary() ? cycle_boundary_pass(model, state, token) : light_pass(model, state, token);
}

std::vector<float> extend_context(const Model<float>& model, DecodeState& state, std::span<const int> tokens,
                                  const PrefillOptions& options) {
  if (tokens.empty()) throw ConfigError("extend_context: no tokens");
  NoGradGuard no_grad;
  const auto& part = model.partition();
  if (!state.pending_refill.empty()) {
    // Refill-only pass: deferred layers for the pending tokens, nothing else.
    std::vector<int> positions;
    std::vector<Tensor> stored;
    for (std::size_t i = 0; i < state.pending_refill.size(); ++i) {
      positions.push_back(state.pending_refill[i].position);
      stored.push_back(row_tensor(state.stored_base[i]));
    }
    const std::int64_t pass = next_pass_index(state);
    Tensor h = concat_rows(stored);
    if (state.variant == MaskVariant::EmbeddingBase) {
      h = model.forward_range(h, part.encoding, positions, &state.cache, true);
      record_range(state, part, pass, RangeId::Encoding, positions);
    }
    model.forward_range(h, part.thinking, positions, &state.cache, true);
    record_range(state, part, pass, RangeId::Thinking, positions);
    state.passes.push_back({pass, PassKind::Extend, positions, positions.back()});
    state.pending_refill.clear();
    state.stored_base.clear();
  }
  return full_chunk(model, state, tokens, options, PassKind::Extend);
}

GenerationReport generate(const Model<float>& model, std::span<const int> context, int max_new_tokens,
                          const CyclePlan& plan, const SamplerConfig& sampler, const GenerateOptions& options) {
  sampler.validate();
  if (max_new_tokens < 0) throw ConfigError("max_new_tokens must be non-negative");
  GenerationReport report;
  report.context.assign(context.begin(), context.end());
  report.tau_infer = plan.tau_infer;
  report.tau_train = plan.tau_train;
  report.variant = plan.variant;

  std::mt19937_64 rng(sampler.seed);
  if (max_new_tokens > 0) {
    auto pre = prefill(model, context, plan, options.prefill);
    DecodeState& state = pre.state;
    std::vector<float> logits = std::move(pre.logits);
    while (true) {
      const int token = sample_token(logits, sampler, rng);
      report.tokens.push_back(token);
      if (options.record_logits) report.logits.push_back(logits);
      if (options.stop_token && token == *options.stop_token) {
        report.stopped = true;
        break;
      }
      if (static_cast<int>(report.tokens.size()) >= max_new_tokens) break;
      if (state.next_position >= model.config().max_seq_len) {
        report.truncated = true;
        break;
      }
      logits = decode_step(model, state, token);
    }
    report.trace = state.trace;
    report.passes = state.passes;
    const LayerPartition& part = model.partition();
    for (int r = 0; r < 3; ++r) {
      for (int s = 0; s < 3; ++s) {
        report.occupancy[r][s] = state.cache.count(static_cast<SlotState>(s), part.get(static_cast<RangeId>(r)));
      }
    }
  }
  return report;
}

std::vector<int> generate_plain(const Model<float>& model, std::span<const int> context, int max_new_tokens,
                                const CyclePlan& plan, const SamplerConfig& sampler) {
  plan.validate(&model.config());
  NoGradGuard no_grad;
  const auto& part = model.partition();
  auto cache = model.make_cache();
  std::mt19937_64 rng(sampler.seed);
  std::vector<int> out;
  std::vector<int> feed(context.begin(), context.end());
  int start = 0;
  while (static_cast<int>(out.size()) < max_new_tokens) {
    const auto positions = iota_positions(start, static_cast<int>(feed.size()));
    if (positions.back() >= model.config().max_seq_len) break;
    auto h_emb = model.embed(feed);
    auto h_enc = model.forward_range(h_emb, part.encoding, positions, &cache, true);
    auto h_think = model.forward_range(h_enc, part.thinking, positions, &cache, true);
    auto h = add(plan.variant == MaskVariant::EmbeddingBase ? h_emb : h_enc, h_think);
    auto logits = last_row_logits(model, model.forward_range(h, part.decoding, positions, &cache, true));
    const int token = sample_token(logits, sampler, rng);
    out.push_back(token);
    start = positions.back() + 1;
    feed = {token};
  }
  return out;
}

std::string transcript_json(const GenerationReport& report, const LayerPartition& partition) {
  using nlohmann::json;
  json j;
  j["schema"] = "dmtd.transcript";
  j["schema_version"] = 1;
  j["tau_infer"] = report.tau_infer;
  j["tau_train"] = report.tau_train;
  j["variant"] = variant_name(report.variant);
  j["context_length"] = report.context.size();
  j["context"] = report.context;
  j["tokens"] = report.tokens;
  j["truncated"] = report.truncated;
  j["stopped"] = report.stopped;
  j["partition"] = {{"encoding", {partition.encoding.begin, partition.encoding.end}},
                    {"thinking", {partition.thinking.begin, partition.thinking.end}},
                    {"decoding", {partition.decoding.begin, partition.decoding.end}}};
  json passes = json::array();
  for (const auto& p : report.passes) {
    json entry = {{"index", p.index}, {"kind", pass_kind_name(p.kind)}, {"position", p.position}};
    if (!p.refill_positions.empty()) entry["refill_positions"] = p.refill_positions;
    json ranges = json::array();
    for (const auto& e : report.trace.entries()) {
      if (e.pass_index == p.index) ranges.push_back({{"range", range_name(e.range)}, {"positions", e.positions}});
    }
    entry["ranges"] = ranges;
    passes.push_back(entry);
  }
  j["passes"] = passes;
  json occupancy;
  for (int r = 0; r < 3; ++r) {
    occupancy[range_name(static_cast<RangeId>(r))] = {
        {"Empty", report.occupancy[r][0]}, {"Filled", report.occupancy[r][1]}, {"PendingRefill", report.occupancy[r][2]}};
  }
  j["occupancy"] = occupancy;
  j["layer_invocations"] = report.trace.layer_invocations(partition);
  return j.dump(2);
}

}  // namespace dmtd
