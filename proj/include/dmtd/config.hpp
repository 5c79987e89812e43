#pragma once

// Run configuration: an INI document with [model], [train], [cycle],
// [sampler] and [paths] sections. Unknown sections or keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include "dmtd/infer.hpp"
#include "dmtd/model.hpp"
#include "dmtd/train.hpp"

namespace dmtd {

struct RunPaths {
  std::vector<std::filesystem::path> corpus;
  std::filesystem::path checkpoint;
  std::filesystem::path report_dir;
  std::filesystem::path log;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  CyclePlan cycle;
  bool masked_prefill = true;
  SamplerConfig sampler;
  RunPaths paths;

  // Every nested invariant, plus cross-checks (vocab, seq_len vs max_seq_len).
  void validate() const;
};

// Parses INI text. Relative paths resolve against `base_dir`. Throws
// ConfigError naming the offending key.
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& file);

// Canonical INI text; parse_run_config(to_ini(c)) reproduces c.
std::string to_ini(const RunConfig& config);

}  // namespace dmtd
