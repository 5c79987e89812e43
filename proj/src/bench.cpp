#include "dmtd/bench.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dmtd/errors.hpp"

namespace dmtd {

double to_double(const Rational& r) {
  return static_cast<double>(r.numerator()) / static_cast<double>(r.denominator());
}

Rational plt_theoretical(int n_layers, int reused_layers, int tau) {
  if (n_layers < 1) throw ConfigError("plt: layer count must be positive");
  if (reused_layers < 1 || reused_layers > n_layers) throw ConfigError("plt: reused layers must lie in [1, L]");
  if (tau < 1) throw ConfigError("plt: cycle length must be at least 1");
  return Rational(n_layers + static_cast<std::int64_t>(tau - 1) * reused_layers,
                  static_cast<std::int64_t>(tau) * n_layers);
}

int reused_layer_count(const LayerPartition& partition, MaskVariant variant) {
  return partition.decoding.size() + (variant == MaskVariant::EncodingBase ? partition.encoding.size() : 0);
}

PltReport measure_plt(const InvocationTrace& trace, const LayerPartition& partition, MaskVariant variant, int tau,
                      std::int64_t generated_tokens) {
  if (trace.empty()) throw ConfigError("measure_plt: empty trace");
  if (generated_tokens < 1) throw ConfigError("measure_plt: no generated tokens");
  PltReport r;
  r.n_layers = partition.all().size();
  r.n_encoding = partition.encoding.size();
  r.n_thinking = partition.thinking.size();
  r.n_decoding = partition.decoding.size();
  r.tau = tau;
  r.generated_tokens = generated_tokens;
  r.layer_invocations = trace.layer_invocations(partition);
  r.theoretical = plt_theoretical(r.n_layers, reused_layer_count(partition, variant), tau);
  r.measured = Rational(r.layer_invocations, generated_tokens * r.n_layers);
  r.full_cycles = generated_tokens % tau == 0;
  r.match = r.full_cycles && r.measured == r.theoretical;
  return r;
}

ScalingFit fit_scaling_law(const std::vector<std::pair<double, double>>& points) {
  std::set<double> distinct;
  for (const auto& [tokens, loss] : points) {
    if (!(tokens > 0.0)) throw ConfigError("fit_scaling_law: token counts must be positive");
    if (!std::isfinite(loss)) throw ConfigError("fit_scaling_law: non-finite loss");
    distinct.insert(tokens);
  }
  if (distinct.size() < 2) throw ConfigError("fit_scaling_law: need at least two distinct token counts");

  const auto n = static_cast<double>(points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [tokens, loss] : points) {
    mx += std::log10(tokens);
    my += loss;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& [tokens, loss] : points) {
    const double dx = std::log10(tokens) - mx, dy = loss - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  ScalingFit fit;
  fit.points = points;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (const auto& [tokens, loss] : points) {
    const double e = loss - (fit.intercept + fit.slope * std::log10(tokens));
    ss_res += e * e;
  }
  // Relative guard: residuals at rounding level of the data count as exact.
  const double scale = std::max(1.0, my * my) * n;
  if (syy <= 1e-24 * scale) {
    fit.r_squared = 1.0;
  } else {
    fit.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  }
  return fit;
}

std::vector<ThroughputRow> throughput_bench(const Model<float>& model, const ThroughputOptions& options) {
  const ModelConfig& cfg = model.config();
  if (options.context_length < 1 || options.gen_length < 1) throw ConfigError("bench: lengths must be positive");
  if (options.context_length + options.gen_length > cfg.max_seq_len) {
    throw ConfigError("bench: context + generation exceeds max_seq_len");
  }
  const LayerPartition& part = model.partition();
  std::vector<ThroughputRow> rows;
  for (int tau : options.taus) {
    for (int batch : options.batch_sizes) {
      if (batch < 1) throw ConfigError("bench: batch sizes must be positive");
      CyclePlan plan;
      plan.tau_train = 1;
      plan.tau_infer = tau;
      plan.variant = options.variant;
      plan.validate(&cfg);

      std::mt19937_64 rng(options.seed);
      std::vector<std::vector<int>> contexts(static_cast<std::size_t>(batch));
      for (auto& c : contexts) {
        c.resize(static_cast<std::size_t>(options.context_length));
        for (auto& t : c) t = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.vocab_size));
      }

      SamplerConfig sampler;
      std::mt19937_64 sample_rng(options.seed);
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<DecodeState> states;
      std::vector<int> last;
      for (const auto& c : contexts) {
        auto pre = prefill(model, c, plan);
        last.push_back(sample_token(pre.logits, sampler, sample_rng));
        states.push_back(std::move(pre.state));
      }
      const auto t_decode = std::chrono::steady_clock::now();
      std::int64_t lockstep_passes_invocations = 0;
      for (int g = 1; g < options.gen_length; ++g) {
        const bool boundary = states.front().next_is_boundary();
        lockstep_passes_invocations +=
            boundary ? part.all().size() : reused_layer_count(part, options.variant);
        for (std::size_t s = 0; s < states.size(); ++s) {
          auto logits = decode_step(model, states[s], last[s]);
          last[s] = sample_token(logits, sampler, sample_rng);
        }
      }
      const auto t1 = std::chrono::steady_clock::now();

      ThroughputRow row;
      row.tau = tau;
      row.batch = batch;
      row.generated_per_stream = options.gen_length;
      row.seconds = std::chrono::duration<double>(t1 - t0).count();
      const double decode_seconds = std::chrono::duration<double>(t1 - t_decode).count();
      row.tokens_per_second =
          decode_seconds > 0.0 ? static_cast<double>(batch) * (options.gen_length - 1) / decode_seconds : 0.0;
      row.plt = measure_plt(states.front().trace, part, options.variant, tau, options.gen_length);
      row.stream_layer_invocations = row.plt.layer_invocations;
      row.batch_layer_invocations = lockstep_passes_invocations + part.all().size();
      rows.push_back(row);
    }
  }
  return rows;
}

std::string throughput_table_tsv(const std::vector<ThroughputRow>& rows) {
  std::ostringstream out;
  out << "# schema_version=" << kReportSchemaVersion << "\n";
  out << "tau\tbatch\tgenerated\tseconds\ttokens_per_sec\tstream_layer_invocations\tbatch_layer_invocations"
         "\tplt_theoretical\tplt_measured\tplt_theoretical_value\tplt_measured_value\tfull_cycles\tmatch\n";
  out << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.tau << '\t' << r.batch << '\t' << r.generated_per_stream << '\t' << r.seconds << '\t'
        << r.tokens_per_second << '\t' << r.stream_layer_invocations << '\t' << r.batch_layer_invocations << '\t'
        << r.plt.theoretical << '\t' << r.plt.measured << '\t' << to_double(r.plt.theoretical) << '\t'
        << to_double(r.plt.measured) << '\t' << (r.plt.full_cycles ? "true" : "false") << '\t'
        << (r.plt.match ? "true" : "false") << '\n';
  }
  return out.str();
}

std::string throughput_summary_json(const std::vector<ThroughputRow>& rows, const ModelConfig& config) {
  using nlohmann::json;
  json j;
  j["schema"] = "dmtd.bench";
  j["schema_version"] = kReportSchemaVersion;
  j["model"] = {{"n_layers", config.n_layers},
                {"n_encoding", config.n_encoding},
                {"n_thinking", config.n_thinking},
                {"n_decoding", config.n_decoding},
                {"d_model", config.d_model}};
  j["note"] =
      "CPU runs are compute-bound; layer invocations are the authoritative cost, tokens/sec is advisory";
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"tau", r.tau},
                   {"batch", r.batch},
                   {"generated", r.generated_per_stream},
                   {"seconds", r.seconds},
                   {"tokens_per_sec", r.tokens_per_second},
                   {"stream_layer_invocations", r.stream_layer_invocations},
                   {"batch_layer_invocations", r.batch_layer_invocations},
                   {"plt_theoretical", {r.plt.theoretical.numerator(), r.plt.theoretical.denominator()}},
                   {"plt_measured", {r.plt.measured.numerator(), r.plt.measured.denominator()}},
                   {"full_cycles", r.plt.full_cycles},
                   {"match", r.plt.match}});
  }
  j["rows"] = arr;
  return j.dump(2);
}

}  // namespace dmtd
