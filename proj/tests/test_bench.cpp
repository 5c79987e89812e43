#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dmtd/bench.hpp"
#include "dmtd/errors.hpp"
#include "support.hpp"

using namespace dmtd;
using namespace dmtd::testing;

namespace {

CyclePlan plan_for(int tau, MaskVariant variant = MaskVariant::EmbeddingBase) {
  CyclePlan p;
  p.tau_train = tau;
  p.tau_infer = tau;
  p.variant = variant;
  return p;
}

// Hand-built trace: one full pass per cycle start, reused layers otherwise.
InvocationTrace schedule_trace(int tokens, int tau) {
  InvocationTrace t;
  for (int k = 0; k < tokens; ++k) {
    if (k % tau == 0) {
      t.record(k, RangeId::Encoding, {k});
      t.record(k, RangeId::Thinking, {k});
    }
    t.record(k, RangeId::Decoding, {k});
  }
  return t;
}

}  // namespace

TEST_CASE("theoretical PLT examples") {
  CHECK(plt_theoretical(36, 8, 3) == Rational(52, 108));
  CHECK(std::abs(to_double(plt_theoretical(36, 8, 3)) - 0.481) < 5e-4);
  CHECK(plt_theoretical(36, 8, 4) == Rational(60, 144));
  CHECK(std::abs(to_double(plt_theoretical(36, 8, 4)) - 0.4167) < 5e-5);
  const auto inverse = Rational(1) / plt_theoretical(36, 8, 3);
  CHECK(inverse == Rational(108, 52));
  CHECK(std::abs(to_double(inverse) - 2.08) < 5e-3);
  for (int L = 1; L <= 12; ++L)
    for (int d = 1; d <= L; ++d) CHECK(plt_theoretical(L, d, 1) == Rational(1));
  CHECK_THROWS_AS(plt_theoretical(8, 0, 2), ConfigError);
  CHECK_THROWS_AS(plt_theoretical(8, 9, 2), ConfigError);
  CHECK_THROWS_AS(plt_theoretical(8, 2, 0), ConfigError);
}

TEST_CASE("hand count of the six-token schedule") {
  LayerPartition part{{0, 0}, {0, 6}, {6, 8}};
  auto r = measure_plt(schedule_trace(6, 3), part, MaskVariant::EmbeddingBase, 3, 6);
  CHECK(r.layer_invocations == 24);
  CHECK(r.measured == Rational(1, 2));
  CHECK(r.theoretical == Rational(1, 2));
  CHECK(r.match);

  auto seven = measure_plt(schedule_trace(7, 3), part, MaskVariant::EmbeddingBase, 3, 7);
  CHECK(!seven.full_cycles);
  CHECK(!seven.match);
  CHECK(seven.measured != seven.theoretical);
  const Rational deviation = (seven.measured - seven.theoretical) * Rational(7 * 8);
  CHECK(deviation > Rational(0));
  CHECK(deviation < Rational(6));

  auto one = measure_plt(schedule_trace(5, 1), part, MaskVariant::EmbeddingBase, 1, 5);
  CHECK(one.measured == Rational(1));
  CHECK_THROWS_AS(measure_plt(InvocationTrace{}, part, MaskVariant::EmbeddingBase, 1, 5), ConfigError);
}

TEST_CASE("generated traces reproduce the exact PLT on full cycles") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const int enc = static_cast<int>(rng() % 3), think = 1 + static_cast<int>(rng() % 3),
              dec = 1 + static_cast<int>(rng() % 3);
    const int tau = 1 + static_cast<int>(rng() % 5);
    const int cycles = 1 + static_cast<int>(rng() % 4);
    const auto variant = enc > 0 && rng() % 2 ? MaskVariant::EncodingBase : MaskVariant::EmbeddingBase;
    CAPTURE(trial);
    Model<float> m(tiny_config(enc, think, dec, 8, 2));
    auto r = generate(m, random_tokens(1 + rng() % 8, 257, rng), tau * cycles, plan_for(tau, variant), {});
    auto plt = measure_plt(r.trace, m.partition(), variant, tau, tau * cycles);
    CHECK(plt.match);
    CHECK(plt.measured == plt_theoretical(enc + think + dec, reused_layer_count(m.partition(), variant), tau));
  }
}

TEST_CASE("a 36-layer partition with 8 reused layers hits 52/108") {
  // 36 layers with 8 reused, traced without running the network.
  LayerPartition part{{0, 0}, {0, 28}, {28, 36}};
  for (int cycles = 1; cycles <= 5; ++cycles) {
    auto r = measure_plt(schedule_trace(3 * cycles, 3), part, MaskVariant::EmbeddingBase, 3, 3 * cycles);
    CHECK(r.measured == Rational(52, 108));
    CHECK(r.match);
  }
  const auto vanilla = schedule_trace(12, 1).layer_invocations(part);
  const auto mtd3 = schedule_trace(12, 3).layer_invocations(part);
  CHECK(Rational(vanilla, mtd3) == Rational(108, 52));
}

TEST_CASE("throughput bench counts are linear and sampler independent") {
  Model<float> m(tiny_config(1, 2, 1, 8, 2));
  ThroughputOptions opt;
  opt.taus = {1, 2, 3};
  opt.batch_sizes = {1, 2};
  opt.context_length = 4;
  opt.gen_length = 12;
  auto rows = throughput_bench(m, opt);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].tau == 1);
  for (const auto& r : rows) {
    CHECK(r.plt.match);
    CHECK(r.batch_layer_invocations == r.stream_layer_invocations);
  }
  CHECK(rows[0].stream_layer_invocations == 12 * 4);

  opt.gen_length = 24;
  auto doubled = throughput_bench(m, opt);
  for (std::size_t i = 0; i < rows.size(); ++i)
    CHECK(doubled[i].stream_layer_invocations == 2 * rows[i].stream_layer_invocations);

  opt.seed = 99;
  auto reseeded = throughput_bench(m, opt);
  for (std::size_t i = 0; i < rows.size(); ++i)
    CHECK(reseeded[i].stream_layer_invocations == doubled[i].stream_layer_invocations);

  opt.context_length = 90;
  CHECK_THROWS_AS(throughput_bench(m, opt), ConfigError);
}

TEST_CASE("report schemas") {
  Model<float> m(tiny_config(0, 2, 1, 8, 2));
  ThroughputOptions opt;
  opt.taus = {1, 3};
  opt.context_length = 3;
  opt.gen_length = 6;
  auto rows = throughput_bench(m, opt);
  std::istringstream tsv(throughput_table_tsv(rows));
  std::string line;
  std::getline(tsv, line);
  CHECK(line == "# schema_version=1");
  std::getline(tsv, line);
  CHECK(line.rfind("tau\tbatch\t", 0) == 0);
  int data_lines = 0;
  while (std::getline(tsv, line)) {
    ++data_lines;
    CHECK(std::count(line.begin(), line.end(), '\t') == 12);
    CHECK(line.ends_with("\ttrue"));
  }
  CHECK(data_lines == 2);

  auto j = nlohmann::json::parse(throughput_summary_json(rows, m.config()));
  CHECK(j["schema"] == "dmtd.bench");
  CHECK(j["schema_version"] == kReportSchemaVersion);
  CHECK(j["rows"].size() == 2);
  CHECK(j["rows"][1]["plt_theoretical"] == nlohmann::json::array({5, 9}));
}

TEST_CASE("scaling fit examples") {
  std::vector<std::pair<double, double>> line;
  for (double t : {1e3, 1e4, 3e4, 1e5, 1e6, 7e6}) line.emplace_back(t, 2.0 - 0.178 * std::log10(t));
  auto fit = fit_scaling_law(line);
  CHECK(std::abs(fit.slope + 0.178) < 1e-9);
  CHECK(std::abs(fit.intercept - 2.0) < 1e-9);
  CHECK(std::abs(fit.r_squared - 1.0) < 1e-9);

  auto two = fit_scaling_law({{10.0, 3.0}, {1000.0, 2.0}});
  CHECK(two.r_squared == 1.0);
  CHECK(two.slope == doctest::Approx(-0.5));

  auto flat = fit_scaling_law({{10.0, 3.0}, {100.0, 3.0}, {1000.0, 3.0}});
  CHECK(flat.slope == 0.0);
  CHECK(flat.r_squared == 1.0);

  auto noisy = fit_scaling_law({{10.0, 3.0}, {100.0, 2.5}, {1000.0, 2.7}, {1e4, 2.0}});
  CHECK(noisy.slope < 0.0);
  CHECK(noisy.r_squared > 0.0);
  CHECK(noisy.r_squared < 1.0);

  CHECK_THROWS_AS(fit_scaling_law({{10.0, 3.0}}), ConfigError);
  CHECK_THROWS_AS(fit_scaling_law({{10.0, 3.0}, {10.0, 2.0}}), ConfigError);
  CHECK_THROWS_AS(fit_scaling_law({{0.0, 3.0}, {10.0, 2.0}}), ConfigError);
}

TEST_CASE("affine lines are recovered exactly") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const double a = u(rng) + 3.0, b = u(rng);
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < 8; ++i) {
      const double t = std::pow(10.0, 2.0 + u(rng) + 2.0);
      pts.emplace_back(t, a + b * std::log10(t));
    }
    auto fit = fit_scaling_law(pts);
    CHECK(std::abs(fit.slope - b) < 1e-9);
    CHECK(std::abs(fit.intercept - a) < 1e-9);
    CHECK(std::abs(fit.r_squared - 1.0) < 1e-9);
  }
}

TEST_CASE("trace rejects out-of-order entries") {
  InvocationTrace t;
  t.record(1, RangeId::Decoding, {3});
  CHECK_THROWS_AS(t.record(0, RangeId::Decoding, {4}), ContractError);
  CHECK_THROWS_AS(t.record(2, RangeId::Decoding, {5, 5}), ContractError);
  CHECK(t.pass_count() == 1);
}
