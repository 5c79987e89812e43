#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dmtd/errors.hpp"
#include "dmtd/train.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace dmtd;
using namespace dmtd::testing;

namespace {

CyclePlan plan_for(int tau, MaskVariant variant = MaskVariant::EmbeddingBase, int anchor = 0) {
  CyclePlan p;
  p.tau_train = tau;
  p.tau_infer = tau;
  p.variant = variant;
  p.mask_anchor = anchor;
  return p;
}

std::vector<std::uint8_t> bits(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("cycle mask examples") {
  CHECK(build_cycle_mask(9, 3, 0).bits == bits({1, 0, 0, 1, 0, 0, 1, 0, 0}));
  CHECK(build_cycle_mask(4, 1, 0).bits == bits({1, 1, 1, 1}));
  CHECK(build_cycle_mask(5, 4, 2).bits == bits({0, 0, 1, 0, 0}));
  CHECK_THROWS_AS(build_cycle_mask(4, 0, 0), ConfigError);
  CHECK_THROWS_AS(build_cycle_mask(4, 3, 3), ConfigError);
  for (int n = 1; n <= 64; ++n)
    for (int tau = 1; tau <= 8; ++tau)
      CHECK(build_cycle_mask(n, tau, 0).ones() == static_cast<std::size_t>((n + tau - 1) / tau));
}

TEST_CASE("cycle plan validation") {
  CHECK_THROWS_AS(plan_for(0).validate(), ConfigError);
  auto enc = plan_for(2, MaskVariant::EncodingBase);
  auto no_enc = tiny_config(0, 2, 1);
  CHECK_THROWS_AS(enc.validate(&no_enc), ConfigError);
  CHECK(parse_variant("encoding") == MaskVariant::EncodingBase);
  CHECK_THROWS_AS(parse_variant("hybrid"), ConfigError);
}

TEST_CASE("masked forward equals the per-position routing oracle") {
  for (auto variant : {MaskVariant::EmbeddingBase, MaskVariant::EncodingBase}) {
    for (int tau = 1; tau <= 4; ++tau) {
      CAPTURE(tau);
      auto c = tiny_config(2, 2, 2);
      Model<double> m(c);
      randomize(m, 100 + static_cast<std::uint64_t>(tau));
      std::mt19937_64 rng(static_cast<std::uint64_t>(tau));
      const int n = 6;
      auto tokens = random_tokens(2 * n, c.vocab_size, rng);
      for (int anchor = 0; anchor < tau; ++anchor) {
        auto logits = to_rows(masked_forward(m, tokens, n, plan_for(tau, variant, anchor)));
        for (int b = 0; b < 2; ++b) {
          std::span<const int> seq(tokens.data() + b * n, n);
          auto want = routing_oracle_logits(m, seq, tau, anchor, variant == MaskVariant::EncodingBase);
          Rows got(logits.begin() + b * n, logits.begin() + (b + 1) * n);
          CHECK(max_abs_diff(got, want) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("tau 1 and zeroed thinking output") {
  auto c = tiny_config(0, 2, 2);
  Model<double> m(c);
  randomize(m, 11);
  std::vector<int> t{4, 8, 15, 16, 23, 42};
  auto parts = masked_forward_parts(m, t, 6, plan_for(1));
  const auto emb = to_rows(parts.h_emb), think = to_rows(parts.h_think), masked = to_rows(parts.h_masked);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c2 = 0; c2 < emb[i].size(); ++c2) CHECK(masked[i][c2] == emb[i][c2] + think[i][c2]);

  // With no thinking contribution the mask is irrelevant.
  auto zero = Tensor64::zeros(parts.h_think.shape());
  auto a = to_rows(decode_masked(m, parts.h_emb, zero, 6, 3, 0).logits);
  auto b = to_rows(decode_masked(m, parts.h_emb, zero, 6, 1, 0).logits);
  CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("next-token targets skip the last position of each sequence") {
  std::vector<int> t{1, 2, 3, 4, 5, 6};
  auto tg = next_token_targets(t, 3);
  CHECK(tg.targets == std::vector<int>{2, 3, 0, 5, 6, 0});
  CHECK(tg.ignore == bits({0, 0, 1, 0, 0, 1}));
}

TEST_CASE("offset losses partition the total loss") {
  auto c = tiny_config(1, 1, 1);
  Model<float> m(c);
  randomize(m, 12);
  std::mt19937_64 rng(12);
  for (int tau : {1, 2, 3, 5}) {
    auto t = random_tokens(3 * 20, c.vocab_size, rng);
    auto plan = plan_for(tau, MaskVariant::EmbeddingBase, tau - 1);
    auto r = evaluate_batch(m, t, 20, plan);
    double weighted = 0.0;
    std::size_t total = 0;
    for (std::size_t k = 0; k < r.offsets.loss.size(); ++k) {
      weighted += r.offsets.loss[k] * static_cast<double>(r.offsets.count[k]);
      total += r.offsets.count[k];
    }
    CHECK(total == 3 * 19);
    CHECK(weighted / static_cast<double>(total) == doctest::Approx(r.loss).epsilon(1e-6));
    if (tau == 1) CHECK(r.offsets.loss[0] == doctest::Approx(r.loss).epsilon(1e-6));
  }
}

TEST_CASE("untrained loss is near uniform and matches the training step") {
  auto c = tiny_config(1, 1, 1);
  Model<float> m(c);
  std::mt19937_64 rng(13);
  auto t = random_tokens(4 * 32, 256, rng);
  auto plan = plan_for(2);
  auto eval = evaluate_batch(m, t, 32, plan);
  CHECK(std::abs(eval.loss - std::log(256.0)) < 0.2);
  TrainConfig tc;
  AdamW<float> opt(m.parameters(), tc.optimizer_config());
  auto step = training_step(m, opt, t, 32, plan);
  CHECK(step.loss == eval.loss);
}

TEST_CASE("training loss passes finite differences through the whole model") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [name, err] : model_loss_gradient_errors(seed)) {
      CAPTURE(seed);
      CAPTURE(name);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("masked-out thinking rows contribute no gradient") {
  auto c = tiny_config(0, 1, 1, 8, 2, 17);
  Model<double> m(c);
  randomize(m, 21);
  for (auto& p : m.named_parameters()) p.tensor.set_requires_grad(true);
  std::vector<int> t{1, 5, 9, 2, 16, 3, 7};
  const int n = 7, tau = 3;
  auto tg = next_token_targets(t, n);

  auto grads = [&](bool detach_masked_out) {
    for (auto& p : m.named_parameters()) p.tensor.clear_grad();
    std::vector<int> pos{0, 1, 2, 3, 4, 5, 6};
    auto h_emb = m.embed(t);
    auto h_think = m.forward_range(h_emb, m.partition().thinking, pos);
    if (detach_masked_out) {
      std::vector<Tensor64> rows;
      for (int i = 0; i < n; ++i) {
        auto r = slice_rows(h_think, static_cast<std::size_t>(i), static_cast<std::size_t>(i + 1));
        rows.push_back(i % tau == 0 ? r : r.detach());
      }
      h_think = concat_rows(rows);
    }
    auto logits = decode_masked(m, h_emb, h_think, n, tau, 0).logits;
    cross_entropy(logits, tg.targets, tg.ignore).backward();
    std::vector<double> out;
    for (auto& p : m.named_parameters()) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    return out;
  };
  const auto a = grads(false), b = grads(true);
  REQUIRE(a.size() == b.size());
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    norm = std::max(norm, std::abs(a[i]));
  }
  CHECK(norm > 0.0);
  CHECK(diff < 1e-14);
}

TEST_CASE("memorizing one repeated sequence drives the loss down") {
  auto c = tiny_config(1, 1, 1, 32, 2);
  Model<float> m(c);
  std::string text = "Direct multi-token decoding reuses the late layers of the model.";
  text.resize(64, '.');
  std::vector<int> seq(text.begin(), text.end());
  std::vector<int> batch;
  for (int i = 0; i < 4; ++i) batch.insert(batch.end(), seq.begin(), seq.end());
  TrainConfig tc;
  tc.lr = 1e-2;
  tc.steps = 200;
  tc.weight_decay = 0.0;
  tc.warmup_ratio = 0.0;
  tc.schedule = LrSchedule::Constant;
  AdamW<float> opt(m.parameters(), tc.optimizer_config());
  const auto plan = plan_for(2);
  double loss = 0.0;
  for (int s = 0; s < 200; ++s) loss = training_step(m, opt, batch, 64, plan).loss;
  CHECK(loss < 0.1);
  std::vector<std::vector<int>> train{seq};
  std::mt19937_64 rng(5);
  std::vector<std::vector<int>> held{random_tokens(64, 256, rng)};
  CHECK(evaluate(m, train, plan) <= evaluate(m, held, plan));
  CHECK(evaluate(m, train, plan) == evaluate(m, train, plan));
  CHECK_THROWS_AS(evaluate(m, std::vector<std::vector<int>>{}, plan), ConfigError);
}

TEST_CASE("batch sampler depends only on seed and step") {
  BatchSampler a(10, 4, 7), b(10, 4, 7);
  std::vector<std::vector<std::size_t>> seen;
  for (int s = 0; s < 5; ++s) seen.push_back(a.batch(s));
  for (int s = 4; s >= 0; --s) CHECK(b.batch(s) == seen[static_cast<std::size_t>(s)]);
  // the first epoch (steps 0-1 plus half of step 2) is a permutation
  std::vector<std::size_t> epoch0;
  for (int s = 0; s < 3; ++s)
    for (auto i : seen[static_cast<std::size_t>(s)]) epoch0.push_back(i);
  epoch0.resize(10);
  std::sort(epoch0.begin(), epoch0.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(epoch0[i] == i);
}

TEST_CASE("a resumed trainer reproduces the unbroken run") {
  auto c = tiny_config(1, 1, 1, 16, 2);
  std::mt19937_64 rng(3);
  std::vector<std::vector<int>> train, eval;
  for (int i = 0; i < 12; ++i) train.push_back(random_tokens(16, 256, rng));
  for (int i = 0; i < 3; ++i) eval.push_back(random_tokens(16, 256, rng));
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seq_len = 16;
  tc.steps = 12;
  tc.log_interval = 3;
  tc.eval_max_windows = 3;
  const auto plan = plan_for(2);

  Model<float> full(c);
  std::vector<TrainRecord> unbroken;
  Trainer(full, tc, plan, train, eval).run([&](const TrainRecord& r) { unbroken.push_back(r); }, nullptr);
  REQUIRE(unbroken.size() == 5);
  CHECK(unbroken[0].step == 0);
  CHECK(unbroken.back().step == 12);
  for (std::size_t i = 1; i < unbroken.size(); ++i) CHECK(unbroken[i].tokens_seen > unbroken[i - 1].tokens_seen);

  // Snapshot weights and moments at step 6, then continue in a fresh trainer.
  auto interrupted = tc;
  interrupted.checkpoint_interval = 6;
  Model<float> first(c);
  Trainer head(first, interrupted, plan, train, eval);
  std::vector<std::vector<float>> weights, m1, v1;
  head.run(nullptr, [&](std::int64_t step) {
    if (step != 6) return;
    for (auto& p : first.named_parameters()) weights.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    for (std::size_t i = 0; i < head.optimizer().size(); ++i) {
      m1.emplace_back(head.optimizer().first_moment(i).begin(), head.optimizer().first_moment(i).end());
      v1.emplace_back(head.optimizer().second_moment(i).begin(), head.optimizer().second_moment(i).end());
    }
  });
  REQUIRE(weights.size() == first.named_parameters().size());

  Model<float> resumed(c);
  auto params = resumed.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) std::ranges::copy(weights[i], params[i].tensor.mutable_data().begin());
  Trainer tail(resumed, tc, plan, train, eval);
  for (std::size_t i = 0; i < tail.optimizer().size(); ++i) {
    std::ranges::copy(m1[i], tail.optimizer().first_moment(i).begin());
    std::ranges::copy(v1[i], tail.optimizer().second_moment(i).begin());
  }
  tail.optimizer().set_step_count(6);
  std::vector<TrainRecord> later;
  tail.run([&](const TrainRecord& r) { later.push_back(r); }, nullptr);
  REQUIRE(later.size() == 2);
  CHECK(later[0].step == 9);
  CHECK(later.back().eval_loss == unbroken.back().eval_loss);
  CHECK(later.back().train_loss == unbroken.back().train_loss);
  auto a = full.named_parameters(), b = resumed.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].name);
    CHECK(std::ranges::equal(a[i].tensor.data(), b[i].tensor.data()));
  }
}
