#include <doctest.h>

#include <random>

#include "dmtd/errors.hpp"
#include "dmtd/model.hpp"
#include "support.hpp"

using namespace dmtd;
using namespace dmtd::testing;

TEST_CASE("partition arithmetic and validation") {
  auto c = tiny_config(3, 3, 2);
  const auto p = c.partition();
  CHECK(p.encoding == LayerRange{0, 3});
  CHECK(p.thinking == LayerRange{3, 6});
  CHECK(p.decoding == LayerRange{6, 8});
  CHECK(p.owner(5) == RangeId::Thinking);

  auto no_dec = tiny_config(3, 3, 0);
  CHECK_THROWS_AS(Model<float>{no_dec}, ConfigError);
  auto mismatch = tiny_config(1, 1, 1);
  mismatch.n_layers = 4;
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);
  auto odd_head = tiny_config(1, 1, 1, 6, 2);
  CHECK_THROWS_AS(odd_head.validate(), ConfigError);
}

TEST_CASE("same seed gives bit-identical weights") {
  auto c = tiny_config(1, 2, 1);
  c.seed = 42;
  Model<float> a(c), b(c);
  auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
  }
  c.seed = 43;
  Model<float> other(c);
  CHECK(other.named_parameters()[0].tensor.data()[0] != pa[0].tensor.data()[0]);
}

TEST_CASE("parameter order is fixed") {
  Model<float> m(tiny_config(1, 0, 1));
  const auto params = m.named_parameters();
  std::vector<std::string> names;
  for (const auto& p : params) names.push_back(p.name);
  const std::vector<std::string> want{
      "embedding",        "layers.0.attn_norm", "layers.0.wq",       "layers.0.wk",
      "layers.0.wv",      "layers.0.wo",        "layers.0.mlp_norm", "layers.0.w_up",
      "layers.0.w_down",  "layers.1.attn_norm", "layers.1.wq",       "layers.1.wk",
      "layers.1.wv",      "layers.1.wo",        "layers.1.mlp_norm", "layers.1.w_up",
      "layers.1.w_down",  "final_norm",         "lm_head"};
  CHECK(names == want);
}

TEST_CASE("embedding lookups") {
  Model<float> m(tiny_config(1, 1, 1));
  std::vector<int> t{0, 7, 7};
  auto rows = to_rows(m.embed(t));
  auto table = to_rows(m.named_parameters()[0].tensor);
  CHECK(rows[0] == table[0]);
  CHECK(rows[1] == rows[2]);
  std::vector<int> bad{257};
  CHECK_THROWS_AS(m.embed(bad), IndexError);
}

TEST_CASE("forward_range matches the naive transformer") {
  auto c = tiny_config(1, 2, 1);
  Model<double> m(c);
  randomize(m, 5);
  std::mt19937_64 rng(1);
  auto tokens = random_tokens(7, c.vocab_size, rng);
  std::vector<int> pos{0, 1, 2, 3, 4, 5, 6};
  auto got = to_rows(m.forward_range(m.embed(tokens), {0, 4}, pos));
  auto want = naive_layers(m, naive_embed(m, tokens), 0, 4);
  CHECK(max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("range composition is exact") {
  auto c = tiny_config(2, 2, 2);
  Model<float> m(c);
  randomize(m, 6);
  std::mt19937_64 rng(2);
  auto tokens = random_tokens(5, c.vocab_size, rng);
  std::vector<int> pos{0, 1, 2, 3, 4};
  const auto p = m.partition();
  auto h = m.embed(tokens);
  auto full = m.forward_range(h, p.all(), pos);
  auto composed = m.forward_range(m.forward_range(m.forward_range(h, p.encoding, pos), p.thinking, pos), p.decoding, pos);
  CHECK(std::equal(full.data().begin(), full.data().end(), composed.data().begin()));
  auto same = m.forward_range(h, {2, 2}, pos);
  CHECK(same.node() == h.node());
}

TEST_CASE("causality: later tokens never change earlier logits") {
  auto c = tiny_config(1, 1, 1);
  Model<float> m(c);
  randomize(m, 7);
  std::vector<int> a{5, 9, 11, 3, 100}, b{5, 9, 11, 250, 1};
  std::vector<int> pos{0, 1, 2, 3, 4};
  auto la = to_rows(m.lm_head(m.forward_range(m.embed(a), m.partition().all(), pos)));
  auto lb = to_rows(m.lm_head(m.forward_range(m.embed(b), m.partition().all(), pos)));
  for (int i = 0; i < 3; ++i) CHECK(max_abs_diff({la[i]}, {lb[i]}) == 0.0);
  CHECK(max_abs_diff({la[3]}, {lb[3]}) > 0.0);
}

TEST_CASE("token-by-token cached decoding equals the full pass") {
  auto c = tiny_config(1, 1, 2);
  Model<float> m(c);
  randomize(m, 8);
  std::mt19937_64 rng(3);
  auto tokens = random_tokens(12, c.vocab_size, rng);
  std::vector<int> pos(12);
  for (int i = 0; i < 12; ++i) pos[i] = i;
  auto full = to_rows(m.lm_head(m.forward_range(m.embed(tokens), m.partition().all(), pos)));
  auto cache = m.make_cache();
  for (int i = 0; i < 12; ++i) {
    std::vector<int> t{tokens[static_cast<std::size_t>(i)]}, p{i};
    auto step = to_rows(m.lm_head(m.forward_range(m.embed(t), m.partition().all(), p, &cache, true)));
    CHECK(max_abs_diff(step, {full[static_cast<std::size_t>(i)]}) < 1e-5);
  }
  CHECK(cache.length() == 12);
  CHECK(cache.count(SlotState::Filled, m.partition().all()) == 12 * 4);
}

TEST_CASE("reading an unfilled slot raises a cache integrity error") {
  auto c = tiny_config(1, 1, 1);
  Model<float> m(c);
  auto cache = m.make_cache();
  std::vector<int> t{1, 2}, p01{0, 1};
  m.forward_range(m.embed(t), m.partition().all(), p01, &cache, true);
  cache.set_state(1, 1, SlotState::PendingRefill);
  std::vector<int> t2{3}, p2{2};
  CHECK_THROWS_AS(m.forward_range(m.embed(t2), m.partition().all(), p2, &cache, true), CacheIntegrityError);
  std::vector<int> p4{4};
  auto fresh = m.make_cache();
  CHECK_THROWS_AS(m.forward_range(m.embed(t2), {0, 1}, p4, &fresh, false), CacheIntegrityError);
  std::vector<int> unordered{1, 0};
  CHECK_THROWS_AS(m.forward_range(m.embed(t), {0, 1}, unordered), ContractError);
}

TEST_CASE("lm_head batches consistently and zero head gives zero logits") {
  auto c = tiny_config(1, 1, 1);
  Model<float> m(c);
  randomize(m, 9);
  std::vector<int> t{3, 4};
  auto h = m.embed(t);
  auto both = to_rows(m.lm_head(h));
  auto first = to_rows(m.lm_head(slice_rows(h, 0, 1)));
  CHECK(max_abs_diff({both[0]}, first) < 1e-6);
  auto head = m.named_parameters().back().tensor;
  for (auto& v : head.mutable_data()) v = 0.0f;
  const auto zero = m.lm_head(Tensor::zeros({1, 16}));
  for (float v : zero.data()) CHECK(v == 0.0f);
}

TEST_CASE("precision conversion keeps the weights") {
  Model<float> m(tiny_config(1, 1, 1));
  auto d = convert_model<double>(m);
  auto pf = m.named_parameters();
  auto pd = d.named_parameters();
  for (std::size_t i = 0; i < pf.size(); ++i) {
    CHECK(static_cast<float>(pd[i].tensor.data()[0]) == pf[i].tensor.data()[0]);
  }
}
