#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/model.hpp"
#include "relprobe/random.hpp"

using namespace relprobe;

namespace {

std::vector<TokenId> random_tokens(std::size_t n, int vocab, Rng& rng) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(uniform_index(rng, static_cast<std::size_t>(vocab)));
  return t;
}

WeightMatrix eye(std::size_t rows, std::size_t cols, float scale = 1.0f) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) m(i, i) = scale;
  return WeightMatrix(std::move(m));
}

// One layer, one head, identity projections; embeddings are scaled one-hot
// rows over four dimensions.
Model hand_model() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.n_kv_heads = 1;
  c.d_model = 4;
  c.d_ff = 4;
  c.vocab_size = 6;
  c.max_seq_len = 16;
  Weights w;
  Matrix e(6, 4);
  for (int t = 0; t < 6; ++t) e(t, t % 4) = 1.0f + 0.5f * static_cast<float>(t / 4);
  e(5, 2) = -0.75f;
  w.embed = WeightMatrix(e);
  LayerWeights lw;
  lw.attn_norm = std::vector<float>(4, 1.0f);
  lw.ffn_norm = std::vector<float>(4, 1.0f);
  lw.wq = eye(4, 4, 2.0f);
  lw.wk = eye(4, 4);
  lw.wv = eye(4, 4);
  lw.wo = eye(4, 4);
  lw.w_gate = eye(4, 4);
  lw.w_up = eye(4, 4, 0.5f);
  Matrix down(4, 4);
  for (int i = 0; i < 4; ++i) down(i, (i + 1) % 4) = 1.0f;
  lw.w_down = WeightMatrix(down);
  w.layers.push_back(std::move(lw));
  w.final_norm = std::vector<float>(4, 1.0f);
  w.unembed = WeightMatrix(e);
  w.unembed_bias = {0.0f, 0.1f, 0.0f, -0.1f, 0.2f, 0.0f};
  return Model(c, std::move(w));
}

std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_model = 64;
  c.d_ff = 32;
  c.vocab_size = 100;
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.n_kv_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.d_model = 66;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.norm_eps = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.n_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(ModelConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("forward matches the straight-line oracle") {
  RandomModelSpec spec;
  spec.layers = 2;
  spec.heads = 4;
  spec.kv_heads = 2;
  spec.d_model = 32;
  spec.d_ff = 48;
  spec.vocab = 64;
  spec.seed = 5;
  const Model model = random_model(spec);
  Rng rng(9);
  const auto tokens = random_tokens(11, spec.vocab, rng);
  const auto res = model.forward(tokens, {CaptureSet::all()});
  const auto ref = oracle::forward(model, std::vector<int>(tokens.begin(), tokens.end()));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (int v = 0; v < spec.vocab; ++v) CHECK(res.logits(i, v) == doctest::Approx(ref.logits[i][v]).epsilon(1e-4).scale(1.0));
  for (int l = 0; l < spec.layers; ++l) {
    const Matrix& resid = res.cache.at({Site::resid, l, -1});
    const Matrix& pat = res.cache.at({Site::attn_pattern, l, 3});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      for (int k = 0; k < spec.d_model; ++k) CHECK(resid(i, k) == doctest::Approx(ref.resid[l][i][k]).epsilon(1e-4).scale(1.0));
      for (std::size_t j = 0; j < tokens.size(); ++j) CHECK(pat(i, j) == doctest::Approx(ref.pattern[l][3][i][j]).epsilon(1e-5).scale(1.0));
    }
  }
}

TEST_CASE("hand-set one-layer model predicts the oracle's greedy token") {
  const Model model = hand_model();
  for (const std::vector<TokenId> tokens : {std::vector<TokenId>{0, 1, 2}, {4, 5, 3, 1}, {2, 2, 5}}) {
    const auto res = model.forward(tokens);
    const auto ref = oracle::forward(model, std::vector<int>(tokens.begin(), tokens.end()));
    const auto& last = ref.logits.back();
    const std::size_t golden = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    CHECK(argmax(res.logits.row(tokens.size() - 1)) == golden);
  }
}

TEST_CASE("capture contract") {
  const Model model = random_model({});
  const std::vector<TokenId> tokens = {1, 2, 3, 4, 5};
  const auto none = model.forward(tokens);
  CHECK(none.cache.empty());
  CHECK(none.logits.rows() == 5);
  CHECK(none.logits.cols() == 512);

  CaptureSet some;
  some.add(Site::head_out, 2, 1).add(Site::mlp_out, 0);
  const auto part = model.forward(tokens, {some});
  CHECK(part.cache.size() == 2);
  CHECK(part.cache.contains({Site::head_out, 2, 1}));
  CHECK(part.cache.contains({Site::mlp_out, 0, -1}));
  CHECK(part.logits == none.logits);
}

TEST_CASE("cache invariants: head sum, residual bookkeeping, stochastic causal rows") {
  const Model model = random_model({});
  Rng rng(4);
  const auto tokens = random_tokens(17, 512, rng);
  const auto res = model.forward(tokens, {CaptureSet::all()});
  const auto& c = model.config();
  for (int l = 0; l < c.n_layers; ++l) {
    const Matrix& attn = res.cache.at({Site::attn_out, l, -1});
    const Matrix& mlp = res.cache.at({Site::mlp_out, l, -1});
    const Matrix& resid = res.cache.at({Site::resid, l, -1});
    Matrix sum(attn.rows(), attn.cols());
    for (int h = 0; h < c.n_heads; ++h) sum += res.cache.at({Site::head_out, l, h});
    for (std::size_t i = 0; i < attn.size(); ++i) {
      CHECK(std::abs(sum.values()[i] - attn.values()[i]) <= 1e-4 * std::max(1.0f, std::abs(attn.values()[i])));
    }
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (int k = 0; k < c.d_model; ++k) {
        const float prev = l == 0 ? model.weights().embed.at(tokens[i], k) : res.cache.at({Site::resid, l - 1, -1})(i, k);
        CHECK(resid(i, k) == doctest::Approx(prev + attn(i, k) + mlp(i, k)).epsilon(1e-5).scale(1.0));
      }
    for (int h = 0; h < c.n_heads; ++h) {
      const Matrix& p = res.cache.at({Site::attn_pattern, l, h});
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < tokens.size(); ++j) {
          CHECK(p(i, j) >= 0.0f);
          if (j > i) CHECK(p(i, j) == 0.0f);
          s += p(i, j);
        }
        CHECK(std::abs(s - 1.0) <= 1e-5);
      }
    }
  }
}

TEST_CASE("repeated forward passes are bit-identical") {
  const Model model = random_model({});
  const std::vector<TokenId> tokens = {7, 100, 3, 99, 42, 42, 0};
  const auto a = model.forward(tokens, {CaptureSet::all()});
  const auto b = model.forward(tokens, {CaptureSet::all()});
  CHECK(a.logits == b.logits);
  for (const auto& [key, m] : a.cache) CHECK(m == b.cache.at(key));
}

TEST_CASE("unembed is the affine head") {
  const Model model = random_model({});
  const auto& b = model.weights().unembed_bias;
  const std::vector<float> zero(64, 0.0f);
  const auto at_zero = model.unembed(zero);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(at_zero[i] == b[i]);

  Rng rng(6);
  std::vector<float> v(64), w(64), v3(64), vw(64);
  for (std::size_t i = 0; i < 64; ++i) {
    v[i] = static_cast<float>(normal(rng));
    w[i] = static_cast<float>(normal(rng));
    v3[i] = 3.0f * v[i];
    vw[i] = v[i] + w[i];
  }
  const auto uv = model.unembed(v), uw = model.unembed(w), u3 = model.unembed(v3), uvw = model.unembed(vw);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(u3[i] - b[i] == doctest::Approx(3.0 * (uv[i] - b[i])).epsilon(1e-5).scale(1.0));
    CHECK(uvw[i] == doctest::Approx(uv[i] + uw[i] - b[i]).epsilon(1e-5).scale(1.0));
  }
  CHECK_THROWS_AS(model.unembed(std::vector<float>(63, 0.0f)), ShapeError);

  const std::vector<TokenId> tokens = {5, 6, 7, 8};
  const auto res = model.forward(tokens, {CaptureSet{{Site::resid, 3}}});
  const auto logits = model.unembed(model.final_norm(res.cache.at({Site::resid, 3, -1}).row(3)));
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == doctest::Approx(res.logits(3, i)).epsilon(1e-5).scale(1.0));
}

TEST_CASE("token validation") {
  const Model model = random_model({});
  CHECK_THROWS_AS(model.forward(std::vector<TokenId>(513, 1)), LengthError);
  CHECK_THROWS(model.forward(std::vector<TokenId>{}));
  CHECK_THROWS(model.forward(std::vector<TokenId>{512}));
}

TEST_CASE("last-position scope and resumed passes agree with the full pass") {
  const Model model = random_model({});
  const std::vector<TokenId> tokens = {10, 20, 30, 40, 50, 60};
  const auto full = model.forward(tokens, {CaptureSet{{Site::resid}}});
  ForwardOptions last;
  last.logits = LogitScope::last_position;
  const auto tail = model.forward(tokens, last);
  REQUIRE(tail.logits.rows() == 1);
  for (std::size_t v = 0; v < 512; ++v) CHECK(tail.logits(0, v) == full.logits(5, v));

  ForwardOptions resume;
  resume.start_layer = 2;
  resume.start_resid = &full.cache.at({Site::resid, 1, -1});
  const auto resumed = model.forward(tokens, resume);
  CHECK(resumed.logits == full.logits);
}
