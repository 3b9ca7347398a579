#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/heads.hpp"
#include "relprobe/random.hpp"

using namespace relprobe;

namespace {

Matrix random_pattern(Rng& rng, int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int j = 0; j <= i; ++j) total += (m(i, j) = static_cast<float>(uniform_real(rng) + 1e-3));
    for (int j = 0; j <= i; ++j) m(i, j) = static_cast<float>(m(i, j) / total);
  }
  return m;
}

std::vector<std::vector<double>> to_mat(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

IEGrid grid(std::vector<int> rows, std::vector<std::string> cols, std::vector<std::vector<double>> values) {
  IEGrid g;
  g.site = "head_out";
  g.rows = std::move(rows);
  g.cols = std::move(cols);
  g.counts.assign(g.rows.size(), std::vector<std::size_t>(g.cols.size(), 1));
  g.mean_ie = std::move(values);
  return g;
}

const Triplet kTriplet{"q1", "apple river", "the apple and the river", "the copper with some tiger", "d1", "d2"};

}  // namespace

TEST_CASE("interaction score matches the double loop") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 12;
    const Matrix p = random_pattern(rng, n);
    const Span doc{1, 5}, query{6, 9};
    CHECK(attention_interaction_s(p, query, doc) ==
          doctest::Approx(oracle::interaction_s(to_mat(p), 6, 9, 1, 5)).epsilon(1e-6));
    const double s = attention_interaction_s(p, query, doc);
    CHECK(s >= 0.0);
    CHECK(s <= query.size() + 1e-6);
  }
  // all mass on the document: s = |query|; none: s = 0
  Matrix full(6, 6);
  for (int i = 0; i < 6; ++i) full(i, 0) = 1.0f;
  CHECK(attention_interaction_s(full, {3, 6}, {0, 2}) == doctest::Approx(3.0));
  CHECK(attention_interaction_s(full, {3, 6}, {1, 3}) == 0.0);
  // raising a document cell never lowers s
  Matrix p = random_pattern(rng, 8);
  const double before = attention_interaction_s(p, {5, 8}, {0, 3});
  p(6, 1) += 0.5f;
  CHECK(attention_interaction_s(p, {5, 8}, {0, 3}) >= before);
}

TEST_CASE("interaction score signs") {
  const Model model = random_model({});
  const FixtureTokenizer tok = keyword_tokenizer();
  const PromptRenderer r(tok, keyword_template());

  // identical positive and negative documents: S = 0 for every head
  const RenderedPrompt same = r.pointwise("apple river", "the apple and the river");
  PromptPair pair;
  pair.clean = pair.corrupted = same.tokens;
  pair.positions = same.positions;
  pair.answers = r.answers(PromptStyle::pointwise);
  for (const auto& h : interaction_score(model, pair)) CHECK(h.S == 0.0);

  // pointwise: swapping the documents negates S
  Triplet swapped = kTriplet;
  std::swap(swapped.positive, swapped.negative);
  const auto a = interaction_score(model, r.render_pointwise(kTriplet));
  const auto b = interaction_score(model, r.render_pointwise(swapped));
  REQUIRE(a.size() == 16);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].head == b[i].head);
    CHECK(a[i].S == doctest::Approx(-b[i].S));
    CHECK(a[i].S == doctest::Approx(a[i].s_pos - a[i].s_neg));
  }
  const std::vector<PromptPair> pairs = {r.render_pointwise(kTriplet), r.render_pointwise(swapped)};
  const auto mean = mean_interaction(model, pairs);
  CHECK(mean.samples == 2);
  for (const auto& h : mean.heads) CHECK(h.S == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("pearson and spearman") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  std::vector<double> y(x.size()), neg(x.size());
  std::transform(x.begin(), x.end(), y.begin(), [](double v) { return 2 * v + 1; });
  std::transform(x.begin(), x.end(), neg.begin(), [](double v) { return -v; });
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-12));

  Rng rng(3);
  std::vector<double> u(40), v(40), w(40);
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = normal(rng);
    v[i] = 0.5 * u[i] + normal(rng);
    w[i] = 3.0 * v[i] - 7.0;
  }
  CHECK(std::abs(pearson(u, v) - oracle::pearson(u, v)) < 1e-12);
  CHECK(pearson(u, w) == doctest::Approx(pearson(u, v)).epsilon(1e-12));

  CHECK_THROWS_AS(pearson(std::vector<double>{1.0}, std::vector<double>{2.0}), DomainError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DomainError);

  const std::vector<double> cubes = {1, 8, 27, 64, 125};
  CHECK(spearman(x, cubes) == doctest::Approx(1.0));
  // ties get average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
  CHECK(spearman(std::vector<double>{1, 1, 2}, std::vector<double>{1, 2, 3}) ==
        doctest::Approx(oracle::pearson({1.5, 1.5, 3}, {1, 2, 3})));
}

TEST_CASE("rank-biased overlap") {
  const std::vector<int> abc = {0, 1, 2}, acb = {0, 2, 1}, def = {3, 4, 5};
  CHECK(rbo(abc, abc, 0.7) == 1.0);
  CHECK(rbo(abc, def, 0.7) == 0.0);
  // prefixes overlap 1, 1, 3 at depths 1, 2, 3
  CHECK(rbo(abc, acb, 0.7) == doctest::Approx(0.895).epsilon(1e-12));
  CHECK(rbo(abc, acb, 0.7) == doctest::Approx(oracle::rbo_ext(abc, acb, 0.7)).epsilon(1e-12));
  CHECK(rbo(abc, acb, 0.7, RboVariant::truncated) ==
        doctest::Approx(oracle::rbo_truncated(abc, acb, 0.7)).epsilon(1e-12));

  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    std::vector<int> a(10), b(10);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    shuffle(a, rng);
    shuffle(b, rng);
    CHECK(rbo(a, b, 0.9) == doctest::Approx(rbo(b, a, 0.9)).epsilon(1e-12));
    CHECK(rbo(a, b, 0.9) == doctest::Approx(oracle::rbo_ext(a, b, 0.9)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(rbo(std::vector<int>{0, 0}, abc, 0.7), DomainError);
  CHECK_THROWS_AS(rbo(abc, abc, 1.0), DomainError);
  CHECK_THROWS_AS(rbo(abc, abc, 0.0), DomainError);
}

TEST_CASE("layer ranking and top heads") {
  const IEGrid g = grid({0, 1, 2}, {"last"}, {{0.5}, {0.7}, {0.5}});
  CHECK(rank_layers_by_ie(g, "last") == std::vector<int>{1, 0, 2});
  const auto report = compare_layer_rankings(g, g, "last");
  CHECK(report.value == 1.0);
  const IEGrid other = grid({0, 1}, {"last"}, {{0.1}, {0.2}});
  CHECK_THROWS_AS(compare_layer_rankings(g, other, "last"), DomainError);

  const IEGrid heads = grid({0, 1}, {"H0", "H1", "H2"}, {{0.1, 0.3, 0.3}, {0.3, -0.2, 0.0}});
  const auto top = top_heads(heads, 3);
  CHECK(top == std::vector<HeadId>{{0, 1}, {0, 2}, {1, 0}});
  CHECK(top_heads(heads, 100).size() == 6);
  CHECK(parse_head("L3H2") == HeadId{3, 2});
  CHECK(HeadId{12, 0}.to_string() == "L12H0");
  CHECK_THROWS(parse_head("3.2"));
}

TEST_CASE("top-k logits") {
  const std::vector<float> logits = {0.5f, 2.0f, 2.0f, -1.0f};
  const auto top = topk_logits(logits, 3);
  REQUIRE(top.size() == 3);
  CHECK(top[0].token == 1);
  CHECK(top[1].token == 2);
  CHECK(top[2].token == 0);
  CHECK(topk_logits(logits, 10).size() == 4);
}

TEST_CASE("planted aggregator heads write the answer direction") {
  const PlantedCircuit pc = planted_circuit();
  const PromptRenderer r(pc.tokenizer, pc.prompt_template);
  const PromptPair pair = r.render_pointwise(kTriplet);
  CaptureSet capture;
  capture.add(Site::head_out);
  const auto run = pc.model.forward(pair.clean, {capture});
  const int last = pair.positions.last();
  for (const HeadId& h : pc.aggregator_heads) {
    const auto top = head_unembed_topk(pc.model, run.cache, h, last, 5);
    CHECK(top.front().token == pair.answers.yes);
  }
  const auto report = unembed_report(pc.model, std::vector<PromptPair>{pair}, pc.aggregator_heads, 3, &pc.tokenizer);
  CHECK(report.is_object());
}
