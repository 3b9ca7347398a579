#include <doctest.h>

#include <cmath>
#include <sstream>

#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/patching.hpp"

using namespace relprobe;

namespace {

std::vector<PromptPair> pairs_for(const PromptRenderer& r, PromptStyle style) {
  const std::vector<Triplet> ts = {
      {"q1", "apple river", "the apple and the river", "the copper with some tiger", "a", "b"},
      {"q2", "violin orbit", "some violin near the orbit", "the maple of the harbor", "c", "d"},
      {"q3", "tiger glacier", "glacier tiger", "lantern apple", "e", "f"},
      {"q4", "copper maple", "the copper and maple", "the river and maple", "g", "h"},
  };
  std::vector<PromptPair> out;
  for (const auto& t : ts) out.push_back(r.render(t, style));
  return out;
}

}  // namespace

TEST_CASE("logit difference and indirect effect") {
  std::vector<float> logits(300, 0.0f);
  logits[264] = 2.0f;
  logits[265] = 0.5f;
  CHECK(logit_diff(logits, {264, 265}) == doctest::Approx(1.5));

  CHECK(indirect_effect({3.0, -1.0, 1.0}).value() == doctest::Approx(0.5));
  CHECK(indirect_effect({3.0, -1.0, 3.0}).value() == doctest::Approx(1.0));
  CHECK(indirect_effect({3.0, -1.0, -1.0}).value() == doctest::Approx(0.0));
  CHECK(indirect_effect({3.0, -1.0, 5.0}).value() == doctest::Approx(1.5));
  CHECK(indirect_effect({3.0, -1.0, -3.0}).value() == doctest::Approx(-0.5));
  CHECK_FALSE(indirect_effect({1.0, 1.0005, 0.0}).has_value());
  CHECK_FALSE(indirect_effect({1.0, 1.001, 0.0}).has_value());
  CHECK(indirect_effect({1.0, 1.0005, 0.0}, 1e-4).has_value());
}

TEST_CASE("restoring the whole residual gives full effect") {
  const Model model = random_model({});
  const FixtureTokenizer tok = keyword_tokenizer();
  const PromptRenderer r(tok, keyword_template());
  const auto pairs = pairs_for(r, PromptStyle::pointwise);
  const Site sites[] = {Site::resid};
  const auto grids = trace_components(model, pairs, sites, {}, {PositionGroup::all, PositionGroup::last});
  REQUIRE(grids.size() == 1);
  const IEGrid& g = grids[0];
  CHECK(g.site == "resid");
  CHECK(g.cols == std::vector<std::string>{"all", "last"});
  CHECK(g.rows.size() == 4);
  CHECK(g.at(0, "all") == doctest::Approx(1.0).epsilon(1e-4));
  // the last layer's residual at the last position is all the logits read
  CHECK(g.at(3, "last") == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(g.prompts == pairs.size());
}

TEST_CASE("eps exclusion is counted") {
  const Model model = random_model({});
  const FixtureTokenizer tok = keyword_tokenizer();
  const PromptRenderer r(tok, keyword_template());
  const auto pairs = pairs_for(r, PromptStyle::pointwise);
  TraceOptions opt;
  opt.eps = 1e9;
  const Site sites[] = {Site::attn_out};
  const auto g = trace_components(model, pairs, sites, opt)[0];
  CHECK(g.excluded == pairs.size());
  for (const auto& row : g.counts)
    for (auto c : row) CHECK(c == 0);

  std::size_t expected = 0;
  for (const auto& p : pairs) {
    const auto e = endpoint_runs(model, p);
    if (std::abs(e.clean - e.corrupted) <= 1e-3) ++expected;
  }
  CHECK(trace_components(model, pairs, sites)[0].excluded == expected);
}

TEST_CASE("single-head model: head grid equals attn_out grid") {
  RandomModelSpec spec;
  spec.heads = 1;
  spec.kv_heads = 1;
  spec.layers = 2;
  spec.d_model = 32;
  spec.seed = 5;
  const Model model = random_model(spec);
  const FixtureTokenizer tok = keyword_tokenizer();
  const PromptRenderer r(tok, keyword_template());
  const auto pairs = pairs_for(r, PromptStyle::pointwise);
  const Site sites[] = {Site::attn_out};
  const auto comp = trace_components(model, pairs, sites)[0];
  for (PositionGroup group : {PositionGroup::documents, PositionGroup::query, PositionGroup::last}) {
    const auto heads = trace_heads(model, pairs, group);
    CHECK(heads.cols == std::vector<std::string>{"H0"});
    for (int l = 0; l < 2; ++l)
      CHECK(heads.at(l, "H0") == doctest::Approx(comp.at(l, std::string(group_name(group)))).epsilon(1e-5));
  }
}

TEST_CASE("grids are thread independent and serialize") {
  const Model model = random_model({});
  const FixtureTokenizer tok = keyword_tokenizer();
  const PromptRenderer r(tok, keyword_template());
  const auto pairs = pairs_for(r, PromptStyle::pairwise);
  TraceOptions one, three;
  one.split_documents = three.split_documents = true;
  three.threads = 3;
  const Site sites[] = {Site::attn_out, Site::mlp_out};
  const auto a = trace_components(model, pairs, sites, one);
  const auto b = trace_components(model, pairs, sites, three);
  REQUIRE(a.size() == 2);
  CHECK(a[0].cols == std::vector<std::string>{"documents", "document_a", "document_b", "query", "instruction", "last"});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mean_ie == b[i].mean_ie);
    CHECK(a[i].counts == b[i].counts);
  }
  CHECK(trace_heads(model, pairs, PositionGroup::last, one).mean_ie ==
        trace_heads(model, pairs, PositionGroup::last, three).mean_ie);
  CHECK(trace_attention_scores(model, pairs, one).mean_ie == trace_attention_scores(model, pairs, three).mean_ie);

  const IEGrid back = IEGrid::from_json(a[0].to_json());
  CHECK(back.mean_ie == a[0].mean_ie);
  CHECK(back.cols == a[0].cols);
  CHECK(back.rows == a[0].rows);
  CHECK(back.to_json() == a[0].to_json());

  std::istringstream csv(a[0].to_csv());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line))
    if (!line.empty() && line[0] != '#' && line.rfind("layer", 0) != 0) ++lines;
  CHECK(lines == a[0].rows.size() * a[0].cols.size());

  CHECK_THROWS_AS(a[0].column("nope"), ConfigError);
  const IEGrid c = a[0].clamped();
  for (const auto& row : c.mean_ie)
    for (double v : row) CHECK((v >= 0.0 && v <= 1.0));
}
