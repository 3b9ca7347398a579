#include <doctest.h>

#include <cmath>

#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/intervention.hpp"
#include "relprobe/prompt.hpp"

using namespace relprobe;

namespace {

struct Setup {
  Model model = random_model({});
  FixtureTokenizer tokenizer = keyword_tokenizer();
  PromptRenderer renderer{tokenizer, keyword_template()};
  PromptPair pair = renderer.render_pointwise(
      {"q1", "apple river", "the apple and the river", "the copper with some tiger", "d1", "d2"});
};

std::vector<int> all_positions(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  return p;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a.values()[i] - b.values()[i])));
  return m;
}

}  // namespace

TEST_CASE("null patch is bit-identical to a plain forward") {
  Setup s;
  const auto plain = s.model.forward(s.pair.corrupted);
  PatchRunOptions opts;
  opts.logits = LogitScope::all_positions;
  const auto patched = run_with_patches(s.model, s.pair.corrupted, {}, {}, opts);
  CHECK(patched.logits == plain.logits);
}

TEST_CASE("restoring every site at every position reproduces the clean run") {
  Setup s;
  const int n = static_cast<int>(s.pair.clean.size());
  const auto clean = s.model.forward(s.pair.clean, {CaptureSet::all()});
  std::vector<PatchSpec> patches;
  for (int l = 0; l < s.model.config().n_layers; ++l) {
    for (Site site : {Site::attn_out, Site::mlp_out, Site::resid}) patches.push_back({site, l, std::nullopt, all_positions(n)});
  }
  PatchRunOptions opts;
  opts.logits = LogitScope::all_positions;
  const auto restored = run_with_patches(s.model, s.pair.corrupted, patches, {&clean.cache, nullptr}, opts);
  CHECK(max_abs_diff(restored.logits, clean.logits) <= 1e-4);
}

TEST_CASE("conflicts, donor shape and validation errors") {
  Setup s;
  const int n = static_cast<int>(s.pair.clean.size());
  const auto clean = s.model.forward(s.pair.clean, {CaptureSet::all()});
  const std::vector<PatchSpec> conflict = {{Site::head_out, 1, 2, {3, 4}, {}, PatchMode::restore},
                                           {Site::head_out, 1, 2, {4}, {}, PatchMode::zero}};
  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, conflict, {&clean.cache, nullptr}), PatchConflictError);
  // same mode twice is fine
  const std::vector<PatchSpec> twice = {{Site::head_out, 1, 2, {3, 4}}, {Site::head_out, 1, 2, {4}}};
  CHECK_NOTHROW(run_with_patches(s.model, s.pair.corrupted, twice, {&clean.cache, nullptr}));

  const auto shorter = s.model.forward(std::vector<TokenId>(s.pair.clean.begin(), s.pair.clean.end() - 1), {CaptureSet::all()});
  const std::vector<PatchSpec> one = {{Site::attn_out, 0, std::nullopt, {0}}};
  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, one, {&shorter.cache, nullptr}), ShapeError);

  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{{Site::attn_out, 9, std::nullopt, {0}}},
                                   {&clean.cache, nullptr}),
                  ConfigError);
  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{{Site::head_out, 0, std::nullopt, {0}}},
                                   {&clean.cache, nullptr}),
                  ConfigError);
  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{{Site::attn_out, 0, std::nullopt, {n}}},
                                   {&clean.cache, nullptr}),
                  ConfigError);
  CHECK_THROWS_AS(run_with_patches(s.model, s.pair.corrupted, one, {}), ConfigError);
}

TEST_CASE("zeroing every head of a layer leaves a residual passthrough") {
  Setup s;
  const int n = static_cast<int>(s.pair.clean.size());
  std::vector<PatchSpec> patches;
  for (int h = 0; h < s.model.config().n_heads; ++h) patches.push_back({Site::head_out, 2, h, all_positions(n), {}, PatchMode::zero});
  PatchRunOptions opts;
  opts.capture = CaptureSet::all();
  const auto res = run_with_patches(s.model, s.pair.clean, patches, {}, opts);
  const Matrix& attn = res.cache.at({Site::attn_out, 2, -1});
  for (float v : attn.values()) CHECK(v == 0.0f);
  const Matrix& before = res.cache.at({Site::resid, 1, -1});
  const Matrix& mlp = res.cache.at({Site::mlp_out, 2, -1});
  const Matrix& after = res.cache.at({Site::resid, 2, -1});
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after.values()[i] == before.values()[i] + mlp.values()[i]);
}

TEST_CASE("patches on disjoint cells compose") {
  Setup s;
  const auto clean = s.model.forward(s.pair.clean, {CaptureSet::all()});
  const PatchDonor donor{&clean.cache, nullptr};
  const PatchSpec a{Site::attn_out, 0, std::nullopt, {5, 6, 7}};
  const PatchSpec b{Site::mlp_out, 2, std::nullopt, {static_cast<int>(s.pair.clean.size()) - 1}};
  PatchRunOptions capture;
  capture.capture = CaptureSet{{Site::resid}};
  const auto first = run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{a}, donor, capture);
  PatchRunOptions resume;
  resume.resume_from = &first.cache;
  const auto second = run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{b}, donor, resume);
  const auto both = run_with_patches(s.model, s.pair.corrupted, std::vector<PatchSpec>{a, b}, donor);
  CHECK(second.logits == both.logits);
}

TEST_CASE("attention pattern patches keep rows nonnegative; renormalization is opt-in") {
  Setup s;
  const auto clean = s.model.forward(s.pair.clean, {CaptureSet::all()});
  const auto q = s.pair.positions.positions(PositionGroup::query);
  const auto d = s.pair.positions.positions(PositionGroup::documents);
  const std::vector<PatchSpec> patches = {{Site::attn_pattern, 1, 0, q, d}};
  PatchRunOptions opts;
  opts.capture = CaptureSet{{Site::attn_pattern, 1, 0}};
  const auto raw = run_with_patches(s.model, s.pair.corrupted, patches, {&clean.cache, nullptr}, opts);
  opts.renormalize_patterns = true;
  const auto renorm = run_with_patches(s.model, s.pair.corrupted, patches, {&clean.cache, nullptr}, opts);
  const Matrix& pr = raw.cache.at({Site::attn_pattern, 1, 0});
  const Matrix& pn = renorm.cache.at({Site::attn_pattern, 1, 0});
  const Matrix& donor = clean.cache.at({Site::attn_pattern, 1, 0});
  bool some_row_off = false;
  for (int i : q) {
    double sr = 0.0, sn = 0.0;
    for (std::size_t j = 0; j < pr.cols(); ++j) {
      CHECK(pr(i, j) >= 0.0f);
      sr += pr(i, j);
      sn += pn(i, j);
    }
    for (int j : d) CHECK(pr(i, j) == donor(i, j));
    if (std::abs(sr - 1.0) > 1e-6) some_row_off = true;
    CHECK(std::abs(sn - 1.0) <= 1e-5);
  }
  CHECK(some_row_off);

  // masked cells (source after target) are zero in both runs, so patching them changes nothing
  const std::vector<PatchSpec> masked = {{Site::attn_pattern, 1, 0, {2}, {5, 6}}};
  const auto plain = s.model.forward(s.pair.corrupted);
  PatchRunOptions all;
  all.logits = LogitScope::all_positions;
  CHECK(run_with_patches(s.model, s.pair.corrupted, masked, {&clean.cache, nullptr}, all).logits == plain.logits);
}

TEST_CASE("mean caches") {
  Setup s;
  const std::vector<CacheKey> keys = {{Site::head_out, 1, 1}, {Site::mlp_out, 3, -1}};
  // one sequence: mean equals its own activations
  const auto one = compute_mean_cache(s.model, {s.pair.clean}, {s.pair.positions}, keys);
  const auto clean = s.model.forward(s.pair.clean, {CaptureSet::of_keys(keys)});
  CHECK(one.count() == 1);
  for (const auto& key : keys)
    for (int p = 0; p < s.pair.positions.length(); ++p) {
      const auto row = one.row(key, s.pair.positions, p);
      const auto ref = clean.cache.at(key).row(p);
      CHECK(std::equal(row.begin(), row.end(), ref.begin()));
    }

  // two sequences: explicit two-term average
  const auto two = compute_mean_cache(s.model, {s.pair.clean, s.pair.corrupted}, {s.pair.positions, s.pair.positions}, keys);
  const auto corrupt = s.model.forward(s.pair.corrupted, {CaptureSet::of_keys(keys)});
  for (const auto& key : keys)
    for (int p = 0; p < s.pair.positions.length(); ++p) {
      const auto row = two.row(key, s.pair.positions, p);
      for (std::size_t k = 0; k < row.size(); ++k) {
        const double ref = (static_cast<double>(clean.cache.at(key)(p, k)) + corrupt.cache.at(key)(p, k)) / 2.0;
        CHECK(row[k] == doctest::Approx(ref).epsilon(1e-6).scale(1.0));
      }
    }

  // v and -v average to zero
  ActivationCache a, b;
  Matrix v(3, 2, std::vector<float>{1, -2, 3.5f, 0.25f, -7, 8});
  Matrix neg = v;
  for (auto& x : neg.values()) x = -x;
  a.insert({Site::resid, 0, -1}, v);
  b.insert({Site::resid, 0, -1}, neg);
  const std::vector<CacheKey> rk = {{Site::resid, 0, -1}};
  const auto sym = build_mean_cache({&a, &b}, {PositionMap::flat(3), PositionMap::flat(3)}, rk);
  for (int p = 0; p < 3; ++p)
    for (float x : sym.row(rk[0], PositionMap::flat(3), p)) CHECK(x == 0.0f);

  CHECK_THROWS_AS(build_mean_cache({}, {}, rk), DomainError);
  const std::vector<CacheKey> missing = {{Site::mlp_out, 0, -1}};
  CHECK_THROWS_AS(build_mean_cache({&a}, {PositionMap::flat(3)}, missing), ConfigError);
}

TEST_CASE("knockout") {
  Setup s;
  const auto& layout = s.pair.positions;
  std::vector<CacheKey> keys;
  for (int h = 0; h < 4; ++h) keys.push_back({Site::head_out, 2, h});
  const auto self_mean = compute_mean_cache(s.model, {s.pair.clean}, {layout}, keys);
  const auto plain = s.model.forward(s.pair.clean, {{}, nullptr, LogitScope::last_position});
  CHECK(knockout(s.model, s.pair.clean, layout, {}, self_mean).logits == plain.logits);

  // mean built from the sequence itself reproduces the unpatched logits
  std::vector<HeadAblation> heads;
  for (int h = 0; h < 4; ++h) heads.push_back({2, h, PositionGroup::all});
  const auto same = knockout(s.model, s.pair.clean, layout, heads, self_mean);
  for (std::size_t v = 0; v < plain.logits.cols(); ++v) CHECK(same.logits(0, v) == doctest::Approx(plain.logits(0, v)).epsilon(1e-5).scale(1.0));

  // equivalent to mean_ablate head_out patches
  const auto pair_mean = compute_mean_cache(s.model, {s.pair.clean, s.pair.corrupted}, {layout, layout}, keys);
  const std::vector<HeadAblation> some = {{2, 1, PositionGroup::query}, {2, 3, PositionGroup::last}};
  const auto ko = knockout(s.model, s.pair.clean, layout, some, pair_mean);
  std::vector<PatchSpec> patches = {{Site::head_out, 2, 1, layout.positions(PositionGroup::query), {}, PatchMode::mean_ablate},
                                    {Site::head_out, 2, 3, {layout.last()}, {}, PatchMode::mean_ablate}};
  PatchRunOptions opts;
  opts.layout = &layout;
  const auto manual = run_with_patches(s.model, s.pair.clean, patches, {nullptr, &pair_mean}, opts);
  CHECK(ko.logits == manual.logits);
  CHECK(knockout_patches(some, layout) == patches);
}

TEST_CASE("patch specs serialize to JSON and back") {
  const std::vector<PatchSpec> patches = {{Site::attn_pattern, 3, 1, {7, 8}, {1, 2, 3}, PatchMode::restore},
                                          {Site::mlp_out, 0, std::nullopt, {0}, {}, PatchMode::zero},
                                          {Site::head_out, 2, 5, {4}, {}, PatchMode::mean_ablate}};
  CHECK(patches_from_json(patches_to_json(patches)) == patches);
  CHECK_THROWS_AS(patch_from_json(nlohmann::json{{"site", "attn_out"}, {"mode", "shuffle"}, {"layer", 0}}), ConfigError);
}
