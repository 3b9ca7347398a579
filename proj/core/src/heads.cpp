#include "relprobe/heads.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "relprobe/errors.hpp"
#include "relprobe/parallel.hpp"

namespace relprobe {

HeadId parse_head(std::string_view text) {
  HeadId id;
  const auto h = text.find('H');
  if (text.size() < 4 || text[0] != 'L' || h == std::string_view::npos) {
    throw ConfigError("head must look like L<layer>H<head>, got '" + std::string(text) + "'");
  }
  auto r1 = std::from_chars(text.data() + 1, text.data() + h, id.layer);
  auto r2 = std::from_chars(text.data() + h + 1, text.data() + text.size(), id.head);
  if (r1.ec != std::errc() || r1.ptr != text.data() + h || r2.ec != std::errc() ||
      r2.ptr != text.data() + text.size()) {
    throw ConfigError("head must look like L<layer>H<head>, got '" + std::string(text) + "'");
  }
  return id;
}

std::vector<TokenLogit> topk_logits(std::span<const float> logits, std::size_t k) {
  std::vector<TokenLogit> all(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) all[i] = {static_cast<TokenId>(i), logits[i]};
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(),
                    [](const TokenLogit& a, const TokenLogit& b) {
                      return a.logit != b.logit ? a.logit > b.logit : a.token < b.token;
                    });
  all.resize(k);
  return all;
}

std::vector<TokenLogit> head_unembed_topk(const Model& model, const ActivationCache& cache, HeadId head, int position,
                                          std::size_t k) {
  const CacheKey key{Site::head_out, head.layer, head.head};
  if (!cache.contains(key)) throw ConfigError("cache has no " + key.to_string());
  const Matrix& out = cache.at(key);
  if (position < 0 || static_cast<std::size_t>(position) >= out.rows()) {
    throw ShapeError("position " + std::to_string(position) + " outside cached sequence");
  }
  const auto logits = model.unembed(out.row(static_cast<std::size_t>(position)));
  return topk_logits(logits, k);
}

double attention_interaction_s(const Matrix& pattern, Span query, Span document) {
  if (query.empty() || document.empty()) throw DomainError("attention_interaction_s: empty span");
  const auto n = static_cast<int>(pattern.rows());
  if (query.begin < 0 || document.begin < 0 || query.end > n || document.end > n ||
      document.end > static_cast<int>(pattern.cols())) {
    throw ShapeError("attention_interaction_s: span outside the pattern");
  }
  double s = 0.0;
  for (int i = query.begin; i < query.end; ++i) {
    const auto row = pattern.row(static_cast<std::size_t>(i));
    float best = row[static_cast<std::size_t>(document.begin)];
    for (int j = document.begin + 1; j < document.end; ++j) best = std::max(best, row[static_cast<std::size_t>(j)]);
    s += best;
  }
  return s;
}

nlohmann::ordered_json InteractionReport::to_json() const {
  nlohmann::ordered_json j;
  j["style"] = style;
  j["samples"] = samples;
  j["points"] = "per-head means over prompts";
  auto& rows = j["heads"] = nlohmann::ordered_json::array();
  for (const auto& h : heads) {
    rows.push_back({{"head", {h.head.layer, h.head.head}}, {"s_pos", h.s_pos}, {"s_neg", h.s_neg}, {"S", h.S}});
  }
  return j;
}

namespace {

void check_interaction_layout(const PositionMap& map, std::size_t expected_docs) {
  const auto docs = map.documents();
  if (docs.size() != expected_docs) throw ShapeError("interaction score: unexpected number of document spans");
  for (auto d : docs) {
    if (map.query().begin < d.end) throw ShapeError("interaction score: query must follow the documents");
  }
}

}  // namespace

std::vector<HeadInteraction> interaction_score(const Model& model, const PromptPair& pair) {
  const int n_layers = model.config().n_layers;
  const int n_heads = model.config().n_heads;
  ForwardOptions fo;
  fo.capture.add(Site::attn_pattern);
  fo.logits = LogitScope::last_position;
  std::vector<HeadInteraction> out;
  out.reserve(static_cast<std::size_t>(n_layers * n_heads));
  const Span query = pair.positions.query();
  if (pair.style == PromptStyle::pointwise) {
    check_interaction_layout(pair.positions, 1);
    const Span doc = pair.positions.documents().front();
    const auto pos = model.forward(pair.clean, fo);
    const auto neg = model.forward(pair.corrupted, fo);
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_heads; ++h) {
        const CacheKey key{Site::attn_pattern, l, h};
        HeadInteraction hi{{l, h}, attention_interaction_s(pos.cache.at(key), query, doc),
                           attention_interaction_s(neg.cache.at(key), query, doc), 0.0};
        hi.S = hi.s_pos - hi.s_neg;
        out.push_back(hi);
      }
    }
  } else {
    check_interaction_layout(pair.positions, 2);
    const auto docs = pair.positions.documents();
    const auto run = model.forward(pair.clean, fo);
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_heads; ++h) {
        const Matrix& pattern = run.cache.at(CacheKey{Site::attn_pattern, l, h});
        HeadInteraction hi{{l, h}, attention_interaction_s(pattern, query, docs[0]),
                           attention_interaction_s(pattern, query, docs[1]), 0.0};
        hi.S = hi.s_pos - hi.s_neg;
        out.push_back(hi);
      }
    }
  }
  return out;
}

InteractionReport mean_interaction(const Model& model, std::span<const PromptPair> pairs, std::size_t threads) {
  InteractionReport report;
  report.samples = pairs.size();
  if (pairs.empty()) return report;
  report.style = std::string(style_name(pairs.front().style));
  std::vector<std::vector<HeadInteraction>> per_prompt(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) { per_prompt[i] = interaction_score(model, pairs[i]); });
  report.heads = per_prompt.front();
  for (auto& h : report.heads) h.s_pos = h.s_neg = 0.0;
  for (const auto& prompt : per_prompt) {
    for (std::size_t k = 0; k < prompt.size(); ++k) {
      report.heads[k].s_pos += prompt[k].s_pos;
      report.heads[k].s_neg += prompt[k].s_neg;
    }
  }
  const double n = static_cast<double>(pairs.size());
  for (auto& h : report.heads) {
    h.s_pos /= n;
    h.s_neg /= n;
    h.S = h.s_pos - h.s_neg;
  }
  return report;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DomainError("pearson: length mismatch");
  if (xs.size() < 2) throw DomainError("pearson: needs at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DomainError("pearson: correlation undefined for zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DomainError("spearman: length mismatch");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

double rbo(std::span<const int> a, std::span<const int> b, double p, RboVariant variant) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("rbo: p must lie in (0, 1)");
  if (std::set<int>(a.begin(), a.end()).size() != a.size() || std::set<int>(b.begin(), b.end()).size() != b.size()) {
    throw DomainError("rbo: ranking contains duplicate items");
  }
  const std::span<const int> longer = a.size() >= b.size() ? a : b;
  const std::span<const int> shorter = a.size() >= b.size() ? b : a;
  const std::size_t l = longer.size();
  const std::size_t s = shorter.size();
  if (s == 0) return 0.0;

  // overlap[d] = |longer[:d] ∩ shorter[:min(d, s)]|
  std::vector<double> overlap(l + 1, 0.0);
  std::set<int> seen_long, seen_short;
  double x = 0.0;
  bool identical = a.size() == b.size();
  for (std::size_t d = 1; d <= l; ++d) {
    const int u = longer[d - 1];
    if (seen_short.count(u)) x += 1.0;
    seen_long.insert(u);
    if (d <= s) {
      const int v = shorter[d - 1];
      if (seen_long.count(v)) x += 1.0;
      seen_short.insert(v);
    }
    overlap[d] = x;
    if (x != static_cast<double>(d)) identical = false;
  }

  if (variant == RboVariant::truncated) {
    double sum = 0.0;
    double weight = 1.0;
    for (std::size_t d = 1; d <= s; ++d) {
      sum += weight * overlap[d] / static_cast<double>(d);
      weight *= p;
    }
    return (1.0 - p) * sum;
  }

  if (identical) return 1.0;
  const double xs = overlap[s];
  const double xl = overlap[l];
  double sum = 0.0;
  double pd = 1.0;
  for (std::size_t d = 1; d <= l; ++d) {
    pd *= p;
    const double dd = static_cast<double>(d);
    sum += overlap[d] / dd * pd;
    if (d > s) sum += xs * (dd - static_cast<double>(s)) / (static_cast<double>(s) * dd) * pd;
  }
  const double value = (1.0 - p) / p * sum + ((xl - xs) / static_cast<double>(l) + xs / static_cast<double>(s)) * pd;
  return std::clamp(value, 0.0, 1.0);
}

std::vector<int> rank_layers_by_ie(const IEGrid& grid, const std::string& column) {
  const std::size_t c = grid.column(column);
  std::vector<std::size_t> order(grid.rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const double vx = grid.mean_ie[x][c];
    const double vy = grid.mean_ie[y][c];
    return vx != vy ? vx > vy : grid.rows[x] < grid.rows[y];
  });
  std::vector<int> out;
  for (auto i : order) out.push_back(grid.rows[i]);
  return out;
}

nlohmann::ordered_json RboReport::to_json() const {
  nlohmann::ordered_json j;
  j["site"] = site;
  j["column"] = column;
  j["p"] = p;
  j["rbo"] = value;
  j["ranking_a"] = ranking_a;
  j["ranking_b"] = ranking_b;
  return j;
}

RboReport compare_layer_rankings(const IEGrid& a, const IEGrid& b, const std::string& column, double p,
                                 RboVariant variant) {
  if (std::set<int>(a.rows.begin(), a.rows.end()) != std::set<int>(b.rows.begin(), b.rows.end())) {
    throw DomainError("rbo: the two grids rank different layer sets");
  }
  RboReport r;
  r.site = a.site;
  r.column = column;
  r.p = p;
  r.ranking_a = rank_layers_by_ie(a, column);
  r.ranking_b = rank_layers_by_ie(b, column);
  r.value = rbo(r.ranking_a, r.ranking_b, p, variant);
  return r;
}

nlohmann::ordered_json head_report(const IEGrid& ie_output, const IEGrid& ie_attn,
                                   const InteractionReport& interaction) {
  if (ie_output.rows != ie_attn.rows || ie_output.cols != ie_attn.cols) {
    throw ShapeError("head report: head grids have different shapes");
  }
  std::map<HeadId, const HeadInteraction*> by_head;
  for (const auto& h : interaction.heads) by_head[h.head] = &h;

  nlohmann::ordered_json j;
  j["model"] = ie_output.model;
  j["style"] = ie_output.style;
  j["ie_output_site"] = ie_output.site;
  j["ie_attn_site"] = ie_attn.site;
  j["points"] = "per-head means over prompts";
  auto& rows = j["heads"] = nlohmann::ordered_json::array();
  std::vector<double> out_ie, attn_ie, big_s;
  for (std::size_t r = 0; r < ie_output.rows.size(); ++r) {
    for (std::size_t c = 0; c < ie_output.cols.size(); ++c) {
      const HeadId id{ie_output.rows[r], static_cast<int>(c)};
      auto it = by_head.find(id);
      if (it == by_head.end()) throw ShapeError("head report: no interaction score for " + id.to_string());
      nlohmann::ordered_json row;
      row["head"] = {id.layer, id.head};
      row["ie_output"] = ie_output.mean_ie[r][c];
      row["ie_attn"] = ie_attn.mean_ie[r][c];
      row["s_pos"] = it->second->s_pos;
      row["s_neg"] = it->second->s_neg;
      row["S"] = it->second->S;
      rows.push_back(std::move(row));
      out_ie.push_back(ie_output.mean_ie[r][c]);
      attn_ie.push_back(ie_attn.mean_ie[r][c]);
      big_s.push_back(it->second->S);
    }
  }
  auto corr = [&](std::span<const double> x, std::span<const double> y) {
    nlohmann::ordered_json c;
    try {
      c["pearson"] = pearson(x, y);
      c["spearman"] = spearman(x, y);
    } catch (const DomainError& e) {
      c["pearson"] = nullptr;
      c["spearman"] = nullptr;
      c["note"] = e.what();
    }
    return c;
  };
  j["correlation"]["ie_output_vs_ie_attn"] = corr(out_ie, attn_ie);
  j["correlation"]["ie_output_vs_S"] = corr(out_ie, big_s);
  return j;
}

nlohmann::ordered_json unembed_report(const Model& model, std::span<const PromptPair> pairs,
                                      std::span<const HeadId> heads, std::size_t k, const Tokenizer* tokenizer,
                                      std::size_t threads) {
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= model.config().n_layers || h.head < 0 || h.head >= model.config().n_heads) {
      throw ConfigError("head " + h.to_string() + " is outside the model");
    }
  }
  std::vector<std::vector<std::vector<TokenLogit>>> per_prompt(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t p) {
    ForwardOptions fo;
    for (const auto& h : heads) fo.capture.add(Site::head_out, h.layer, h.head);
    fo.logits = LogitScope::last_position;
    const auto run = model.forward(pairs[p].clean, fo);
    for (const auto& h : heads) {
      per_prompt[p].push_back(head_unembed_topk(model, run.cache, h, pairs[p].positions.last(), k));
    }
  });
  auto token_text = [&](TokenId t) -> nlohmann::ordered_json {
    if (tokenizer == nullptr) return nullptr;
    return tokenizer->decode(std::vector<TokenId>{t});
  };
  nlohmann::ordered_json j;
  j["model"] = model.id();
  j["k"] = k;
  j["prompts"] = pairs.size();
  auto& rows = j["heads"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < heads.size(); ++i) {
    std::map<TokenId, std::size_t> rank1;
    std::size_t yes_first = 0, no_first = 0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto& top = per_prompt[p][i];
      if (top.empty()) continue;
      ++rank1[top.front().token];
      if (top.front().token == pairs[p].answers.yes) ++yes_first;
      if (top.front().token == pairs[p].answers.no) ++no_first;
    }
    nlohmann::ordered_json row;
    row["head"] = {heads[i].layer, heads[i].head};
    row["yes_rank1"] = yes_first;
    row["no_rank1"] = no_first;
    auto& counts = row["rank1_tokens"] = nlohmann::ordered_json::array();
    for (const auto& [tok, n] : rank1) counts.push_back({{"token", tok}, {"text", token_text(tok)}, {"count", n}});
    if (!pairs.empty()) {
      auto& first = row["first_prompt_topk"] = nlohmann::ordered_json::array();
      for (const auto& t : per_prompt[0][i]) {
        first.push_back({{"token", t.token}, {"text", token_text(t.token)}, {"logit", t.logit}});
      }
    }
    rows.push_back(std::move(row));
  }
  return j;
}

std::vector<HeadId> top_heads(const IEGrid& head_grid, std::size_t k) {
  std::vector<std::pair<double, HeadId>> all;
  for (std::size_t r = 0; r < head_grid.rows.size(); ++r) {
    for (std::size_t c = 0; c < head_grid.cols.size(); ++c) {
      all.push_back({head_grid.mean_ie[r][c], HeadId{head_grid.rows[r], static_cast<int>(c)}});
    }
  }
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  std::vector<HeadId> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(all[i].second);
  return out;
}

}  // namespace relprobe
