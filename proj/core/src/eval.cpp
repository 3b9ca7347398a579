#include "relprobe/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "relprobe/errors.hpp"
#include "relprobe/parallel.hpp"
#include "relprobe/random.hpp"

namespace relprobe {

double score_prompt(const Model& model, std::span<const TokenId> tokens, const PositionMap& layout,
                    const AnswerTokens& answers, const Ablation& ablation) {
  if (ablation.heads.empty()) {
    ForwardOptions fo;
    fo.logits = LogitScope::last_position;
    return logit_diff(model.forward(tokens, fo).logits.row(0), answers);
  }
  if (ablation.means == nullptr) throw ConfigError("ablation without mean activations");
  return logit_diff(knockout(model, tokens, layout, ablation.heads, *ablation.means).logits.row(0), answers);
}

double f1(const std::vector<bool>& predictions, const std::vector<bool>& golds) {
  if (predictions.size() != golds.size()) throw DomainError("f1: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] && golds[i]) ++tp;
    if (predictions[i] && !golds[i]) ++fp;
    if (!predictions[i] && golds[i]) ++fn;
  }
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

double ndcg_at_k(std::span<const std::string> ranking, const std::map<std::string, int>& qrels, int k) {
  if (k <= 0) throw DomainError("ndcg_at_k: k must be positive");
  auto gain = [](int rel) { return rel > 0 ? std::pow(2.0, rel) - 1.0 : 0.0; };
  std::vector<int> rels;
  double dcg = 0.0;
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    auto it = qrels.find(ranking[i]);
    const int rel = it == qrels.end() ? 0 : it->second;
    rels.push_back(rel);
    if (static_cast<int>(i) < k) dcg += gain(rel) / std::log2(static_cast<double>(i) + 2.0);
  }
  std::sort(rels.begin(), rels.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < rels.size() && static_cast<int>(i) < k; ++i) {
    idcg += gain(rels[i]) / std::log2(static_cast<double>(i) + 2.0);
  }
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

double percent_change(double full, double value) {
  if (full == 0.0) return 0.0;
  return (value - full) / full * 100.0;
}

std::vector<std::string> RankingTask::first_stage_ids() const {
  std::vector<std::string> ids;
  for (const auto& c : candidates) ids.push_back(c.id);
  return ids;
}

std::vector<RankingTask> build_ranking_tasks(const std::vector<TextRecord>& queries,
                                             const std::vector<TextRecord>& corpus, const Qrels& qrels,
                                             const std::vector<RunEntry>& run, std::size_t depth) {
  std::map<std::string, const TextRecord*> docs;
  for (const auto& d : corpus) docs[d.id] = &d;
  std::map<std::string, std::vector<const RunEntry*>> by_query;
  for (const auto& e : run) by_query[e.query_id].push_back(&e);
  std::vector<RankingTask> tasks;
  for (const auto& q : queries) {
    auto judged = qrels.find(q.id);
    auto entries = by_query.find(q.id);
    if (judged == qrels.end() || entries == by_query.end()) continue;
    auto list = entries->second;
    std::stable_sort(list.begin(), list.end(), [](const RunEntry* a, const RunEntry* b) { return a->rank < b->rank; });
    RankingTask task{q.id, q.text, {}, judged->second};
    for (const RunEntry* e : list) {
      if (task.candidates.size() >= depth) break;
      auto d = docs.find(e->doc_id);
      if (d != docs.end()) task.candidates.push_back(*d->second);
    }
    if (task.candidates.size() >= 2) tasks.push_back(std::move(task));
  }
  return tasks;
}

std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

RerankResult rerank_pointwise(const Model& model, const PromptRenderer& renderer, const RankingTask& task,
                              const Ablation& ablation, std::size_t threads) {
  const AnswerTokens answers = renderer.answers(PromptStyle::pointwise);
  RerankResult result;
  result.scores.resize(task.candidates.size());
  parallel_for(task.candidates.size(), threads, [&](std::size_t i) {
    const auto prompt = renderer.pointwise(task.query, task.candidates[i].text);
    result.scores[i] = score_prompt(model, prompt.tokens, prompt.positions, answers, ablation);
  });
  result.judged_prompts = task.candidates.size();
  result.order = order_by_score(result.scores);
  return result;
}

RerankResult rerank_pairwise(const Model& model, const PromptRenderer& renderer, const RankingTask& task,
                             const Ablation& ablation, std::size_t threads) {
  const AnswerTokens answers = renderer.answers(PromptStyle::pairwise);
  const std::size_t n = task.candidates.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) pairs.push_back({i, j});
    }
  }
  std::vector<char> first_wins(pairs.size(), 0);
  parallel_for(pairs.size(), threads, [&](std::size_t k) {
    const auto [i, j] = pairs[k];
    const auto prompt = renderer.pairwise(task.query, task.candidates[i].text, task.candidates[j].text);
    first_wins[k] = judge(score_prompt(model, prompt.tokens, prompt.positions, answers, ablation)) ? 1 : 0;
  });
  RerankResult result;
  result.scores.assign(n, 0.0);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (first_wins[k]) result.scores[pairs[k].first] += 1.0;
  }
  result.judged_prompts = pairs.size();
  result.order = order_by_score(result.scores);
  return result;
}

nlohmann::ordered_json KnockoutPlan::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    nlohmann::ordered_json r;
    r["name"] = row.name;
    r["seeds"] = row.seeds;
    auto& sels = r["selections"] = nlohmann::ordered_json::array();
    for (const auto& sel : row.selections) {
      auto s = nlohmann::ordered_json::array();
      for (const auto& h : sel) s.push_back({{"head", {h.layer, h.head}}, {"positions", group_name(h.group)}});
      sels.push_back(std::move(s));
    }
    j.push_back(std::move(r));
  }
  return j;
}

void KnockoutPlan::validate(const ModelConfig& config) const {
  if (rows.empty()) throw ConfigError("knockout plan has no rows");
  for (const auto& row : rows) {
    if (row.selections.empty()) throw ConfigError("knockout row '" + row.name + "' has no selection");
    for (const auto& sel : row.selections) {
      for (const auto& h : sel) {
        if (h.layer < 0 || h.layer >= config.n_layers || h.head < 0 || h.head >= config.n_heads) {
          throw ConfigError("knockout row '" + row.name + "' references L" + std::to_string(h.layer) + "H" +
                            std::to_string(h.head) + ", outside the model");
        }
      }
    }
  }
}

std::vector<HeadAblation> random_heads(const ModelConfig& config, std::size_t k, std::uint64_t seed) {
  const std::size_t total = static_cast<std::size_t>(config.n_layers) * static_cast<std::size_t>(config.n_heads);
  if (k > total) throw ConfigError("cannot draw " + std::to_string(k) + " of " + std::to_string(total) + " heads");
  Rng rng(derive_seed(seed, "random-heads"));
  auto picks = sample_indices(total, k, rng);
  std::sort(picks.begin(), picks.end());
  std::vector<HeadAblation> out;
  for (auto p : picks) {
    out.push_back({static_cast<int>(p) / config.n_heads, static_cast<int>(p) % config.n_heads, PositionGroup::all});
  }
  return out;
}

namespace {

std::string group_label(PositionGroup g) {
  switch (g) {
    case PositionGroup::documents: return "Doc";
    case PositionGroup::query: return "Query";
    case PositionGroup::instruction: return "Inst";
    case PositionGroup::last: return "Last";
    default: return std::string(group_name(g));
  }
}

}  // namespace

KnockoutPlan make_knockout_plan(const ModelConfig& config, const std::map<PositionGroup, IEGrid>& head_grids,
                                const PlanOptions& options) {
  KnockoutPlan plan;
  plan.rows.push_back({"Full model", {{}}, {}});
  KnockoutRow random{"Random-" + std::to_string(options.random_k), {}, {}};
  for (std::size_t s = 0; s < options.random_seeds; ++s) {
    const std::uint64_t seed = options.seed + s;
    random.seeds.push_back(seed);
    random.selections.push_back(random_heads(config, options.random_k, seed));
  }
  if (!random.selections.empty()) plan.rows.push_back(std::move(random));

  const PositionGroup order[] = {PositionGroup::documents, PositionGroup::query, PositionGroup::instruction,
                                 PositionGroup::last};
  std::vector<HeadAblation> mixed;
  std::size_t groups_found = 0;
  for (PositionGroup g : order) {
    auto it = head_grids.find(g);
    if (it == head_grids.end()) continue;
    ++groups_found;
    std::vector<HeadAblation> sel;
    for (const auto& h : top_heads(it->second, options.group_k)) sel.push_back({h.layer, h.head, g});
    mixed.insert(mixed.end(), sel.begin(), sel.end());
    plan.rows.push_back({group_label(g) + "-" + std::to_string(options.group_k), {std::move(sel)}, {}});
  }
  if (groups_found == 4) {
    plan.rows.push_back({"Mixed-" + std::to_string(4 * options.group_k), {std::move(mixed)}, {}});
  }
  plan.validate(config);
  return plan;
}

nlohmann::ordered_json KnockoutReport::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["judgment_samples"] = judgment_samples;
  j["ranking_queries"] = ranking_queries;
  j["first_stage_ndcg@10"] = first_stage_ndcg ? nlohmann::ordered_json(*first_stage_ndcg) : nlohmann::ordered_json();
  j["pairwise_rerank_protocol"] = "all ordered pairs, win count, ties by first-stage order";
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < row_names.size(); ++r) {
    nlohmann::ordered_json row;
    row["name"] = row_names[r];
    auto& cols = row["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : cells[r]) {
      cols.push_back({{"task", c.task}, {"style", c.style}, {"metric", c.metric}, {"value", c.value},
                      {"change_pct", c.change}});
    }
    rows.push_back(std::move(row));
  }
  return j;
}

std::string KnockoutReport::to_table() const {
  auto fmt = [](double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
  };
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header{"Ablation"};
  if (!cells.empty()) {
    for (const auto& c : cells.front()) header.push_back(c.metric + " " + c.style);
  }
  table.push_back(header);
  for (std::size_t r = 0; r < row_names.size(); ++r) {
    std::vector<std::string> line{row_names[r]};
    for (const auto& c : cells[r]) {
      std::string v = fmt(c.value, 2);
      if (r > 0) v += " (" + std::string(c.change > 0 ? "+" : "") + fmt(c.change, 1) + "%)";
      line.push_back(std::move(v));
    }
    table.push_back(std::move(line));
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], line[i].size());
  }
  std::ostringstream out;
  for (const auto& line : table) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      out << std::left << std::setw(static_cast<int>(widths[i]) + (i + 1 < line.size() ? 2 : 0)) << line[i];
    }
    out << '\n';
  }
  if (first_stage_ndcg) out << "first-stage NDCG@10: " << fmt(*first_stage_ndcg, 4) << '\n';
  return out.str();
}

namespace {

std::vector<CacheKey> plan_keys(const KnockoutPlan& plan) {
  std::set<CacheKey> keys;
  for (const auto& row : plan.rows) {
    for (const auto& sel : row.selections) {
      for (const auto& h : sel) keys.insert(CacheKey{Site::head_out, h.layer, h.head});
    }
  }
  return {keys.begin(), keys.end()};
}

struct Prompt {
  std::vector<TokenId> tokens;
  PositionMap layout;
};

MeanCache means_over(const Model& model, const std::vector<Prompt>& prompts, std::span<const CacheKey> keys) {
  std::vector<std::vector<TokenId>> seqs;
  std::vector<PositionMap> layouts;
  for (const auto& p : prompts) {
    seqs.push_back(p.tokens);
    layouts.push_back(p.layout);
  }
  return compute_mean_cache(model, seqs, layouts, keys, 1);
}

// Runs one evaluation unit (a query) under every selection of every row.
// Returns values[row][selection].
template <typename Fn>
std::vector<std::vector<double>> per_selection(const KnockoutPlan& plan, const MeanCache* means, Fn&& evaluate) {
  std::vector<std::vector<double>> out(plan.rows.size());
  for (std::size_t r = 0; r < plan.rows.size(); ++r) {
    for (const auto& sel : plan.rows[r].selections) out[r].push_back(evaluate(Ablation{sel, means}));
  }
  return out;
}

}  // namespace

double judgment_f1(const Model& model, const PromptRenderer& renderer, std::span<const Triplet> triplets,
                   PromptStyle style, std::span<const HeadAblation> heads, std::size_t threads) {
  KnockoutPlan plan;
  plan.rows.push_back({"selection", {std::vector<HeadAblation>(heads.begin(), heads.end())}, {}});
  KnockoutInputs inputs;
  inputs.judgment.assign(triplets.begin(), triplets.end());
  inputs.styles = {style};
  return knockout_eval(model, renderer, plan, inputs, threads).cells[0][0].value;
}

KnockoutReport knockout_eval(const Model& model, const PromptRenderer& renderer, const KnockoutPlan& plan,
                             const KnockoutInputs& inputs, std::size_t threads) {
  plan.validate(model.config());
  const auto keys = plan_keys(plan);
  KnockoutReport report;
  report.model = model.id();
  report.judgment_samples = 2 * inputs.judgment.size();
  report.ranking_queries = inputs.ranking.size();
  for (const auto& row : plan.rows) report.row_names.push_back(row.name);
  report.cells.resize(plan.rows.size());

  auto add_column = [&](const std::string& task, PromptStyle style, const std::string& metric,
                        const std::vector<std::vector<double>>& row_values) {
    for (std::size_t r = 0; r < plan.rows.size(); ++r) {
      KnockoutCell cell{task, std::string(style_name(style)), metric, 0.0, 0.0};
      double sum = 0.0;
      for (double v : row_values[r]) sum += v;
      cell.value = row_values[r].empty() ? 0.0 : sum / static_cast<double>(row_values[r].size());
      report.cells[r].push_back(cell);
    }
  };

  if (!inputs.judgment.empty()) {
    for (PromptStyle style : inputs.styles) {
      // preds[query][row][selection] = {clean prediction, corrupted prediction}
      std::vector<std::vector<std::vector<std::pair<bool, bool>>>> preds(inputs.judgment.size());
      parallel_for(inputs.judgment.size(), threads, [&](std::size_t q) {
        const PromptPair pair = renderer.render(inputs.judgment[q], style);
        std::optional<MeanCache> means;
        if (!keys.empty()) means = means_over(model, {{pair.clean, pair.positions}, {pair.corrupted, pair.positions}}, keys);
        auto& out = preds[q];
        out.resize(plan.rows.size());
        for (std::size_t r = 0; r < plan.rows.size(); ++r) {
          for (const auto& sel : plan.rows[r].selections) {
            const Ablation ab{sel, means ? &*means : nullptr};
            out[r].push_back({judge(score_prompt(model, pair.clean, pair.positions, pair.answers, ab)),
                              judge(score_prompt(model, pair.corrupted, pair.positions, pair.answers, ab))});
          }
        }
      });
      std::vector<std::vector<double>> values(plan.rows.size());
      for (std::size_t r = 0; r < plan.rows.size(); ++r) {
        for (std::size_t s = 0; s < plan.rows[r].selections.size(); ++s) {
          std::vector<bool> p, g;
          for (const auto& q : preds) {
            p.push_back(q[r][s].first);
            g.push_back(true);
            p.push_back(q[r][s].second);
            g.push_back(false);
          }
          values[r].push_back(f1(p, g));
        }
      }
      add_column("judgment", style, "F1", values);
    }
  }

  if (!inputs.ranking.empty()) {
    double first_stage = 0.0;
    for (const auto& task : inputs.ranking) first_stage += ndcg_at_k(task.first_stage_ids(), task.qrels, 10);
    report.first_stage_ndcg = first_stage / static_cast<double>(inputs.ranking.size());
    for (PromptStyle style : inputs.styles) {
      std::vector<std::vector<std::vector<double>>> per_query(inputs.ranking.size());
      parallel_for(inputs.ranking.size(), threads, [&](std::size_t q) {
        const RankingTask& task = inputs.ranking[q];
        std::optional<MeanCache> means;
        if (!keys.empty()) {
          std::vector<Prompt> prompts;
          const std::size_t n = task.candidates.size();
          for (std::size_t i = 0; i < n; ++i) {
            auto rp = style == PromptStyle::pointwise
                          ? renderer.pointwise(task.query, task.candidates[i].text)
                          : renderer.pairwise(task.query, task.candidates[i].text, task.candidates[(i + 1) % n].text);
            prompts.push_back({std::move(rp.tokens), std::move(rp.positions)});
          }
          means = means_over(model, prompts, keys);
        }
        per_query[q] = per_selection(plan, means ? &*means : nullptr, [&](const Ablation& ab) {
          const RerankResult rr = style == PromptStyle::pointwise ? rerank_pointwise(model, renderer, task, ab)
                                                                  : rerank_pairwise(model, renderer, task, ab);
          std::vector<std::string> ids;
          for (auto i : rr.order) ids.push_back(task.candidates[i].id);
          return ndcg_at_k(ids, task.qrels, 10);
        });
      });
      std::vector<std::vector<double>> values(plan.rows.size());
      for (std::size_t r = 0; r < plan.rows.size(); ++r) {
        for (std::size_t s = 0; s < plan.rows[r].selections.size(); ++s) {
          double sum = 0.0;
          for (const auto& q : per_query) sum += q[r][s];
          values[r].push_back(sum / static_cast<double>(per_query.size()));
        }
      }
      add_column("reranking", style, "NDCG@10", values);
    }
  }

  for (std::size_t r = 0; r < report.cells.size(); ++r) {
    for (std::size_t c = 0; c < report.cells[r].size(); ++c) {
      report.cells[r][c].change = percent_change(report.cells[0][c].value, report.cells[r][c].value);
    }
  }
  return report;
}

}  // namespace relprobe
