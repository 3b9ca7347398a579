#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/heads.hpp"
#include "relprobe/intervention.hpp"
#include "relprobe/patching.hpp"
#include "relprobe/prompt.hpp"
#include "relprobe/retrieval.hpp"

namespace relprobe {

// Mean-ablated heads plus the mean activations they are replaced with. An
// empty head list is the unmodified model.
struct Ablation {
  std::vector<HeadAblation> heads;
  const MeanCache* means = nullptr;
};

double score_prompt(const Model& model, std::span<const TokenId> tokens, const PositionMap& layout,
                    const AnswerTokens& answers, const Ablation& ablation = {});

// relevant iff LD > 0; a zero LD counts as nonrelevant.
inline bool judge(double logit_difference) { return logit_difference > 0.0; }

// F1 of the positive class; 0 when precision + recall = 0.
double f1(const std::vector<bool>& predictions, const std::vector<bool>& golds);

// Gain 2^rel - 1, discount log2(rank + 1), normalized by the ideal DCG of the
// judged candidates; 0 when the ideal DCG is 0. Unjudged documents gain 0.
double ndcg_at_k(std::span<const std::string> ranking, const std::map<std::string, int>& qrels, int k = 10);

// Percentage change of `value` relative to `full` (negative = decrease).
double percent_change(double full, double value);

struct RankingTask {
  std::string query_id;
  std::string query;
  std::vector<TextRecord> candidates;  // first-stage order
  std::map<std::string, int> qrels;

  std::vector<std::string> first_stage_ids() const;
};

// Tasks from a first-stage run: top `depth` candidates per judged query with
// at least two candidates found in the corpus.
std::vector<RankingTask> build_ranking_tasks(const std::vector<TextRecord>& queries,
                                             const std::vector<TextRecord>& corpus, const Qrels& qrels,
                                             const std::vector<RunEntry>& run, std::size_t depth = 20);

struct RerankResult {
  std::vector<std::size_t> order;  // candidate indices, best first
  std::vector<double> scores;      // LD (pointwise) or win count (pairwise), per candidate
  std::size_t judged_prompts = 0;
};

// Descending LD, ties by first-stage order.
RerankResult rerank_pointwise(const Model& model, const PromptRenderer& renderer, const RankingTask& task,
                              const Ablation& ablation = {}, std::size_t threads = 1);

// Every ordered pair (i, j), i != j, is judged with i as the first document;
// i earns a win on "yes". Ranked by wins, ties by first-stage order.
RerankResult rerank_pairwise(const Model& model, const PromptRenderer& renderer, const RankingTask& task,
                             const Ablation& ablation = {}, std::size_t threads = 1);

// Ranking order from scores, descending, ties by index.
std::vector<std::size_t> order_by_score(std::span<const double> scores);

// One plan row. Random rows hold one selection per seed and report the mean.
struct KnockoutRow {
  std::string name;
  std::vector<std::vector<HeadAblation>> selections;
  std::vector<std::uint64_t> seeds;
};

struct KnockoutPlan {
  std::vector<KnockoutRow> rows;

  nlohmann::ordered_json to_json() const;
  void validate(const ModelConfig& config) const;
};

struct PlanOptions {
  std::size_t group_k = 20;
  std::size_t random_k = 80;
  std::size_t random_seeds = 5;
  std::uint64_t seed = 0;
};

// Full, Random-k, Doc/Query/Inst/Last-k from the head grids present in
// `head_grids`, and Mixed when all four are present.
KnockoutPlan make_knockout_plan(const ModelConfig& config, const std::map<PositionGroup, IEGrid>& head_grids,
                                const PlanOptions& options = {});

// k heads drawn uniformly without replacement, ablated at all positions.
std::vector<HeadAblation> random_heads(const ModelConfig& config, std::size_t k, std::uint64_t seed);

struct KnockoutCell {
  std::string task;   // "judgment" or "reranking"
  std::string style;  // "pointwise" or "pairwise"
  std::string metric;
  double value = 0.0;
  double change = 0.0;  // percent vs the first (full) row
};

struct KnockoutReport {
  std::string model;
  std::vector<std::string> row_names;
  std::vector<std::vector<KnockoutCell>> cells;  // [row][column]
  std::optional<double> first_stage_ndcg;
  std::size_t judgment_samples = 0;
  std::size_t ranking_queries = 0;

  nlohmann::ordered_json to_json() const;
  std::string to_table() const;
};

struct KnockoutInputs {
  std::vector<Triplet> judgment;  // each triplet gives one relevant and one nonrelevant prompt
  std::vector<RankingTask> ranking;
  std::vector<PromptStyle> styles = {PromptStyle::pointwise, PromptStyle::pairwise};
};

// Judgment F1 per style and reranking NDCG@10 per style for every plan row.
// Mean activations are computed per query: over the relevant and nonrelevant
// prompt for judgment and over the candidate prompts for reranking. The
// first plan row is the reference for percentage changes.
KnockoutReport knockout_eval(const Model& model, const PromptRenderer& renderer, const KnockoutPlan& plan,
                             const KnockoutInputs& inputs, std::size_t threads = 1);

// Judgment F1 of one ablation on one style.
double judgment_f1(const Model& model, const PromptRenderer& renderer, std::span<const Triplet> triplets,
                   PromptStyle style, std::span<const HeadAblation> heads, std::size_t threads = 1);

}  // namespace relprobe
