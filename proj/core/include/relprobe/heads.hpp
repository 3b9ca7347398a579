#pragma once

#include <compare>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/model.hpp"
#include "relprobe/patching.hpp"
#include "relprobe/positions.hpp"
#include "relprobe/prompt.hpp"

namespace relprobe {

struct HeadId {
  int layer = 0;
  int head = 0;

  std::string to_string() const { return "L" + std::to_string(layer) + "H" + std::to_string(head); }
  auto operator<=>(const HeadId&) const = default;
};

// Parses "L3H2".
HeadId parse_head(std::string_view text);

struct TokenLogit {
  TokenId token = 0;
  double logit = 0.0;
};

// Top-k entries of a logit vector, descending, ties by token id.
std::vector<TokenLogit> topk_logits(std::span<const float> logits, std::size_t k);

// Top-k of W_U a + b for the head's output at `position`.
std::vector<TokenLogit> head_unembed_topk(const Model& model, const ActivationCache& cache, HeadId head, int position,
                                          std::size_t k);

// Sum over query rows of the largest attention weight into the document
// columns.
double attention_interaction_s(const Matrix& pattern, Span query, Span document);

struct HeadInteraction {
  HeadId head;
  double s_pos = 0.0;
  double s_neg = 0.0;
  double S = 0.0;
};

struct InteractionReport {
  std::string style;
  std::size_t samples = 0;
  std::vector<HeadInteraction> heads;  // layer-major

  nlohmann::ordered_json to_json() const;
};

// Pointwise: one pass on the positive prompt and one on the negative prompt.
// Pairwise: one pass on the clean prompt, s_pos from the first (positive)
// document span and s_neg from the second.
std::vector<HeadInteraction> interaction_score(const Model& model, const PromptPair& pair);

// Per-head means over a dataset.
InteractionReport mean_interaction(const Model& model, std::span<const PromptPair> pairs, std::size_t threads = 1);

// Sample Pearson correlation; throws DomainError for fewer than two points or
// zero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);
// Pearson on average ranks.
double spearman(std::span<const double> xs, std::span<const double> ys);

enum class RboVariant { extrapolated, truncated };

// Rank-biased overlap of two rankings with persistence p in (0, 1).
// Extrapolated: the point estimate over the full depth of both lists.
// Truncated: (1 - p) * sum_d p^(d-1) |A_d| / d up to the shorter depth.
// Throws DomainError for duplicates or p outside (0, 1).
double rbo(std::span<const int> a, std::span<const int> b, double p, RboVariant variant = RboVariant::extrapolated);

// Layers by descending mean IE in `column`; ties by layer index.
std::vector<int> rank_layers_by_ie(const IEGrid& grid, const std::string& column);

struct RboReport {
  std::string site;
  std::string column;
  double p = 0.7;
  double value = 0.0;
  std::vector<int> ranking_a;
  std::vector<int> ranking_b;

  nlohmann::ordered_json to_json() const;
};

// Compares the layer rankings of two grids (e.g. pointwise vs pairwise).
// Throws DomainError when the grids cover different layers.
RboReport compare_layer_rankings(const IEGrid& a, const IEGrid& b, const std::string& column, double p = 0.7,
                                 RboVariant variant = RboVariant::extrapolated);

// Joins head-output IE, attention-score IE and interaction scores per head
// and correlates them over heads.
nlohmann::ordered_json head_report(const IEGrid& ie_output, const IEGrid& ie_attn,
                                   const InteractionReport& interaction);

// Rank-1 unembedding tokens of the given heads at the last position of each
// clean prompt.
nlohmann::ordered_json unembed_report(const Model& model, std::span<const PromptPair> pairs,
                                      std::span<const HeadId> heads, std::size_t k,
                                      const Tokenizer* tokenizer = nullptr, std::size_t threads = 1);

// Heads sorted by descending mean IE, ties by (layer, head).
std::vector<HeadId> top_heads(const IEGrid& head_grid, std::size_t k);

}  // namespace relprobe
