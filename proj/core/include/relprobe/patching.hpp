#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/intervention.hpp"
#include "relprobe/prompt.hpp"

namespace relprobe {

// logit(yes) - logit(no).
double logit_diff(std::span<const float> logits, const AnswerTokens& answers);

struct RunTriple {
  double clean = 0.0;
  double corrupted = 0.0;
  double patched = 0.0;
};

// (patched - corrupted) / (clean - corrupted); nullopt when
// |clean - corrupted| <= eps. Not clamped.
std::optional<double> indirect_effect(const RunTriple& triple, double eps = 1e-3);

// Mean indirect effect over a dataset, rows = layers.
struct IEGrid {
  std::string site;
  std::string style;
  std::string model;
  std::string dataset;
  std::vector<int> rows;
  std::vector<std::string> cols;
  std::vector<std::vector<double>> mean_ie;
  std::vector<std::vector<std::size_t>> counts;
  std::size_t prompts = 0;
  std::size_t excluded = 0;
  double eps = 1e-3;

  std::size_t column(const std::string& name) const;  // throws ConfigError
  double at(int layer, const std::string& col) const;
  // Copy with every mean clamped to [0, 1].
  IEGrid clamped() const;

  nlohmann::ordered_json to_json() const;
  static IEGrid from_json(const nlohmann::json& j);
  // Flat rows "layer,col,mean_ie,n".
  std::string to_csv() const;
};

enum class CachePrecision { f32, bf16 };

struct TraceOptions {
  double eps = 1e-3;
  std::size_t threads = 1;
  // Adds document_a / document_b columns next to documents (pairwise).
  bool split_documents = false;
  // Rounds donor activations before patching.
  CachePrecision cache_precision = CachePrecision::f32;
  bool renormalize_patterns = false;
  std::string dataset;
};

// Layer x position-group grids, one per site (attn_out, mlp_out or resid).
// Columns default to documents, query, instruction, last.
std::vector<IEGrid> trace_components(const Model& model, std::span<const PromptPair> pairs, std::span<const Site> sites,
                                     const TraceOptions& options = {},
                                     std::vector<PositionGroup> groups = {});

// Layer x head grid of head_out restore patches at one position group.
IEGrid trace_heads(const Model& model, std::span<const PromptPair> pairs, PositionGroup group,
                   const TraceOptions& options = {});

// Layer x head grid of attn_pattern restore patches on the cells where the
// query span attends to the document span(s).
IEGrid trace_attention_scores(const Model& model, std::span<const PromptPair> pairs, const TraceOptions& options = {});

// Clean and corrupted logit differences of one pair.
RunTriple endpoint_runs(const Model& model, const PromptPair& pair);

}  // namespace relprobe
