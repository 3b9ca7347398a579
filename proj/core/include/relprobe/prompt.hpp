#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/model.hpp"
#include "relprobe/positions.hpp"
#include "relprobe/tokenizer.hpp"

namespace relprobe {

enum class PromptStyle { pointwise, pairwise };

std::string_view style_name(PromptStyle style);
PromptStyle parse_style(std::string_view name);

struct Triplet {
  std::string query_id;
  std::string query;
  std::string positive;
  std::string negative;
  std::string positive_id;
  std::string negative_id;

  // Throws ConfigError unless texts are nonempty and the documents differ.
  void validate() const;
  nlohmann::json to_json() const;
  static Triplet from_json(const nlohmann::json& j);
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// JSON lines, one triplet per line; lines starting with '#' are comments.
std::vector<Triplet> read_triplets(const std::string& path);
void write_triplets(const std::string& path, std::span<const Triplet> triplets, const std::string& header = {});

// Prompt wording. Placeholders: {document} and {query} for pointwise;
// {document_a}, {document_b} and {query} for pairwise. Documents must come
// before the query and the query must be followed by instruction text.
struct PromptTemplate {
  std::string pointwise =
      "Document: {document}\nQuery: {query}\n"
      "Does the document answer the query? Answer with one word, yes or no.\nAnswer:";
  std::string pairwise =
      "Document A: {document_a}\nDocument B: {document_b}\nQuery: {query}\n"
      "Is the first document more relevant than the second to the query? Answer with one word, yes or no.\n"
      "Answer:";
  // Chat wrapper; the prefix is prepended to the first literal and the
  // suffix appended to the final instruction.
  std::string chat_prefix;
  std::string chat_suffix;
  std::string yes = "yes";
  std::string no = "no";
  // Whether answers carry a leading space; unset = infer from the prompt end.
  std::optional<bool> answer_leading_space;
  // Truncate each document to this many tokens (0 = no limit).
  int max_document_tokens = 0;

  static PromptTemplate from_json(const nlohmann::json& j);
  static PromptTemplate load(const std::string& path);
  nlohmann::json to_json() const;
};

struct AnswerTokens {
  TokenId yes = 0;
  TokenId no = 0;
};

// Resolves the single-token ids for the yes/no answers; throws ConfigError
// naming an answer that does not encode to exactly one token.
AnswerTokens resolve_answers(const Tokenizer& tokenizer, const PromptTemplate& tmpl, PromptStyle style);

struct RenderedPrompt {
  std::vector<TokenId> tokens;
  PositionMap positions;
};

struct PromptPair {
  PromptStyle style = PromptStyle::pointwise;
  std::string query_id;
  std::vector<TokenId> clean;
  std::vector<TokenId> corrupted;
  PositionMap positions;
  AnswerTokens answers;

  // Equal lengths, identical tokens outside document spans, valid map.
  void validate() const;
};

// Builds prompts by concatenating separately tokenized template literals and
// content, so span boundaries are exact.
class PromptRenderer {
 public:
  PromptRenderer(const Tokenizer& tokenizer, PromptTemplate tmpl);

  const PromptTemplate& prompt_template() const { return template_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  AnswerTokens answers(PromptStyle style) const;

  // Tokens of a document or query as inserted after the given literal.
  std::vector<TokenId> content_tokens(std::string_view text) const;

  RenderedPrompt pointwise(std::string_view query, std::span<const TokenId> document) const;
  RenderedPrompt pairwise(std::string_view query, std::span<const TokenId> document_a,
                          std::span<const TokenId> document_b) const;
  RenderedPrompt pointwise(std::string_view query, std::string_view document) const;
  RenderedPrompt pairwise(std::string_view query, std::string_view document_a, std::string_view document_b) const;

  // Clean uses the positive document, corrupted the negative one.
  PromptPair render_pointwise(const Triplet& triplet) const;
  // Clean puts the positive document first, corrupted swaps the two.
  PromptPair render_pairwise(const Triplet& triplet) const;
  PromptPair render(const Triplet& triplet, PromptStyle style) const;

 private:
  struct Piece {
    std::string literal;          // literal text before the placeholder
    std::string placeholder;      // empty for the trailing literal
    bool content_leading_space = false;
  };
  std::vector<Piece> parse(const std::string& text, const std::vector<std::string>& expected) const;
  RenderedPrompt assemble(const std::vector<Piece>& pieces, const std::vector<std::vector<TokenId>>& contents) const;

  const Tokenizer& tokenizer_;
  PromptTemplate template_;
  std::vector<Piece> pointwise_pieces_;
  std::vector<Piece> pairwise_pieces_;
};

// Equal-length prefix truncation of both documents.
std::pair<std::vector<TokenId>, std::vector<TokenId>> truncate_pair(std::span<const TokenId> positive,
                                                                     std::span<const TokenId> negative);

// Exchanges the contents of the two (equal-length) document spans.
std::vector<TokenId> swap_documents(std::span<const TokenId> tokens, const PositionMap& positions);

}  // namespace relprobe
