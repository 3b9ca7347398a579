#include "relprobe/prompt.hpp"

#include <algorithm>
#include <fstream>

#include "relprobe/errors.hpp"

namespace relprobe {

std::string_view style_name(PromptStyle style) {
  return style == PromptStyle::pointwise ? "pointwise" : "pairwise";
}

PromptStyle parse_style(std::string_view name) {
  if (name == "pointwise") return PromptStyle::pointwise;
  if (name == "pairwise") return PromptStyle::pairwise;
  throw ConfigError("unknown prompt style '" + std::string(name) + "'");
}

void Triplet::validate() const {
  if (query.empty() || positive.empty() || negative.empty()) {
    throw ConfigError("triplet " + query_id + " has an empty text");
  }
  if (positive == negative) throw ConfigError("triplet " + query_id + " uses the same document twice");
}

nlohmann::json Triplet::to_json() const {
  nlohmann::ordered_json j;
  j["query_id"] = query_id;
  j["query"] = query;
  j["positive"] = positive;
  j["negative"] = negative;
  j["positive_id"] = positive_id;
  j["negative_id"] = negative_id;
  return j;
}

Triplet Triplet::from_json(const nlohmann::json& j) {
  Triplet t;
  t.query_id = j.value("query_id", std::string());
  t.query = j.at("query").get<std::string>();
  t.positive = j.at("positive").get<std::string>();
  t.negative = j.at("negative").get<std::string>();
  t.positive_id = j.value("positive_id", std::string());
  t.negative_id = j.value("negative_id", std::string());
  return t;
}

std::vector<Triplet> read_triplets(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open triplet file " + path);
  std::vector<Triplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    try {
      out.push_back(Triplet::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_triplets(const std::string& path, std::span<const Triplet> triplets, const std::string& header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path);
  if (!header.empty()) out << "# " << header << "\n";
  for (const auto& t : triplets) out << t.to_json().dump() << "\n";
}

PromptTemplate PromptTemplate::from_json(const nlohmann::json& j) {
  PromptTemplate t;
  t.pointwise = j.value("pointwise", t.pointwise);
  t.pairwise = j.value("pairwise", t.pairwise);
  t.chat_prefix = j.value("chat_prefix", t.chat_prefix);
  t.chat_suffix = j.value("chat_suffix", t.chat_suffix);
  t.yes = j.value("yes", t.yes);
  t.no = j.value("no", t.no);
  if (j.contains("answer_leading_space") && !j.at("answer_leading_space").is_null()) {
    t.answer_leading_space = j.at("answer_leading_space").get<bool>();
  }
  t.max_document_tokens = j.value("max_document_tokens", 0);
  return t;
}

PromptTemplate PromptTemplate::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open template config " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed template config " + path + ": " + e.what());
  }
}

nlohmann::json PromptTemplate::to_json() const {
  nlohmann::ordered_json j;
  j["pointwise"] = pointwise;
  j["pairwise"] = pairwise;
  j["chat_prefix"] = chat_prefix;
  j["chat_suffix"] = chat_suffix;
  j["yes"] = yes;
  j["no"] = no;
  j["answer_leading_space"] = answer_leading_space ? nlohmann::json(*answer_leading_space) : nlohmann::json(nullptr);
  j["max_document_tokens"] = max_document_tokens;
  return j;
}

namespace {

std::string trailing_text(const PromptTemplate& tmpl, PromptStyle style) {
  const std::string& text = style == PromptStyle::pointwise ? tmpl.pointwise : tmpl.pairwise;
  const auto close = text.rfind('}');
  return (close == std::string::npos ? text : text.substr(close + 1)) + tmpl.chat_suffix;
}

bool ends_with_space(const std::string& s) {
  return !s.empty() && (s.back() == ' ' || s.back() == '\n' || s.back() == '\t' || s.back() == '\r');
}

}  // namespace

AnswerTokens resolve_answers(const Tokenizer& tokenizer, const PromptTemplate& tmpl, PromptStyle style) {
  const bool leading_space = tmpl.answer_leading_space.value_or(!ends_with_space(trailing_text(tmpl, style)));
  auto resolve = [&](const std::string& word) {
    const std::string text = (leading_space ? " " : "") + word;
    const auto ids = tokenizer.encode(text);
    if (ids.size() != 1) {
      throw ConfigError("answer '" + text + "' is not a single token (encodes to " + std::to_string(ids.size()) +
                        " tokens)");
    }
    return ids.front();
  };
  AnswerTokens out{resolve(tmpl.yes), resolve(tmpl.no)};
  if (out.yes == out.no) throw ConfigError("yes and no answers resolve to the same token");
  return out;
}

void PromptPair::validate() const {
  if (clean.size() != corrupted.size()) throw ShapeError("clean and corrupted prompts differ in length");
  if (positions.length() != static_cast<int>(clean.size())) throw ShapeError("position map length mismatch");
  positions.validate_prompt();
  const auto docs = positions.documents();
  for (int i = 0; i < static_cast<int>(clean.size()); ++i) {
    const bool in_doc = std::any_of(docs.begin(), docs.end(), [&](Span s) { return s.contains(i); });
    if (!in_doc && clean[i] != corrupted[i]) {
      throw ShapeError("clean and corrupted prompts differ outside the document spans at " + std::to_string(i));
    }
  }
}

PromptRenderer::PromptRenderer(const Tokenizer& tokenizer, PromptTemplate tmpl)
    : tokenizer_(tokenizer), template_(std::move(tmpl)) {
  pointwise_pieces_ = parse(template_.pointwise, {"document", "query"});
  pairwise_pieces_ = parse(template_.pairwise, {"document_a", "document_b", "query"});
  if (pairwise_pieces_[0].content_leading_space != pairwise_pieces_[1].content_leading_space) {
    throw ConfigError("pairwise template must separate both documents from their labels the same way");
  }
}

std::vector<PromptRenderer::Piece> PromptRenderer::parse(const std::string& text,
                                                         const std::vector<std::string>& expected) const {
  static const std::vector<std::string> kKnown = {"document", "document_a", "document_b", "query"};
  std::vector<Piece> pieces;
  std::string literal;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      const auto close = text.find('}', i);
      if (close != std::string::npos) {
        const std::string name = text.substr(i + 1, close - i - 1);
        if (std::find(kKnown.begin(), kKnown.end(), name) != kKnown.end()) {
          Piece piece;
          piece.literal = literal;
          piece.placeholder = name;
          if (!piece.literal.empty() && piece.literal.back() == ' ') {
            piece.literal.pop_back();
            piece.content_leading_space = true;
          }
          pieces.push_back(std::move(piece));
          literal.clear();
          i = close + 1;
          continue;
        }
      }
    }
    literal.push_back(text[i]);
    ++i;
  }
  for (const auto& name : expected) {
    const auto count = std::count_if(pieces.begin(), pieces.end(), [&](const Piece& p) { return p.placeholder == name; });
    if (count == 0) throw ConfigError("template missing required placeholder {" + name + "}");
    if (count > 1) throw ConfigError("template repeats placeholder {" + name + "}");
  }
  if (pieces.size() != expected.size()) throw ConfigError("template contains placeholders not valid for this style");
  for (std::size_t k = 0; k < expected.size(); ++k) {
    if (pieces[k].placeholder != expected[k]) {
      throw ConfigError("template placeholders must appear in the order documents, then {query}");
    }
  }
  pieces.front().literal = template_.chat_prefix + pieces.front().literal;
  Piece tail;
  tail.literal = literal + template_.chat_suffix;
  if (tail.literal.empty()) throw ConfigError("template needs instruction text after {query}");
  pieces.push_back(std::move(tail));
  return pieces;
}

AnswerTokens PromptRenderer::answers(PromptStyle style) const { return resolve_answers(tokenizer_, template_, style); }

std::vector<TokenId> PromptRenderer::content_tokens(std::string_view text) const {
  const bool space = pointwise_pieces_.front().content_leading_space;
  auto ids = tokenizer_.encode((space ? " " : "") + std::string(text));
  return ids;
}

RenderedPrompt PromptRenderer::assemble(const std::vector<Piece>& pieces,
                                        const std::vector<std::vector<TokenId>>& contents) const {
  RenderedPrompt out;
  std::vector<Segment> segments;
  auto append = [&](const std::vector<TokenId>& ids, SegmentKind kind) {
    const int begin = static_cast<int>(out.tokens.size());
    out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
    segments.push_back(Segment{kind, Span{begin, static_cast<int>(out.tokens.size())}});
  };
  for (std::size_t k = 0; k + 1 < pieces.size(); ++k) {
    append(tokenizer_.encode(pieces[k].literal), SegmentKind::literal);
    const bool is_query = pieces[k].placeholder == "query";
    if (contents[k].empty()) throw ConfigError("empty " + pieces[k].placeholder + " content");
    append(contents[k], is_query ? SegmentKind::query : SegmentKind::document);
  }
  auto tail = tokenizer_.encode(pieces.back().literal);
  if (tail.size() < 2) throw ConfigError("instruction text after {query} must span at least two tokens");
  const TokenId last = tail.back();
  tail.pop_back();
  append(tail, SegmentKind::instruction);
  append({last}, SegmentKind::last);
  out.positions = PositionMap(std::move(segments));
  return out;
}

namespace {

std::vector<TokenId> capped(std::vector<TokenId> ids, int max_tokens) {
  if (max_tokens > 0 && ids.size() > static_cast<std::size_t>(max_tokens)) ids.resize(max_tokens);
  return ids;
}

}  // namespace

RenderedPrompt PromptRenderer::pointwise(std::string_view query, std::span<const TokenId> document) const {
  const bool qspace = pointwise_pieces_[1].content_leading_space;
  return assemble(pointwise_pieces_, {std::vector<TokenId>(document.begin(), document.end()),
                                      tokenizer_.encode((qspace ? " " : "") + std::string(query))});
}

RenderedPrompt PromptRenderer::pairwise(std::string_view query, std::span<const TokenId> document_a,
                                        std::span<const TokenId> document_b) const {
  const bool qspace = pairwise_pieces_[2].content_leading_space;
  return assemble(pairwise_pieces_, {std::vector<TokenId>(document_a.begin(), document_a.end()),
                                     std::vector<TokenId>(document_b.begin(), document_b.end()),
                                     tokenizer_.encode((qspace ? " " : "") + std::string(query))});
}

RenderedPrompt PromptRenderer::pointwise(std::string_view query, std::string_view document) const {
  return pointwise(query, capped(content_tokens(document), template_.max_document_tokens));
}

RenderedPrompt PromptRenderer::pairwise(std::string_view query, std::string_view document_a,
                                        std::string_view document_b) const {
  return pairwise(query, capped(content_tokens(document_a), template_.max_document_tokens),
                  capped(content_tokens(document_b), template_.max_document_tokens));
}

PromptPair PromptRenderer::render_pointwise(const Triplet& triplet) const {
  triplet.validate();
  auto [pos, neg] = truncate_pair(capped(content_tokens(triplet.positive), template_.max_document_tokens),
                                  capped(content_tokens(triplet.negative), template_.max_document_tokens));
  const RenderedPrompt clean = pointwise(triplet.query, pos);
  const RenderedPrompt corrupted = pointwise(triplet.query, neg);
  if (!(clean.positions == corrupted.positions)) throw ShapeError("pointwise prompts are not position-aligned");
  PromptPair pair{PromptStyle::pointwise, triplet.query_id, clean.tokens, corrupted.tokens, clean.positions,
                  answers(PromptStyle::pointwise)};
  pair.validate();
  return pair;
}

PromptPair PromptRenderer::render_pairwise(const Triplet& triplet) const {
  triplet.validate();
  auto [pos, neg] = truncate_pair(capped(content_tokens(triplet.positive), template_.max_document_tokens),
                                  capped(content_tokens(triplet.negative), template_.max_document_tokens));
  const RenderedPrompt clean = pairwise(triplet.query, pos, neg);
  PromptPair pair{PromptStyle::pairwise, triplet.query_id, clean.tokens,
                  swap_documents(clean.tokens, clean.positions), clean.positions, answers(PromptStyle::pairwise)};
  pair.validate();
  return pair;
}

PromptPair PromptRenderer::render(const Triplet& triplet, PromptStyle style) const {
  return style == PromptStyle::pointwise ? render_pointwise(triplet) : render_pairwise(triplet);
}

std::pair<std::vector<TokenId>, std::vector<TokenId>> truncate_pair(std::span<const TokenId> positive,
                                                                     std::span<const TokenId> negative) {
  const std::size_t n = std::min(positive.size(), negative.size());
  return {std::vector<TokenId>(positive.begin(), positive.begin() + n),
          std::vector<TokenId>(negative.begin(), negative.begin() + n)};
}

std::vector<TokenId> swap_documents(std::span<const TokenId> tokens, const PositionMap& positions) {
  const auto docs = positions.documents();
  if (docs.size() != 2) throw ShapeError("document swap needs exactly two document spans");
  if (docs[0].size() != docs[1].size()) throw ShapeError("document swap needs equal-length spans");
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  for (int k = 0; k < docs[0].size(); ++k) std::swap(out[docs[0].begin + k], out[docs[1].begin + k]);
  return out;
}

}  // namespace relprobe
