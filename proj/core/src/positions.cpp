#include "relprobe/positions.hpp"

#include <algorithm>

#include "relprobe/errors.hpp"

namespace relprobe {

std::string_view segment_kind_name(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::literal: return "literal";
    case SegmentKind::document: return "document";
    case SegmentKind::query: return "query";
    case SegmentKind::instruction: return "instruction";
    case SegmentKind::last: return "last";
  }
  return "unknown";
}

std::string_view group_name(PositionGroup group) {
  switch (group) {
    case PositionGroup::documents: return "documents";
    case PositionGroup::query: return "query";
    case PositionGroup::instruction: return "instruction";
    case PositionGroup::last: return "last";
    case PositionGroup::all: return "all";
    case PositionGroup::document_a: return "document_a";
    case PositionGroup::document_b: return "document_b";
  }
  return "unknown";
}

PositionGroup parse_group(std::string_view name) {
  for (auto g : {PositionGroup::documents, PositionGroup::query, PositionGroup::instruction, PositionGroup::last,
                 PositionGroup::all, PositionGroup::document_a, PositionGroup::document_b}) {
    if (group_name(g) == name) return g;
  }
  if (name == "document" || name == "doc") return PositionGroup::documents;
  if (name == "inst") return PositionGroup::instruction;
  throw ConfigError("unknown position group '" + std::string(name) + "'");
}

PositionMap::PositionMap(std::vector<Segment> segments) : segments_(std::move(segments)) {
  int cursor = 0;
  for (const auto& s : segments_) {
    if (s.span.begin != cursor || s.span.end < s.span.begin) {
      throw ShapeError("position map segments must tile the sequence in order");
    }
    cursor = s.span.end;
  }
  length_ = cursor;
}

PositionMap PositionMap::flat(int length) {
  return PositionMap({Segment{SegmentKind::literal, Span{0, length}}});
}

std::vector<Span> PositionMap::documents() const {
  std::vector<Span> out;
  for (const auto& s : segments_) {
    if (s.kind == SegmentKind::document) out.push_back(s.span);
  }
  return out;
}

Span PositionMap::query() const {
  for (const auto& s : segments_) {
    if (s.kind == SegmentKind::query) return s.span;
  }
  return {};
}

Span PositionMap::instruction() const {
  for (const auto& s : segments_) {
    if (s.kind == SegmentKind::instruction) return s.span;
  }
  return {};
}

std::vector<int> PositionMap::positions(PositionGroup group) const {
  std::vector<int> out;
  auto add = [&](Span s) {
    for (int p = s.begin; p < s.end; ++p) out.push_back(p);
  };
  const auto docs = documents();
  switch (group) {
    case PositionGroup::documents:
      for (auto s : docs) add(s);
      break;
    case PositionGroup::document_a:
      if (!docs.empty()) add(docs[0]);
      break;
    case PositionGroup::document_b:
      if (docs.size() > 1) add(docs[1]);
      break;
    case PositionGroup::query: add(query()); break;
    case PositionGroup::instruction: add(instruction()); break;
    case PositionGroup::last:
      if (length_ > 0) out.push_back(length_ - 1);
      break;
    case PositionGroup::all: add(Span{0, length_}); break;
  }
  return out;
}

std::pair<std::size_t, int> PositionMap::locate(int pos) const {
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].span.contains(pos)) return {i, pos - segments_[i].span.begin};
  }
  throw ShapeError("position " + std::to_string(pos) + " outside the position map");
}

bool PositionMap::same_structure(const PositionMap& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    if (segments_[i].kind != other.segments_[i].kind) return false;
  }
  return true;
}

void PositionMap::validate_prompt() const {
  std::vector<Span> named = documents();
  if (named.empty()) throw ShapeError("position map has no document span");
  named.push_back(query());
  named.push_back(instruction());
  for (const auto& s : named) {
    if (s.empty()) throw ShapeError("position map has an empty named span");
    if (s.begin < 0 || s.end > length_) throw ShapeError("position map span outside the sequence");
  }
  std::sort(named.begin(), named.end(), [](Span a, Span b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < named.size(); ++i) {
    if (named[i].begin < named[i - 1].end) throw ShapeError("position map spans overlap");
  }
  if (segments_.empty() || segments_.back().kind != SegmentKind::last || segments_.back().span.size() != 1) {
    throw ShapeError("position map must end with the single last-token segment");
  }
  if (named.back().end > length_ - 1) throw ShapeError("named spans must precede the last token");
}

nlohmann::json PositionMap::to_json() const {
  nlohmann::json docs = nlohmann::json::array();
  for (auto s : documents()) docs.push_back({s.begin, s.end});
  return {{"length", length_},
          {"documents", docs},
          {"query", {query().begin, query().end}},
          {"instruction", {instruction().begin, instruction().end}},
          {"last", last()}};
}

}  // namespace relprobe
