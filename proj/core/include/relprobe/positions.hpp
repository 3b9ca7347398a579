#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace relprobe {

// Half-open token index range [begin, end).
struct Span {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(int pos) const { return pos >= begin && pos < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

enum class SegmentKind { literal, document, query, instruction, last };

std::string_view segment_kind_name(SegmentKind kind);

struct Segment {
  SegmentKind kind = SegmentKind::literal;
  Span span;
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Token position groups used for patching and ablation.
enum class PositionGroup { documents, query, instruction, last, all, document_a, document_b };

std::string_view group_name(PositionGroup group);
PositionGroup parse_group(std::string_view name);

// Ordered partition of a prompt into template literals and content spans.
// Prompts rendered from the same template have the same segment structure,
// which is what lets activations be aligned across prompts.
class PositionMap {
 public:
  PositionMap() = default;
  // Segments must tile [0, length) in order.
  explicit PositionMap(std::vector<Segment> segments);
  // One literal segment covering [0, length): layout for unstructured input.
  static PositionMap flat(int length);

  int length() const { return length_; }
  const std::vector<Segment>& segments() const { return segments_; }

  std::vector<Span> documents() const;
  Span query() const;
  Span instruction() const;
  int last() const { return length_ - 1; }

  // Positions of a group in ascending order.
  std::vector<int> positions(PositionGroup group) const;

  // Index of the segment holding `pos` and the offset inside it.
  std::pair<std::size_t, int> locate(int pos) const;

  // Same number of segments with the same kinds (lengths may differ).
  bool same_structure(const PositionMap& other) const;

  // Checks the prompt invariants: named spans nonempty and disjoint,
  // last == N-1, everything inside [0, N).
  void validate_prompt() const;

  nlohmann::json to_json() const;
  friend bool operator==(const PositionMap&, const PositionMap&) = default;

 private:
  std::vector<Segment> segments_;
  int length_ = 0;
};

}  // namespace relprobe
