#pragma once

#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/model.hpp"
#include "relprobe/positions.hpp"

namespace relprobe {

enum class PatchMode { restore, mean_ablate, zero };

std::string_view patch_mode_name(PatchMode mode);
PatchMode parse_patch_mode(std::string_view name);

// One intervention on a forward pass.
struct PatchSpec {
  Site site = Site::attn_out;
  int layer = 0;
  std::optional<int> head;           // required iff site is head_out or attn_pattern
  std::vector<int> target_positions;
  std::vector<int> source_positions;  // attn_pattern only; empty = every source column
  PatchMode mode = PatchMode::restore;

  CacheKey key() const { return CacheKey{site, layer, head.value_or(-1)}; }
  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

nlohmann::json patch_to_json(const PatchSpec& patch);
PatchSpec patch_from_json(const nlohmann::json& j);
nlohmann::json patches_to_json(std::span<const PatchSpec> patches);
std::vector<PatchSpec> patches_from_json(const nlohmann::json& j);

// Mean activations over a set of sequences. Values are aligned per segment of
// the sequences' PositionMaps: a segment whose length agrees across all
// inputs keeps one mean per offset, otherwise the segment stores a single
// mean over all of its positions.
class MeanCache {
 public:
  struct SegmentMean {
    bool per_position = true;
    Matrix rows;  // segment length × width, or 1 × width when averaged
  };

  const PositionMap& reference_layout() const { return layout_; }
  std::size_t count() const { return count_; }
  bool contains(const CacheKey& key) const { return entries_.count(key) != 0; }
  std::vector<CacheKey> keys() const;
  bool fully_aligned(const CacheKey& key) const;

  // Mean row for `position` of a target sequence with layout `target`.
  std::span<const float> row(const CacheKey& key, const PositionMap& target, int position) const;
  const std::vector<SegmentMean>& segments(const CacheKey& key) const;

 private:
  friend MeanCache build_mean_cache(const std::vector<const ActivationCache*>&, const std::vector<PositionMap>&,
                                    std::span<const CacheKey>);
  PositionMap layout_;
  std::size_t count_ = 0;
  std::map<CacheKey, std::vector<SegmentMean>> entries_;
};

// Averages already-captured caches. Layouts must share one segment structure.
MeanCache build_mean_cache(const std::vector<const ActivationCache*>& caches, const std::vector<PositionMap>& layouts,
                           std::span<const CacheKey> keys);

// Runs each sequence once, capturing `keys`, and averages them. Plain token
// sequences must all have the same length.
MeanCache compute_mean_cache(const Model& model, const std::vector<std::vector<TokenId>>& sequences,
                             std::span<const CacheKey> keys, std::size_t threads = 1);
MeanCache compute_mean_cache(const Model& model, const std::vector<std::vector<TokenId>>& sequences,
                             const std::vector<PositionMap>& layouts, std::span<const CacheKey> keys,
                             std::size_t threads = 1);

// Where patched values come from.
struct PatchDonor {
  const ActivationCache* cache = nullptr;  // restore
  const MeanCache* mean = nullptr;         // mean_ablate
};

struct PatchRunOptions {
  LogitScope logits = LogitScope::last_position;
  CaptureSet capture;
  // Rescale each patched attention row to sum to one.
  bool renormalize_patterns = false;
  // Cache of an unpatched run on the same tokens holding resid[l-1] for the
  // first patched layer l; lets the run skip the untouched prefix.
  const ActivationCache* resume_from = nullptr;
  // Layout of the patched sequence, needed to align mean-ablation values.
  const PositionMap* layout = nullptr;
};

// Forward pass with the listed activations overwritten. Throws
// PatchConflictError when two patches hit one cell with different modes and
// ShapeError when a donor does not match the sequence.
ForwardResult run_with_patches(const Model& model, std::span<const TokenId> tokens,
                               std::span<const PatchSpec> patches, const PatchDonor& donor,
                               const PatchRunOptions& options = {});

// A head to mean-ablate at one position group.
struct HeadAblation {
  int layer = 0;
  int head = 0;
  PositionGroup group = PositionGroup::all;

  auto operator<=>(const HeadAblation&) const = default;
};

std::vector<PatchSpec> knockout_patches(std::span<const HeadAblation> heads, const PositionMap& layout);

// Mean ablation of head outputs; equivalent to run_with_patches with
// mean_ablate head_out patches at each head's position group.
ForwardResult knockout(const Model& model, std::span<const TokenId> tokens, const PositionMap& layout,
                       std::span<const HeadAblation> heads, const MeanCache& mean_cache,
                       LogitScope logits = LogitScope::last_position);

}  // namespace relprobe
