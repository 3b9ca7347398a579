#include "relprobe/intervention.hpp"

#include <algorithm>
#include <set>
#include <tuple>

#include "relprobe/errors.hpp"
#include "relprobe/parallel.hpp"

namespace relprobe {

std::string_view patch_mode_name(PatchMode mode) {
  switch (mode) {
    case PatchMode::restore: return "restore";
    case PatchMode::mean_ablate: return "mean_ablate";
    case PatchMode::zero: return "zero";
  }
  return "unknown";
}

PatchMode parse_patch_mode(std::string_view name) {
  for (auto m : {PatchMode::restore, PatchMode::mean_ablate, PatchMode::zero}) {
    if (patch_mode_name(m) == name) return m;
  }
  throw ConfigError("unknown patch mode '" + std::string(name) + "'");
}

nlohmann::json patch_to_json(const PatchSpec& p) {
  nlohmann::json j = {{"site", site_name(p.site)}, {"layer", p.layer}};
  j["head"] = p.head ? nlohmann::json(*p.head) : nlohmann::json(nullptr);
  j["positions"] = p.target_positions;
  if (!p.source_positions.empty()) j["sources"] = p.source_positions;
  j["mode"] = patch_mode_name(p.mode);
  return j;
}

PatchSpec patch_from_json(const nlohmann::json& j) {
  try {
    PatchSpec p;
    p.site = parse_site(j.at("site").get<std::string>());
    p.layer = j.at("layer").get<int>();
    if (j.contains("head") && !j.at("head").is_null()) p.head = j.at("head").get<int>();
    p.target_positions = j.at("positions").get<std::vector<int>>();
    if (j.contains("sources")) p.source_positions = j.at("sources").get<std::vector<int>>();
    p.mode = parse_patch_mode(j.value("mode", std::string("restore")));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed patch specification: ") + e.what());
  }
}

nlohmann::json patches_to_json(std::span<const PatchSpec> patches) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : patches) arr.push_back(patch_to_json(p));
  return arr;
}

std::vector<PatchSpec> patches_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("patch list must be a JSON array");
  std::vector<PatchSpec> out;
  for (const auto& item : j) out.push_back(patch_from_json(item));
  return out;
}

// ------------------------------------------------------------- MeanCache

std::vector<CacheKey> MeanCache::keys() const {
  std::vector<CacheKey> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

const std::vector<MeanCache::SegmentMean>& MeanCache::segments(const CacheKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("mean cache has no entry " + key.to_string());
  return it->second;
}

bool MeanCache::fully_aligned(const CacheKey& key) const {
  const auto& segs = segments(key);
  return std::all_of(segs.begin(), segs.end(), [](const SegmentMean& s) { return s.per_position; });
}

std::span<const float> MeanCache::row(const CacheKey& key, const PositionMap& target, int position) const {
  const auto& segs = segments(key);
  if (!target.same_structure(layout_)) {
    throw ShapeError("target layout does not match the mean cache's segment structure");
  }
  const auto [index, offset] = target.locate(position);
  const SegmentMean& seg = segs[index];
  if (!seg.per_position) return seg.rows.row(0);
  if (seg.rows.rows() != static_cast<std::size_t>(target.segments()[index].span.size())) {
    throw ShapeError("segment length differs from the mean cache for " + key.to_string());
  }
  return seg.rows.row(offset);
}

MeanCache build_mean_cache(const std::vector<const ActivationCache*>& caches, const std::vector<PositionMap>& layouts,
                           std::span<const CacheKey> keys) {
  if (caches.empty()) throw DomainError("mean cache needs at least one sequence");
  if (layouts.size() != caches.size()) throw ShapeError("one layout per cache is required");
  for (const auto& layout : layouts) {
    if (!layout.same_structure(layouts.front())) {
      throw ShapeError("mean cache inputs have different segment structures");
    }
  }
  MeanCache mean;
  mean.layout_ = layouts.front();
  mean.count_ = caches.size();
  const std::size_t n_segments = layouts.front().segments().size();

  for (const CacheKey& key : keys) {
    std::size_t width = 0;
    for (std::size_t i = 0; i < caches.size(); ++i) {
      if (!caches[i]->contains(key)) throw ConfigError("key " + key.to_string() + " was never captured");
      const Matrix& m = caches[i]->at(key);
      if (m.rows() != static_cast<std::size_t>(layouts[i].length())) {
        throw ShapeError("cached " + key.to_string() + " does not match its layout length");
      }
      if (key.site == Site::attn_pattern) {
        if (i > 0 && layouts[i] != layouts.front()) {
          throw ShapeError("attention-pattern means need identically laid-out sequences");
        }
        width = m.cols();
      } else {
        if (i > 0 && m.cols() != width) throw ShapeError("cached widths differ for " + key.to_string());
        width = m.cols();
      }
    }
    std::vector<MeanCache::SegmentMean> segs(n_segments);
    for (std::size_t s = 0; s < n_segments; ++s) {
      const int len0 = layouts.front().segments()[s].span.size();
      const bool aligned = std::all_of(layouts.begin(), layouts.end(),
                                       [&](const PositionMap& l) { return l.segments()[s].span.size() == len0; });
      std::vector<double> sums;
      std::size_t rows_out;
      double denom;
      if (aligned) {
        rows_out = static_cast<std::size_t>(len0);
        sums.assign(rows_out * width, 0.0);
        for (std::size_t i = 0; i < caches.size(); ++i) {
          const Matrix& m = caches[i]->at(key);
          const int begin = layouts[i].segments()[s].span.begin;
          for (std::size_t r = 0; r < rows_out; ++r) {
            const auto src = m.row(begin + r);
            for (std::size_t c = 0; c < width; ++c) sums[r * width + c] += src[c];
          }
        }
        denom = static_cast<double>(caches.size());
      } else {
        rows_out = 1;
        sums.assign(width, 0.0);
        std::size_t total = 0;
        for (std::size_t i = 0; i < caches.size(); ++i) {
          const Matrix& m = caches[i]->at(key);
          const Span span = layouts[i].segments()[s].span;
          for (int p = span.begin; p < span.end; ++p) {
            const auto src = m.row(p);
            for (std::size_t c = 0; c < width; ++c) sums[c] += src[c];
          }
          total += static_cast<std::size_t>(span.size());
        }
        denom = static_cast<double>(std::max<std::size_t>(total, 1));
      }
      Matrix rows(rows_out, width);
      for (std::size_t idx = 0; idx < sums.size(); ++idx) rows.values()[idx] = static_cast<float>(sums[idx] / denom);
      segs[s] = MeanCache::SegmentMean{aligned, std::move(rows)};
    }
    mean.entries_[key] = std::move(segs);
  }
  return mean;
}

MeanCache compute_mean_cache(const Model& model, const std::vector<std::vector<TokenId>>& sequences,
                             std::span<const CacheKey> keys, std::size_t threads) {
  std::vector<PositionMap> layouts;
  for (const auto& seq : sequences) {
    if (seq.size() != sequences.front().size()) {
      throw ShapeError("plain sequences averaged per position must have equal lengths");
    }
    layouts.push_back(PositionMap::flat(static_cast<int>(seq.size())));
  }
  return compute_mean_cache(model, sequences, layouts, keys, threads);
}

MeanCache compute_mean_cache(const Model& model, const std::vector<std::vector<TokenId>>& sequences,
                             const std::vector<PositionMap>& layouts, std::span<const CacheKey> keys,
                             std::size_t threads) {
  if (sequences.empty()) throw DomainError("mean cache needs at least one sequence");
  if (layouts.size() != sequences.size()) throw ShapeError("one layout per sequence is required");
  std::vector<ActivationCache> caches(sequences.size());
  ForwardOptions fo;
  fo.capture = CaptureSet::of_keys(keys);
  fo.logits = LogitScope::last_position;
  parallel_for(sequences.size(), threads, [&](std::size_t i) {
    caches[i] = model.forward(sequences[i], fo).cache;
  });
  std::vector<const ActivationCache*> ptrs;
  for (const auto& c : caches) ptrs.push_back(&c);
  return build_mean_cache(ptrs, layouts, keys);
}

// ------------------------------------------------------------ patching

namespace {

struct Cell {
  int target;
  int source;  // -1 for whole-row sites
  PatchMode mode;
};

class PatchHook final : public ActivationHook {
 public:
  PatchHook(int n_layers, const PatchDonor& donor, const PositionMap& layout, bool renormalize)
      : layers_(static_cast<std::size_t>(n_layers), false), donor_(donor), layout_(layout), renormalize_(renormalize) {}

  void add(const CacheKey& key, Cell cell) {
    cells_[key].push_back(cell);
    layers_[key.layer] = true;
  }

  bool touches_layer(int layer) const override { return layers_[layer]; }

  void on_activation(const CacheKey& key, Matrix& value) override {
    auto it = cells_.find(key);
    if (it == cells_.end()) return;
    std::set<int> touched_rows;
    for (const Cell& cell : it->second) {
      if (cell.source < 0) {
        auto dst = value.row(cell.target);
        switch (cell.mode) {
          case PatchMode::restore: {
            const auto src = donor_.cache->at(key).row(cell.target);
            std::copy(src.begin(), src.end(), dst.begin());
            break;
          }
          case PatchMode::mean_ablate: {
            const auto src = donor_.mean->row(key, layout_, cell.target);
            std::copy(src.begin(), src.end(), dst.begin());
            break;
          }
          case PatchMode::zero: std::fill(dst.begin(), dst.end(), 0.0f); break;
        }
      } else {
        float replacement = 0.0f;
        if (cell.mode == PatchMode::restore) {
          replacement = donor_.cache->at(key)(cell.target, cell.source);
        } else if (cell.mode == PatchMode::mean_ablate) {
          replacement = donor_.mean->row(key, layout_, cell.target)[cell.source];
        }
        value(cell.target, cell.source) = replacement;
        touched_rows.insert(cell.target);
      }
    }
    if (renormalize_) {
      for (int r : touched_rows) {
        auto row = value.row(r);
        float total = 0.0f;
        for (int c = 0; c <= r; ++c) total += row[c];
        if (total > 0.0f) {
          for (int c = 0; c <= r; ++c) row[c] /= total;
        }
      }
    }
  }

 private:
  std::map<CacheKey, std::vector<Cell>> cells_;
  std::vector<bool> layers_;
  const PatchDonor& donor_;
  const PositionMap& layout_;
  bool renormalize_;
};

}  // namespace

ForwardResult run_with_patches(const Model& model, std::span<const TokenId> tokens,
                               std::span<const PatchSpec> patches, const PatchDonor& donor,
                               const PatchRunOptions& options) {
  const auto& cfg = model.config();
  const int n = static_cast<int>(tokens.size());
  model.validate_tokens(tokens);
  const PositionMap flat = PositionMap::flat(n);
  const PositionMap& layout = options.layout != nullptr ? *options.layout : flat;
  if (layout.length() != n) throw ShapeError("layout length does not match the token sequence");

  PatchHook hook(cfg.n_layers, donor, layout, options.renormalize_patterns);
  std::map<std::tuple<CacheKey, int, int>, PatchMode> seen;
  int first_layer = cfg.n_layers;

  for (const PatchSpec& p : patches) {
    if (p.layer < 0 || p.layer >= cfg.n_layers) {
      throw ConfigError("patch layer " + std::to_string(p.layer) + " outside model with " +
                        std::to_string(cfg.n_layers) + " layers");
    }
    if (site_has_head(p.site) != p.head.has_value()) {
      throw ConfigError(std::string("patch on ") + std::string(site_name(p.site)) +
                        (p.head ? " must not name a head" : " requires a head"));
    }
    if (p.head && (*p.head < 0 || *p.head >= cfg.n_heads)) {
      throw ConfigError("patch head " + std::to_string(*p.head) + " outside model with " +
                        std::to_string(cfg.n_heads) + " heads");
    }
    if (!p.source_positions.empty() && p.site != Site::attn_pattern) {
      throw ConfigError("source positions are only meaningful for attn_pattern patches");
    }
    const CacheKey key = p.key();
    for (int pos : p.target_positions) {
      if (pos < 0 || pos >= n) throw ConfigError("patch target position " + std::to_string(pos) + " out of range");
    }
    for (int pos : p.source_positions) {
      if (pos < 0 || pos >= n) throw ConfigError("patch source position " + std::to_string(pos) + " out of range");
    }
    if (p.mode == PatchMode::restore) {
      if (donor.cache == nullptr) throw ConfigError("restore patch without a donor cache");
      if (!donor.cache->contains(key)) throw ConfigError("donor cache lacks " + key.to_string());
      const Matrix& m = donor.cache->at(key);
      if (m.rows() != static_cast<std::size_t>(n) ||
          (p.site == Site::attn_pattern && m.cols() != static_cast<std::size_t>(n))) {
        throw ShapeError("donor " + key.to_string() + " has " + std::to_string(m.rows()) +
                         " positions, sequence has " + std::to_string(n));
      }
    } else if (p.mode == PatchMode::mean_ablate) {
      if (donor.mean == nullptr) throw ConfigError("mean-ablation patch without a mean cache");
      if (!donor.mean->contains(key)) throw ConfigError("mean cache lacks " + key.to_string());
      if (p.site == Site::attn_pattern && !donor.mean->fully_aligned(key)) {
        throw ShapeError("attention-pattern mean ablation needs an aligned mean cache");
      }
    }

    auto claim = [&](int target, int source) {
      auto [it, inserted] = seen.emplace(std::make_tuple(key, target, source), p.mode);
      if (!inserted) {
        if (it->second != p.mode) {
          throw PatchConflictError("conflicting patch modes on " + key.to_string() + " at position " +
                                   std::to_string(target));
        }
        return;
      }
      hook.add(key, Cell{target, source, p.mode});
    };
    for (int target : p.target_positions) {
      if (p.site != Site::attn_pattern) {
        claim(target, -1);
      } else if (p.source_positions.empty()) {
        for (int s = 0; s <= target; ++s) claim(target, s);
      } else {
        for (int s : p.source_positions) claim(target, s);
      }
    }
    if (!p.target_positions.empty()) first_layer = std::min(first_layer, p.layer);
  }

  ForwardOptions fo;
  fo.capture = options.capture;
  fo.logits = options.logits;
  fo.hook = &hook;
  if (options.resume_from != nullptr && first_layer > 0 && first_layer < cfg.n_layers && options.capture.empty()) {
    const CacheKey resume_key{Site::resid, first_layer - 1, -1};
    if (options.resume_from->contains(resume_key) &&
        options.resume_from->at(resume_key).rows() == static_cast<std::size_t>(n)) {
      fo.start_layer = first_layer;
      fo.start_resid = &options.resume_from->at(resume_key);
    }
  }
  return model.forward(tokens, fo);
}

std::vector<PatchSpec> knockout_patches(std::span<const HeadAblation> heads, const PositionMap& layout) {
  std::vector<PatchSpec> out;
  for (const auto& h : heads) {
    auto positions = layout.positions(h.group);
    if (positions.empty()) continue;
    out.push_back(PatchSpec{Site::head_out, h.layer, h.head, std::move(positions), {}, PatchMode::mean_ablate});
  }
  return out;
}

ForwardResult knockout(const Model& model, std::span<const TokenId> tokens, const PositionMap& layout,
                       std::span<const HeadAblation> heads, const MeanCache& mean_cache, LogitScope logits) {
  const auto patches = knockout_patches(heads, layout);
  PatchDonor donor;
  donor.mean = &mean_cache;
  PatchRunOptions opts;
  opts.logits = logits;
  opts.layout = &layout;
  return run_with_patches(model, tokens, patches, donor, opts);
}

}  // namespace relprobe
