#include "relprobe/patching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "relprobe/errors.hpp"
#include "relprobe/parallel.hpp"

namespace relprobe {

double logit_diff(std::span<const float> logits, const AnswerTokens& answers) {
  const auto n = static_cast<TokenId>(logits.size());
  if (answers.yes < 0 || answers.yes >= n || answers.no < 0 || answers.no >= n) {
    throw ShapeError("answer token id outside the logit vector");
  }
  return static_cast<double>(logits[answers.yes]) - static_cast<double>(logits[answers.no]);
}

std::optional<double> indirect_effect(const RunTriple& t, double eps) {
  const double denom = t.clean - t.corrupted;
  if (!(std::abs(denom) > eps)) return std::nullopt;
  return (t.patched - t.corrupted) / denom;
}

std::size_t IEGrid::column(const std::string& name) const {
  auto it = std::find(cols.begin(), cols.end(), name);
  if (it == cols.end()) throw ConfigError("grid for " + site + " has no column '" + name + "'");
  return static_cast<std::size_t>(it - cols.begin());
}

double IEGrid::at(int layer, const std::string& col) const {
  auto it = std::find(rows.begin(), rows.end(), layer);
  if (it == rows.end()) throw ConfigError("grid has no layer " + std::to_string(layer));
  return mean_ie[static_cast<std::size_t>(it - rows.begin())][column(col)];
}

IEGrid IEGrid::clamped() const {
  IEGrid out = *this;
  for (auto& row : out.mean_ie) {
    for (auto& v : row) v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

nlohmann::ordered_json IEGrid::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["dataset"] = dataset;
  j["style"] = style;
  j["site"] = site;
  j["rows"] = rows;
  j["cols"] = cols;
  j["mean_ie"] = mean_ie;
  j["counts"] = counts;
  j["prompts"] = prompts;
  j["excluded"] = excluded;
  j["eps"] = eps;
  return j;
}

IEGrid IEGrid::from_json(const nlohmann::json& j) {
  IEGrid g;
  try {
    g.model = j.value("model", std::string());
    g.dataset = j.value("dataset", std::string());
    g.style = j.value("style", std::string());
    g.site = j.at("site").get<std::string>();
    g.rows = j.at("rows").get<std::vector<int>>();
    g.cols = j.at("cols").get<std::vector<std::string>>();
    g.mean_ie = j.at("mean_ie").get<std::vector<std::vector<double>>>();
    g.counts = j.at("counts").get<std::vector<std::vector<std::size_t>>>();
    g.prompts = j.value("prompts", std::size_t{0});
    g.excluded = j.value("excluded", std::size_t{0});
    g.eps = j.value("eps", 1e-3);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed grid: ") + e.what());
  }
  if (g.mean_ie.size() != g.rows.size() || g.counts.size() != g.rows.size()) throw LoadError("grid row count mismatch");
  for (std::size_t r = 0; r < g.rows.size(); ++r) {
    if (g.mean_ie[r].size() != g.cols.size() || g.counts[r].size() != g.cols.size()) {
      throw LoadError("grid column count mismatch");
    }
  }
  return g;
}

std::string IEGrid::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "layer,col,mean_ie,n\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      out << rows[r] << ',' << cols[c] << ',' << mean_ie[r][c] << ',' << counts[r][c] << '\n';
    }
  }
  return out.str();
}

RunTriple endpoint_runs(const Model& model, const PromptPair& pair) {
  ForwardOptions fo;
  fo.logits = LogitScope::last_position;
  RunTriple t;
  t.clean = logit_diff(model.forward(pair.clean, fo).logits.row(0), pair.answers);
  t.corrupted = logit_diff(model.forward(pair.corrupted, fo).logits.row(0), pair.answers);
  t.patched = t.corrupted;
  return t;
}

namespace {

// One patched cell of a sweep.
struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  PatchSpec patch;
};

using CellBuilder = std::function<std::vector<Cell>(const PromptPair&)>;

void round_cache(ActivationCache& cache) {
  for (const auto& key : cache.keys()) {
    for (float& v : cache.at(key).values()) v = bfloat16_to_float(float_to_bfloat16(v));
  }
}

// Runs every cell of every prompt and averages the defined IEs per cell in
// prompt order.
IEGrid sweep(const Model& model, std::span<const PromptPair> pairs, const CaptureSet& donor_keys,
             const TraceOptions& options, IEGrid grid, const CellBuilder& cells_of) {
  const std::size_t n_rows = grid.rows.size();
  const std::size_t n_cols = grid.cols.size();
  struct PromptResult {
    bool excluded = false;
    std::vector<Cell> cells;
    std::vector<double> ie;
  };
  std::vector<PromptResult> results(pairs.size());

  parallel_for(pairs.size(), options.threads, [&](std::size_t p) {
    const PromptPair& pair = pairs[p];
    pair.validate();
    ForwardOptions clean_opts;
    clean_opts.capture = donor_keys;
    clean_opts.logits = LogitScope::last_position;
    ForwardResult clean = model.forward(pair.clean, clean_opts);
    ForwardOptions corrupt_opts;
    corrupt_opts.capture.add(Site::resid);
    corrupt_opts.logits = LogitScope::last_position;
    ForwardResult corrupted = model.forward(pair.corrupted, corrupt_opts);

    RunTriple triple;
    triple.clean = logit_diff(clean.logits.row(0), pair.answers);
    triple.corrupted = logit_diff(corrupted.logits.row(0), pair.answers);
    PromptResult& out = results[p];
    if (!indirect_effect({triple.clean, triple.corrupted, triple.clean}, options.eps)) {
      out.excluded = true;
      return;
    }
    if (options.cache_precision == CachePrecision::bf16) round_cache(clean.cache);

    out.cells = cells_of(pair);
    out.ie.reserve(out.cells.size());
    PatchDonor donor{&clean.cache, nullptr};
    PatchRunOptions run_opts;
    run_opts.resume_from = &corrupted.cache;
    run_opts.renormalize_patterns = options.renormalize_patterns;
    run_opts.layout = &pair.positions;
    for (const Cell& cell : out.cells) {
      const PatchSpec patches[] = {cell.patch};
      const ForwardResult patched = run_with_patches(model, pair.corrupted, patches, donor, run_opts);
      triple.patched = logit_diff(patched.logits.row(0), pair.answers);
      out.ie.push_back(*indirect_effect(triple, options.eps));
    }
  });

  std::vector<std::vector<double>> sums(n_rows, std::vector<double>(n_cols, 0.0));
  grid.counts.assign(n_rows, std::vector<std::size_t>(n_cols, 0));
  grid.prompts = pairs.size();
  grid.excluded = 0;
  for (const auto& r : results) {
    if (r.excluded) {
      ++grid.excluded;
      continue;
    }
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
      sums[r.cells[i].row][r.cells[i].col] += r.ie[i];
      ++grid.counts[r.cells[i].row][r.cells[i].col];
    }
  }
  grid.mean_ie.assign(n_rows, std::vector<double>(n_cols, 0.0));
  for (std::size_t r = 0; r < n_rows; ++r) {
    for (std::size_t c = 0; c < n_cols; ++c) {
      if (grid.counts[r][c] > 0) grid.mean_ie[r][c] = sums[r][c] / static_cast<double>(grid.counts[r][c]);
    }
  }
  grid.eps = options.eps;
  return grid;
}

IEGrid empty_grid(const Model& model, std::span<const PromptPair> pairs, const TraceOptions& options,
                  std::string site) {
  IEGrid g;
  g.site = std::move(site);
  g.model = model.id();
  g.dataset = options.dataset;
  g.style = pairs.empty() ? "" : std::string(style_name(pairs.front().style));
  for (int l = 0; l < model.config().n_layers; ++l) g.rows.push_back(l);
  return g;
}

void check_styles(std::span<const PromptPair> pairs) {
  for (const auto& p : pairs) {
    if (p.style != pairs.front().style) throw ConfigError("a sweep dataset must use one prompt style");
  }
}

std::vector<std::string> head_columns(int n_heads) {
  std::vector<std::string> cols;
  for (int h = 0; h < n_heads; ++h) cols.push_back("H" + std::to_string(h));
  return cols;
}

}  // namespace

std::vector<IEGrid> trace_components(const Model& model, std::span<const PromptPair> pairs, std::span<const Site> sites,
                                     const TraceOptions& options, std::vector<PositionGroup> groups) {
  check_styles(pairs);
  if (groups.empty()) {
    groups = {PositionGroup::documents, PositionGroup::query, PositionGroup::instruction, PositionGroup::last};
    if (options.split_documents && !pairs.empty() && pairs.front().style == PromptStyle::pairwise) {
      groups.insert(groups.begin() + 1, {PositionGroup::document_a, PositionGroup::document_b});
    }
  }
  for (Site s : sites) {
    if (site_has_head(s)) throw ConfigError("trace_components takes whole-layer sites; use trace_heads for heads");
  }
  std::vector<IEGrid> grids;
  for (Site site : sites) {
    IEGrid grid = empty_grid(model, pairs, options, std::string(site_name(site)));
    for (PositionGroup g : groups) grid.cols.emplace_back(group_name(g));
    CaptureSet donor;
    donor.add(site);
    const int n_layers = model.config().n_layers;
    grids.push_back(sweep(model, pairs, donor, options, std::move(grid), [&](const PromptPair& pair) {
      std::vector<Cell> cells;
      for (int l = 0; l < n_layers; ++l) {
        for (std::size_t c = 0; c < groups.size(); ++c) {
          PatchSpec patch;
          patch.site = site;
          patch.layer = l;
          patch.target_positions = pair.positions.positions(groups[c]);
          cells.push_back({static_cast<std::size_t>(l), c, std::move(patch)});
        }
      }
      return cells;
    }));
  }
  return grids;
}

IEGrid trace_heads(const Model& model, std::span<const PromptPair> pairs, PositionGroup group,
                   const TraceOptions& options) {
  check_styles(pairs);
  const int n_layers = model.config().n_layers;
  const int n_heads = model.config().n_heads;
  IEGrid grid = empty_grid(model, pairs, options, "head_out@" + std::string(group_name(group)));
  grid.cols = head_columns(n_heads);
  CaptureSet donor;
  donor.add(Site::head_out);
  return sweep(model, pairs, donor, options, std::move(grid), [&](const PromptPair& pair) {
    const auto positions = pair.positions.positions(group);
    std::vector<Cell> cells;
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_heads; ++h) {
        PatchSpec patch;
        patch.site = Site::head_out;
        patch.layer = l;
        patch.head = h;
        patch.target_positions = positions;
        cells.push_back({static_cast<std::size_t>(l), static_cast<std::size_t>(h), std::move(patch)});
      }
    }
    return cells;
  });
}

IEGrid trace_attention_scores(const Model& model, std::span<const PromptPair> pairs, const TraceOptions& options) {
  check_styles(pairs);
  const int n_layers = model.config().n_layers;
  const int n_heads = model.config().n_heads;
  IEGrid grid = empty_grid(model, pairs, options, "attn_pattern@query->documents");
  grid.cols = head_columns(n_heads);
  CaptureSet donor;
  donor.add(Site::attn_pattern);
  return sweep(model, pairs, donor, options, std::move(grid), [&](const PromptPair& pair) {
    const auto targets = pair.positions.positions(PositionGroup::query);
    const auto sources = pair.positions.positions(PositionGroup::documents);
    std::vector<Cell> cells;
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_heads; ++h) {
        PatchSpec patch;
        patch.site = Site::attn_pattern;
        patch.layer = l;
        patch.head = h;
        patch.target_positions = targets;
        patch.source_positions = sources;
        cells.push_back({static_cast<std::size_t>(l), static_cast<std::size_t>(h), std::move(patch)});
      }
    }
    return cells;
  });
}

}  // namespace relprobe
