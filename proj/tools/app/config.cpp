#include "config.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "relprobe/errors.hpp"
#include "relprobe/model.hpp"
#include "relprobe/positions.hpp"
#include "relprobe/prompt.hpp"
#include "relprobe/random.hpp"

namespace relprobe::app {

namespace fs = std::filesystem;

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["model"] = model;
  j["tokenizer"] = tokenizer;
  j["template"] = template_path;
  j["triplets"] = triplets;
  j["corpus"] = corpus;
  j["queries"] = queries;
  j["qrels"] = qrels;
  j["run"] = run;
  j["grids"] = grids;
  j["style"] = style;
  j["sites"] = sites;
  j["granularity"] = granularity;
  j["positions"] = positions;
  j["seed"] = seed;
  j["eps"] = eps;
  j["capture_precision"] = capture_precision;
  j["count"] = count;
  j["depth"] = depth;
  j["k1"] = k1;
  j["b"] = b;
  j["split_documents"] = split_documents;
  j["clamp"] = clamp;
  j["top_k"] = top_k;
  j["report_heads"] = report_heads;
  j["rbo_p"] = rbo_p;
  j["group_k"] = group_k;
  j["random_k"] = random_k;
  j["random_seeds"] = random_seeds;
  j["rerank_depth"] = rerank_depth;
  j["query"] = query;
  j["document"] = document;
  j["document_b"] = document_b;
  j["fixture"] = fixture;
  j["fixture_queries"] = fixture_queries;
  return j;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
  return buf;
}

std::string ExperimentConfig::grid_dir() const { return grids.empty() ? (fs::path(out) / "grids").string() : grids; }

std::string ExperimentConfig::tokenizer_path() const { return tokenizer.empty() ? model : tokenizer; }

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void require_path(const std::string& path, const std::string& flag) {
  require(!path.empty(), flag + " is required");
  require(fs::exists(path), flag + " path does not exist: " + path);
}

void optional_path(const std::string& path, const std::string& flag) {
  if (!path.empty()) require(fs::exists(path), flag + " path does not exist: " + path);
}

void check_style(const std::string& style) {
  try {
    parse_style(style);
  } catch (const Error&) {
    throw ConfigError("--style must be pointwise or pairwise, got '" + style + "'");
  }
}

void check_groups(const std::vector<std::string>& names) {
  require(!names.empty(), "--positions needs at least one position group");
  for (const auto& name : names) {
    try {
      parse_group(name);
    } catch (const Error&) {
      throw ConfigError("unknown position group '" + name +
                        "' (documents, query, instruction, last, all, document_a, document_b)");
    }
  }
}

void check_model_inputs(const ExperimentConfig& c) {
  require_path(c.model, "--model");
  require(fs::exists(c.tokenizer_path()), "--tokenizer path does not exist: " + c.tokenizer_path());
  optional_path(c.template_path, "--template");
}

}  // namespace

void ExperimentConfig::validate() const {
  require(threads >= 1, "--threads must be at least 1");
  require(std::isfinite(eps) && eps > 0.0, "--eps must be a positive number");
  require(capture_precision == "f32" || capture_precision == "bf16", "--capture-precision must be f32 or bf16");
  check_style(style);

  if (command == "make-fixture") {
    require(fixture == "planted" || fixture == "random", "--fixture must be planted or random");
    require(fixture_queries >= 2, "--fixture-queries must be at least 2");
  } else if (command == "build-data") {
    require_path(corpus, "--corpus");
    require_path(queries, "--queries");
    require_path(qrels, "--qrels");
    require(count >= 1, "--count must be at least 1");
    require(depth >= 1, "--depth must be at least 1");
    require(k1 >= 0.0, "--k1 must be nonnegative");
    require(b >= 0.0 && b <= 1.0, "--b must lie in [0, 1]");
  } else if (command == "trace") {
    check_model_inputs(*this);
    require_path(triplets, "--triplets");
    if (granularity == "layer") {
      require(!sites.empty(), "--site needs at least one site");
      for (const auto& s : sites) {
        Site site{};
        try {
          site = parse_site(s);
        } catch (const Error&) {
          throw ConfigError("unknown site '" + s + "'");
        }
        require(site == Site::resid || site == Site::attn_out || site == Site::mlp_out,
                "layer granularity traces resid, attn_out or mlp_out; use --granularity head or attn-score for '" + s +
                    "'");
      }
    } else if (granularity == "head") {
      check_groups(positions);
    } else {
      require(granularity == "attn-score", "--granularity must be layer, head or attn-score");
    }
  } else if (command == "heads") {
    check_model_inputs(*this);
    require_path(triplets, "--triplets");
    require(positions.size() == 1, "heads takes exactly one --positions group");
    check_groups(positions);
    require(rbo_p > 0.0 && rbo_p < 1.0, "--rbo-p must lie in (0, 1)");
    require(top_k >= 1, "--top-k must be at least 1");
    const fs::path dir = grid_dir();
    const std::string head_grid = style + "_head_out_" + positions[0] + ".json";
    require(fs::exists(dir / head_grid), "missing upstream grid " + (dir / head_grid).string() +
                                             "; run `relprobe trace --granularity head --positions " + positions[0] +
                                             " --style " + style + "` with the same --out first");
    const std::string attn_grid = style + "_attn_pattern.json";
    require(fs::exists(dir / attn_grid), "missing upstream grid " + (dir / attn_grid).string() +
                                             "; run `relprobe trace --granularity attn-score --style " + style +
                                             "` with the same --out first");
  } else if (command == "eval") {
    check_model_inputs(*this);
    optional_path(triplets, "--triplets");
    const bool ranking = !run.empty();
    if (ranking) {
      require_path(corpus, "--corpus");
      require_path(queries, "--queries");
      require_path(qrels, "--qrels");
      require_path(run, "--run");
    }
    require(!triplets.empty() || ranking, "eval needs --triplets, a first-stage --run, or both");
    require(random_seeds >= 1, "--random-seeds must be at least 1");
    require(rerank_depth >= 2, "--rerank-depth must be at least 2");
  } else if (command == "judge") {
    check_model_inputs(*this);
    if (triplets.empty()) {
      require(!query.empty() && !document.empty(), "judge needs --triplets or --query and --document");
      if (style == "pairwise") require(!document_b.empty(), "pairwise judge needs --document-b");
    } else {
      require_path(triplets, "--triplets");
    }
  } else if (command == "rerank") {
    check_model_inputs(*this);
    require_path(corpus, "--corpus");
    require_path(queries, "--queries");
    require_path(run, "--run");
    optional_path(qrels, "--qrels");
    require(rerank_depth >= 2, "--rerank-depth must be at least 2");
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
}

}  // namespace relprobe::app
