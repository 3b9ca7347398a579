#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace relprobe::app {

inline constexpr const char* kToolVersion = "0.3.0";

// Settings for one command invocation. Paths are kept as given so the config
// hash does not depend on the working directory.
struct ExperimentConfig {
  std::string command;

  std::string model;
  std::string tokenizer;      // defaults to the model directory
  std::string template_path;  // defaults to <model dir>/template.json, then the built-in wording
  std::string triplets;
  std::string corpus;
  std::string queries;
  std::string qrels;
  std::string run;
  std::string grids;  // upstream grid directory; defaults to <out>/grids

  std::string style = "pointwise";
  std::vector<std::string> sites = {"attn_out", "mlp_out"};
  std::string granularity = "layer";
  std::vector<std::string> positions = {"last"};
  std::uint64_t seed = 0;
  double eps = 1e-3;
  std::string out = "out";
  std::size_t threads = 1;
  std::string capture_precision = "f32";

  std::size_t count = 0;  // build-data: triplets to sample; elsewhere: use the first n (0 = all)
  std::size_t depth = 100;
  double k1 = 0.9;
  double b = 0.4;
  bool split_documents = false;
  bool clamp = false;

  std::size_t top_k = 10;        // unembedding tokens per head
  std::size_t report_heads = 5;  // heads in the unembedding report
  double rbo_p = 0.7;

  std::size_t group_k = 20;
  std::size_t random_k = 80;
  std::size_t random_seeds = 5;
  std::size_t rerank_depth = 20;

  std::string query;
  std::string document;
  std::string document_b;

  std::string fixture = "planted";
  std::size_t fixture_queries = 60;

  // Every setting that can change an output. The output directory and the
  // thread count are left out.
  nlohmann::ordered_json to_json() const;
  // FNV-1a 64 of to_json(), as 16 hex digits.
  std::string hash() const;

  // Checks every setting the command uses, including that input paths exist.
  // Throws ConfigError.
  void validate() const;

  std::string grid_dir() const;
  std::string tokenizer_path() const;
};

}  // namespace relprobe::app
