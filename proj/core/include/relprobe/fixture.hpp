#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "relprobe/heads.hpp"
#include "relprobe/model.hpp"
#include "relprobe/prompt.hpp"
#include "relprobe/retrieval.hpp"
#include "relprobe/tokenizer.hpp"

namespace relprobe {

// Small synthetic models and data for tests, benchmarks and the
// make-fixture command.

struct RandomModelSpec {
  int layers = 4;
  int heads = 4;
  int kv_heads = 4;
  int d_model = 64;
  int d_ff = 128;
  int vocab = 512;
  std::uint64_t seed = 0;
};

// Gaussian weights scaled so activations stay O(1).
Model random_model(const RandomModelSpec& spec);

// Keyword-task vocabulary: template words, answers, keywords and fillers,
// padded with unused words up to `vocab_size` total ids when given.
FixtureTokenizer keyword_tokenizer(std::size_t vocab_size = 0);

// Prompt wording matching keyword_tokenizer().
PromptTemplate keyword_template();

const std::vector<std::string>& keyword_words();
const std::vector<std::string>& filler_words();

struct KeywordTaskOptions {
  std::size_t queries = 60;
  std::size_t docs_per_query = 6;
  std::size_t doc_length = 8;
  std::size_t candidates = 8;  // first-stage run depth
  std::uint64_t seed = 0;
};

// Queries are two keywords; a document is relevant iff it contains every
// query keyword, and qrels are derived from content for all queries. The
// first-stage run lists, per query, the documents generated for it plus
// random fill in a seeded random order, so it is deliberately uninformative.
struct KeywordTask {
  std::vector<TextRecord> corpus;
  std::vector<TextRecord> queries;
  Qrels qrels;
  std::vector<RunEntry> first_stage;
};

KeywordTask make_keyword_task(const KeywordTaskOptions& options);

// Hand-constructed model that judges keyword relevance with a known
// mechanism:
//   layer 0: two position heads mark tokens after "\nQuery:" and after
//            "\nDocument B:";
//   layer 1: two redundant matching heads copy, at each query keyword,
//            whether the same keyword occurs in a document (signed by
//            document A vs B in pairwise prompts);
//   layers 2, 3: one aggregator head each reads the match flags of the query
//            keywords from the last token and writes the yes/no direction.
// Every other head and all feed-forward blocks carry small random weights
// confined to a noise subspace.
struct PlantedCircuit {
  Model model;
  FixtureTokenizer tokenizer;
  PromptTemplate prompt_template;
  std::vector<HeadId> position_heads;
  std::vector<HeadId> matching_heads;
  std::vector<HeadId> aggregator_heads;
};

PlantedCircuit planted_circuit(std::uint64_t seed = 0);

}  // namespace relprobe
