#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "relprobe/prompt.hpp"

namespace relprobe {

struct TextRecord {
  std::string id;
  std::string text;
};

// TSV (id<TAB>text) or JSON lines ({"id"|"_id"|"qid"|..., "text"|"contents"|"query"}).
// The format is chosen by extension: .jsonl / .json are JSON lines. Lines
// starting with '#' are comments.
std::vector<TextRecord> read_records(const std::string& path);

// qid -> docid -> graded label
using Qrels = std::map<std::string, std::map<std::string, int>>;

// TREC qrels: "qid iter docid rel" per line; '#' starts a comment line.
Qrels read_qrels(const std::string& path);

struct RunEntry {
  std::string query_id;
  std::string doc_id;
  int rank = 0;
  double score = 0.0;
  std::string tag;
};

// TREC run: "qid Q0 docid rank score tag". Entries keep file order; lines
// starting with '#' are comments.
std::vector<RunEntry> read_run(const std::string& path);
void write_run(const std::string& path, const std::vector<RunEntry>& entries, const std::string& header = {});

// Lowercased ASCII alphanumeric runs; every other byte separates terms.
std::vector<std::string> analyze(std::string_view text);

struct Bm25Params {
  double k1 = 0.9;
  double b = 0.4;
};

struct CorpusStats {
  std::size_t n_docs = 0;
  double avg_length = 0.0;
  std::unordered_map<std::string, std::size_t> doc_freq;

  static CorpusStats from_documents(const std::vector<std::vector<std::string>>& docs);
  double idf(const std::string& term) const;
};

// Okapi BM25: sum over query term occurrences of
// idf(t) * tf (k1 + 1) / (tf + k1 (1 - b + b |d| / avgdl)),
// idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1).
double bm25_score(const std::vector<std::string>& query_terms, const std::vector<std::string>& doc_terms,
                  const CorpusStats& stats, const Bm25Params& params = {});

struct SearchHit {
  std::size_t doc = 0;  // index into the indexed collection
  double score = 0.0;
};

// Inverted index over an analyzed collection.
class Bm25Index {
 public:
  explicit Bm25Index(const std::vector<TextRecord>& docs, Bm25Params params = {});

  const CorpusStats& stats() const { return stats_; }
  std::size_t size() const { return lengths_.size(); }
  const std::string& doc_id(std::size_t doc) const { return ids_[doc]; }
  std::optional<std::size_t> find(const std::string& doc_id) const;

  // Top `depth` documents with a positive score, by descending score with
  // ties broken by collection order.
  std::vector<SearchHit> search(std::string_view query, std::size_t depth) const;

 private:
  struct Posting {
    std::uint32_t doc;
    std::uint32_t tf;
  };
  Bm25Params params_;
  CorpusStats stats_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> id_index_;
  std::vector<std::uint32_t> lengths_;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
};

struct TripletOptions {
  std::size_t count = 100;
  std::uint64_t seed = 0;
  std::size_t depth = 100;  // negatives come from this many BM25 hits
  Bm25Params bm25;
  std::size_t threads = 1;
};

struct SkippedQuery {
  std::string query_id;
  std::string reason;
};

struct TripletBuild {
  std::vector<Triplet> triplets;
  std::vector<SkippedQuery> skipped;
};

// Samples queries uniformly without replacement and, for each, a judged
// positive and a negative drawn uniformly from the BM25 top-`depth` with the
// judged positives removed. Queries without a positive or an eligible
// negative are skipped. Throws ConfigError when fewer than `count` queries
// qualify. Deterministic in `seed` and independent of `threads`.
TripletBuild build_triplets(const std::vector<TextRecord>& queries, const std::vector<TextRecord>& corpus,
                            const Qrels& qrels, const TripletOptions& options);

// First-stage retrieval run for every query.
std::vector<RunEntry> bm25_run(const Bm25Index& index, const std::vector<TextRecord>& queries, std::size_t depth,
                               const std::string& tag = "bm25");

}  // namespace relprobe
