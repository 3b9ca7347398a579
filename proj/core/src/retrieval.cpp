#include "relprobe/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "relprobe/errors.hpp"
#include "relprobe/parallel.hpp"
#include "relprobe/random.hpp"

namespace relprobe {

namespace {

bool has_suffix(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string first_string(const nlohmann::json& j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    auto it = j.find(k);
    if (it == j.end()) continue;
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<long long>());
  }
  return {};
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

std::vector<TextRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path);
  const bool json_lines = has_suffix(path, ".jsonl") || has_suffix(path, ".json");
  std::vector<TextRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = path + ":" + std::to_string(line_no);
    TextRecord rec;
    if (json_lines) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw LoadError(where + ": " + e.what());
      }
      rec.id = first_string(j, {"id", "_id", "docid", "doc_id", "qid", "query_id"});
      rec.text = first_string(j, {"text", "contents", "query", "body"});
      const std::string title = first_string(j, {"title"});
      if (!title.empty()) rec.text = title + " " + rec.text;
    } else {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw LoadError(where + ": expected id<TAB>text");
      rec.id = line.substr(0, tab);
      rec.text = line.substr(tab + 1);
    }
    if (rec.id.empty()) throw LoadError(where + ": record without an id");
    out.push_back(std::move(rec));
  }
  return out;
}

Qrels read_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open qrels " + path);
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    std::istringstream fields(line);
    std::string qid, iter, docid;
    int rel = 0;
    if (!(fields >> qid >> iter >> docid >> rel)) {
      throw LoadError(path + ":" + std::to_string(line_no) + ": expected 'qid iter docid rel'");
    }
    if (rel < 0) rel = 0;
    qrels[qid][docid] = rel;
  }
  return qrels;
}

std::vector<RunEntry> read_run(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open run " + path);
  std::vector<RunEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    std::istringstream fields(line);
    RunEntry e;
    std::string q0;
    if (!(fields >> e.query_id >> q0 >> e.doc_id >> e.rank >> e.score)) {
      throw LoadError(path + ":" + std::to_string(line_no) + ": expected 'qid Q0 docid rank score tag'");
    }
    fields >> e.tag;
    out.push_back(std::move(e));
  }
  return out;
}

void write_run(const std::string& path, const std::vector<RunEntry>& entries, const std::string& header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path);
  if (!header.empty()) out << "# " << header << '\n';
  out << std::setprecision(6) << std::fixed;
  for (const auto& e : entries) {
    out << e.query_id << " Q0 " << e.doc_id << ' ' << e.rank << ' ' << e.score << ' '
        << (e.tag.empty() ? "run" : e.tag) << '\n';
  }
}

std::vector<std::string> analyze(std::string_view text) {
  std::vector<std::string> terms;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) && c < 128) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      terms.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) terms.push_back(std::move(cur));
  return terms;
}

CorpusStats CorpusStats::from_documents(const std::vector<std::vector<std::string>>& docs) {
  CorpusStats stats;
  stats.n_docs = docs.size();
  double total = 0.0;
  for (const auto& d : docs) {
    total += static_cast<double>(d.size());
    std::set<std::string_view> seen(d.begin(), d.end());
    for (auto t : seen) ++stats.doc_freq[std::string(t)];
  }
  stats.avg_length = docs.empty() ? 0.0 : total / static_cast<double>(docs.size());
  return stats;
}

double CorpusStats::idf(const std::string& term) const {
  auto it = doc_freq.find(term);
  const double df = it == doc_freq.end() ? 0.0 : static_cast<double>(it->second);
  const double n = static_cast<double>(n_docs);
  return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

namespace {

double term_weight(double idf, double tf, double length, double avg, const Bm25Params& p) {
  const double norm = p.k1 * (1.0 - p.b + p.b * (avg > 0.0 ? length / avg : 0.0));
  return idf * tf * (p.k1 + 1.0) / (tf + norm);
}

}  // namespace

double bm25_score(const std::vector<std::string>& query_terms, const std::vector<std::string>& doc_terms,
                  const CorpusStats& stats, const Bm25Params& params) {
  if (stats.n_docs == 0) throw DomainError("bm25_score: empty corpus statistics");
  double score = 0.0;
  for (const auto& term : query_terms) {
    const auto tf = static_cast<double>(std::count(doc_terms.begin(), doc_terms.end(), term));
    if (tf == 0.0) continue;
    score += term_weight(stats.idf(term), tf, static_cast<double>(doc_terms.size()), stats.avg_length, params);
  }
  return score;
}

Bm25Index::Bm25Index(const std::vector<TextRecord>& docs, Bm25Params params) : params_(params) {
  std::vector<std::vector<std::string>> analyzed;
  analyzed.reserve(docs.size());
  for (const auto& d : docs) analyzed.push_back(analyze(d.text));
  stats_ = CorpusStats::from_documents(analyzed);
  ids_.reserve(docs.size());
  lengths_.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    ids_.push_back(docs[i].id);
    if (!id_index_.emplace(docs[i].id, i).second) throw LoadError("duplicate document id '" + docs[i].id + "'");
    lengths_.push_back(static_cast<std::uint32_t>(analyzed[i].size()));
    std::map<std::string_view, std::uint32_t> tf;
    for (const auto& t : analyzed[i]) ++tf[t];
    for (const auto& [term, count] : tf) postings_[std::string(term)].push_back({static_cast<std::uint32_t>(i), count});
  }
}

std::optional<std::size_t> Bm25Index::find(const std::string& doc_id) const {
  auto it = id_index_.find(doc_id);
  if (it == id_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<SearchHit> Bm25Index::search(std::string_view query, std::size_t depth) const {
  if (stats_.n_docs == 0) return {};
  std::vector<double> scores(lengths_.size(), 0.0);
  std::vector<char> touched(lengths_.size(), 0);
  for (const auto& term : analyze(query)) {
    auto it = postings_.find(term);
    if (it == postings_.end()) continue;
    const double idf = stats_.idf(term);
    for (const auto& p : it->second) {
      scores[p.doc] += term_weight(idf, p.tf, lengths_[p.doc], stats_.avg_length, params_);
      touched[p.doc] = 1;
    }
  }
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (touched[i] && scores[i] > 0.0) hits.push_back({i, scores[i]});
  }
  auto order = [](const SearchHit& a, const SearchHit& b) {
    return a.score != b.score ? a.score > b.score : a.doc < b.doc;
  };
  if (hits.size() > depth) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(depth), hits.end(), order);
    hits.resize(depth);
  } else {
    std::sort(hits.begin(), hits.end(), order);
  }
  return hits;
}

namespace {

struct Candidate {
  std::optional<Triplet> triplet;
  std::string skip_reason;
};

Candidate mine_one(const TextRecord& query, const std::vector<TextRecord>& corpus, const Bm25Index& index,
                   const Qrels& qrels, const TripletOptions& options) {
  Candidate out;
  auto judged = qrels.find(query.id);
  std::vector<std::size_t> positives;
  if (judged != qrels.end()) {
    for (const auto& [doc_id, rel] : judged->second) {
      if (rel <= 0) continue;
      if (auto idx = index.find(doc_id)) positives.push_back(*idx);
    }
  }
  if (positives.empty()) {
    out.skip_reason = "no judged positive in the corpus";
    return out;
  }
  std::vector<std::size_t> negatives;
  for (const auto& hit : index.search(query.text, options.depth)) {
    const auto& id = index.doc_id(hit.doc);
    const bool is_positive = judged->second.count(id) != 0 && judged->second.at(id) > 0;
    if (!is_positive && corpus[hit.doc].text != corpus[positives.front()].text) negatives.push_back(hit.doc);
  }
  if (negatives.empty()) {
    out.skip_reason = "no eligible negative in the BM25 top " + std::to_string(options.depth);
    return out;
  }
  Rng rng(derive_seed(options.seed, "triplet:" + query.id));
  const std::size_t pos = positives[uniform_index(rng, positives.size())];
  std::size_t neg = negatives[uniform_index(rng, negatives.size())];
  if (corpus[neg].text == corpus[pos].text) {
    out.skip_reason = "negative text equals the positive";
    return out;
  }
  if (query.text.empty() || corpus[pos].text.empty() || corpus[neg].text.empty()) {
    out.skip_reason = "empty text";
    return out;
  }
  out.triplet = Triplet{query.id, query.text, corpus[pos].text, corpus[neg].text, corpus[pos].id, corpus[neg].id};
  return out;
}

}  // namespace

TripletBuild build_triplets(const std::vector<TextRecord>& queries, const std::vector<TextRecord>& corpus,
                            const Qrels& qrels, const TripletOptions& options) {
  if (options.count == 0) throw ConfigError("triplet count must be positive");
  if (corpus.empty()) throw ConfigError("empty corpus");
  const Bm25Index index(corpus, options.bm25);

  std::vector<std::size_t> order(queries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(options.seed, "query-order"));
  shuffle(order, rng);

  TripletBuild build;
  const std::size_t batch = std::max<std::size_t>(options.threads * 4, 16);
  for (std::size_t start = 0; start < order.size() && build.triplets.size() < options.count; start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::vector<Candidate> results(end - start);
    parallel_for(results.size(), options.threads, [&](std::size_t i) {
      results[i] = mine_one(queries[order[start + i]], corpus, index, qrels, options);
    });
    for (std::size_t i = 0; i < results.size() && build.triplets.size() < options.count; ++i) {
      if (results[i].triplet) {
        build.triplets.push_back(std::move(*results[i].triplet));
      } else {
        build.skipped.push_back({queries[order[start + i]].id, results[i].skip_reason});
      }
    }
  }
  if (build.triplets.size() < options.count) {
    throw ConfigError("only " + std::to_string(build.triplets.size()) + " of " + std::to_string(options.count) +
                      " requested queries have a positive and an eligible negative (" +
                      std::to_string(build.skipped.size()) + " skipped)");
  }
  return build;
}

std::vector<RunEntry> bm25_run(const Bm25Index& index, const std::vector<TextRecord>& queries, std::size_t depth,
                               const std::string& tag) {
  std::vector<RunEntry> run;
  for (const auto& q : queries) {
    int rank = 1;
    for (const auto& hit : index.search(q.text, depth)) {
      run.push_back({q.id, index.doc_id(hit.doc), rank++, hit.score, tag});
    }
  }
  return run;
}

}  // namespace relprobe
