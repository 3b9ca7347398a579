#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/random.hpp"
#include "relprobe/retrieval.hpp"

using namespace relprobe;

namespace {

std::string temp_file(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << content;
  return path.string();
}

}  // namespace

TEST_CASE("analyzer") {
  CHECK(analyze("Hello, World-42!") == std::vector<std::string>{"hello", "world", "42"});
  CHECK(analyze("  ").empty());
}

TEST_CASE("bm25 hand values") {
  const auto stats = CorpusStats::from_documents({{"apple", "banana"}});
  CHECK(bm25_score({"cherry"}, {"apple", "banana"}, stats) == 0.0);
  // N = 1, df = 1, tf = 1, |d| = avgdl: idf * (k1 + 1) / (1 + k1)
  CHECK(bm25_score({"apple"}, {"apple", "banana"}, stats) == doctest::Approx(std::log(4.0 / 3.0)).epsilon(1e-12));

  const auto stats2 = CorpusStats::from_documents({{"a", "a", "b"}, {"a", "c", "d"}, {"x", "y", "z"}});
  const double one = bm25_score({"a"}, {"a", "c", "d"}, stats2);
  const double two = bm25_score({"a"}, {"a", "a", "b"}, stats2);
  CHECK(two > one);
  CHECK(two < 2 * one);
  // repeated query terms count once per occurrence
  CHECK(bm25_score({"a", "a"}, {"a", "c", "d"}, stats2) == doctest::Approx(2 * one));
}

TEST_CASE("index search matches brute force") {
  Rng rng(7);
  const std::vector<std::string> vocab = {"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"};
  std::vector<TextRecord> docs;
  std::vector<std::string> texts;
  for (int i = 0; i < 50; ++i) {
    std::string text;
    const std::size_t len = 3 + uniform_index(rng, 12);
    for (std::size_t w = 0; w < len; ++w) text += vocab[uniform_index(rng, vocab.size())] + " ";
    docs.push_back({"d" + std::to_string(i), text});
    texts.push_back(text);
  }
  const Bm25Index index(docs);
  CHECK(index.size() == 50);
  CHECK(index.find("d17") == std::optional<std::size_t>(17));
  CHECK_FALSE(index.find("nope").has_value());

  for (const std::string q : {"alpha beta", "theta theta kappa", "gamma", "omega"}) {
    const auto expected = oracle::bm25_all(q, texts);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < expected.size(); ++i)
      if (expected[i] > 0) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return expected[a] > expected[b]; });
    const auto hits = index.search(q, 20);
    REQUIRE(hits.size() == std::min<std::size_t>(20, order.size()));
    for (std::size_t i = 0; i < hits.size(); ++i) {
      CHECK(hits[i].doc == order[i]);
      CHECK(hits[i].score == doctest::Approx(expected[order[i]]).epsilon(1e-9));
    }
  }
}

TEST_CASE("triplet negatives exclude judged positives") {
  const std::vector<TextRecord> corpus = {{"d1", "apple river"}, {"d2", "apple tiger"}, {"d3", "violin glacier"}};
  const std::vector<TextRecord> queries = {{"q1", "apple river"}, {"q2", "violin"}};
  const Qrels qrels = {{"q1", {{"d1", 1}}}, {"q2", {{"d3", 1}}}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TripletOptions opt;
    opt.count = 1;
    opt.seed = seed;
    const auto build = build_triplets(queries, corpus, qrels, opt);
    REQUIRE(build.triplets.size() == 1);
    const Triplet& t = build.triplets[0];
    CHECK(t.query_id == "q1");
    CHECK(t.positive_id == "d1");
    CHECK(t.negative_id == "d2");
    // sampling stops once enough triplets are found, so q2 may not be visited
    REQUIRE(build.skipped.size() <= 1);
    if (!build.skipped.empty()) CHECK(build.skipped[0].query_id == "q2");
  }
  TripletOptions opt;
  opt.count = 2;
  CHECK_THROWS_AS(build_triplets(queries, corpus, qrels, opt), ConfigError);
}

TEST_CASE("triplet sampling is seeded and thread independent") {
  KeywordTaskOptions ko;
  ko.queries = 30;
  const KeywordTask task = make_keyword_task(ko);
  TripletOptions opt;
  opt.count = 20;
  opt.seed = 3;
  const auto a = build_triplets(task.queries, task.corpus, task.qrels, opt);
  opt.threads = 3;
  const auto b = build_triplets(task.queries, task.corpus, task.qrels, opt);
  CHECK(a.triplets == b.triplets);
  opt.seed = 4;
  const auto c = build_triplets(task.queries, task.corpus, task.qrels, opt);
  CHECK(a.triplets != c.triplets);
  for (const auto& t : a.triplets) {
    CHECK(task.qrels.at(t.query_id).at(t.positive_id) > 0);
    const auto& judged = task.qrels.at(t.query_id);
    const auto it = judged.find(t.negative_id);
    CHECK((it == judged.end() || it->second <= 0));
  }
}

TEST_CASE("trec files with comment lines") {
  const auto qrels = read_qrels(temp_file("relprobe_qrels.txt", "# header\nq1 0 d1 2\nq1 0 d2 0\nq2 0 d9 1\n"));
  CHECK(qrels.at("q1").at("d1") == 2);
  CHECK(qrels.at("q1").at("d2") == 0);
  CHECK(qrels.at("q2").size() == 1);

  const std::vector<RunEntry> run = {{"q1", "d2", 1, 3.5, "t"}, {"q1", "d1", 2, 1.25, "t"}};
  const auto path = (std::filesystem::temp_directory_path() / "relprobe_run.txt").string();
  write_run(path, run, "relprobe test");
  const auto back = read_run(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].doc_id == "d2");
  CHECK(back[1].rank == 2);
  CHECK(back[1].score == 1.25);

  const auto recs = read_records(temp_file("relprobe_recs.tsv", "# c\nd1\tfirst text\nd2\tsecond\n"));
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].text == "first text");
  const auto jrecs = read_records(temp_file("relprobe_recs.jsonl", "{\"_id\": \"x\", \"text\": \"hi\"}\n"));
  REQUIRE(jrecs.size() == 1);
  CHECK(jrecs[0].id == "x");
}

TEST_CASE("bm25 run") {
  const std::vector<TextRecord> corpus = {{"d1", "apple river"}, {"d2", "apple"}, {"d3", "tiger"}};
  const Bm25Index index(corpus);
  const auto run = bm25_run(index, {{"q", "apple"}}, 10);
  REQUIRE(run.size() == 2);
  CHECK(run[0].rank == 1);
  CHECK(run[0].doc_id == "d2");
  CHECK(run[1].doc_id == "d1");
  CHECK(run[0].tag == "bm25");
}
