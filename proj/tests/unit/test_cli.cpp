#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "config.hpp"
#include "relprobe/errors.hpp"

namespace fs = std::filesystem;
using relprobe::app::ExperimentConfig;

namespace {

fs::path tmp_root() {
  const char* env = std::getenv("RELPROBE_TEST_TMP");
  fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "relprobe_cli_test";
  fs::create_directories(root);
  return root;
}

struct Result {
  int rc = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "relprobe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = relprobe::app::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json load(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Shared small fixture, created once.
const fs::path& fixture() {
  static const fs::path dir = [] {
    const fs::path d = tmp_root() / "fixture";
    fs::remove_all(d);
    const auto r = run({"make-fixture", "--out", d.string(), "--fixture-queries", "12", "--seed", "2"});
    REQUIRE(r.rc == 0);
    return d;
  }();
  return dir;
}

std::vector<std::string> data_args(const fs::path& fx) {
  return {"--corpus", (fx / "data/corpus.tsv").string(), "--queries", (fx / "data/queries.tsv").string(), "--qrels",
          (fx / "data/qrels.txt").string()};
}

}  // namespace

TEST_CASE("config hash and validation") {
  ExperimentConfig a;
  a.command = "trace";
  ExperimentConfig b = a;
  b.out = "elsewhere";
  b.threads = 4;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.seed = 99;
  CHECK(a.hash() != b.hash());

  ExperimentConfig bad;
  bad.command = "make-fixture";
  bad.fixture = "nope";
  CHECK_THROWS_AS(bad.validate(), relprobe::ConfigError);
  bad.fixture = "planted";
  bad.threads = 0;
  CHECK_THROWS_AS(bad.validate(), relprobe::ConfigError);
  bad.threads = 1;
  bad.style = "listwise";
  CHECK_THROWS_AS(bad.validate(), relprobe::ConfigError);
  bad.style = "pairwise";
  CHECK_NOTHROW(bad.validate());
}

TEST_CASE("fixture layout and meta") {
  const fs::path& fx = fixture();
  for (const char* f : {"model/model.safetensors", "model/config.json", "model/fixture_tokenizer.json",
                        "model/template.json", "data/corpus.tsv", "data/queries.tsv", "data/qrels.txt", "data/run.txt",
                        "manifest.json"})
    CHECK(fs::exists(fx / f));
  const auto cfg = load(fx / "model/config.json");
  CHECK(cfg["meta"]["tool"] == "relprobe");
  CHECK(cfg["meta"]["command"] == "make-fixture");
  CHECK(cfg["meta"]["seed"] == 2);
  CHECK(slurp(fx / "data/qrels.txt").rfind("# relprobe ", 0) == 0);
}

TEST_CASE("build-data honours --count and is reproducible") {
  const fs::path& fx = fixture();
  const fs::path a = tmp_root() / "bd_a", b = tmp_root() / "bd_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto args = data_args(fx);
  args.insert(args.begin(), "build-data");
  args.insert(args.end(), {"--seed", "4", "-n", "5"});
  auto with_out = [&](const fs::path& out) {
    auto v = args;
    v.push_back("--out");
    v.push_back(out.string());
    return v;
  };
  REQUIRE(run(with_out(a)).rc == 0);
  REQUIRE(run(with_out(b)).rc == 0);
  const std::string triplets = slurp(a / "triplets.jsonl");
  CHECK(triplets == slurp(b / "triplets.jsonl"));
  CHECK(slurp(a / "build_data.json") == slurp(b / "build_data.json"));
  std::istringstream lines(triplets);
  std::string line;
  int n = 0;
  while (std::getline(lines, line))
    if (!line.empty() && line[0] != '#') ++n;
  CHECK(n == 5);

  auto too_many = args;
  too_many.back() = "500";
  too_many.push_back("--out");
  too_many.push_back((tmp_root() / "bd_c").string());
  const auto r = run(too_many);
  CHECK(r.rc != 0);
  CHECK(r.err.find("sampling triplets failed") != std::string::npos);
}

TEST_CASE("environment and config file precedence") {
  const fs::path& fx = fixture();
  const fs::path out = tmp_root() / "env";
  auto seed_of = [&](std::vector<std::string> args) {
    fs::remove_all(out);
    auto base = data_args(fx);
    base.insert(base.begin(), "build-data");
    base.insert(base.end(), {"-n", "2", "--out", out.string()});
    args.insert(args.end(), base.begin(), base.end());
    const auto r = run(args);
    REQUIRE(r.rc == 0);
    return load(out / "build_data.json")["meta"]["seed"].get<int>();
  };
  const fs::path toml = tmp_root() / "exp.toml";
  std::ofstream(toml) << "[build-data]\nseed = 9\n";
  CHECK(seed_of({"--config", toml.string()}) == 9);
  setenv("RELPROBE_SEED", "7", 1);
  CHECK(seed_of({}) == 7);
  CHECK(seed_of({"--config", toml.string()}) == 9);
  const int with_flag = [&] {
    fs::remove_all(out);
    auto base = data_args(fx);
    std::vector<std::string> args = {"--config", toml.string(), "build-data", "--seed", "3", "-n", "2", "--out",
                                     out.string()};
    args.insert(args.end(), base.begin(), base.end());
    REQUIRE(run(args).rc == 0);
    return load(out / "build_data.json")["meta"]["seed"].get<int>();
  }();
  CHECK(with_flag == 3);
  unsetenv("RELPROBE_SEED");
}

TEST_CASE("errors name the failing stage") {
  const fs::path& fx = fixture();
  const fs::path out = tmp_root() / "errs";
  fs::remove_all(out);

  auto r = run({"heads", "--model", (fx / "model").string(), "--triplets", (fx / "data/qrels.txt").string(), "--out",
                out.string()});
  CHECK(r.rc == 1);
  CHECK(r.err.find("missing upstream grid") != std::string::npos);
  CHECK(r.err.find("relprobe trace --granularity head") != std::string::npos);

  r = run({"trace", "--model", (tmp_root() / "no_model").string(), "--triplets", "x.jsonl"});
  CHECK(r.rc == 1);
  CHECK(r.err.find("validating config") != std::string::npos);

  r = run({"trace", "--model", (fx / "model").string(), "--triplets", (fx / "data/qrels.txt").string(),
           "--granularity", "neuron", "--out", out.string()});
  CHECK(r.rc == 1);
  CHECK(r.err.find("--granularity") != std::string::npos);

  // a corrupt triplet file fails while reading, not during validation
  std::ofstream(out.parent_path() / "broken.jsonl") << "{not json\n";
  r = run({"trace", "--model", (fx / "model").string(), "--triplets", (out.parent_path() / "broken.jsonl").string(),
           "--out", out.string()});
  CHECK(r.rc == 1);
  CHECK(r.err.find("relprobe trace: ") == 0);
  CHECK(r.err.find("validating config") == std::string::npos);
}

TEST_CASE("judge on a single prompt") {
  const fs::path& fx = fixture();
  const fs::path out = tmp_root() / "judge";
  fs::remove_all(out);
  const auto r = run({"judge", "--model", (fx / "model").string(), "--query", "apple river", "--document",
                      "the apple and the river", "--out", out.string()});
  REQUIRE(r.rc == 0);
  const auto j = load(out / "reports/judge_pointwise.json");
  CHECK(j["meta"]["command"] == "judge");
  CHECK(r.out.find("relevant") != std::string::npos);
}
