#include "cli.hpp"

#include <algorithm>
#include <cctype>

#include <CLI11.hpp>

#include "commands.hpp"
#include "config.hpp"

namespace relprobe::app {

namespace {

std::string env_name(const std::string& flag) {
  std::string name = "RELPROBE_";
  for (char c : flag.substr(2)) name += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return name;
}

template <typename T>
CLI::Option* opt(CLI::App* sub, const std::string& flag, T& target, const std::string& help) {
  return sub->add_option(flag, target, help)->envname(env_name(flag))->capture_default_str();
}

CLI::Option* flag(CLI::App* sub, const std::string& name, bool& target, const std::string& help) {
  return sub->add_flag(name, target, help)->envname(env_name(name));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"relprobe: activation patching workbench for LLM relevance judgments", "relprobe"};
  app.set_version_flag("--version", std::string("relprobe ") + kToolVersion);
  app.set_config("--config", "", "TOML/INI file with default flag values (one [section] per command)");
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::size_t build_count = 100;

  auto common = [&](CLI::App* sub) {
    opt(sub, "--out", cfg.out, "Experiment output directory");
    opt(sub, "--seed", cfg.seed, "Random seed recorded in every output");
  };
  auto threads = [&](CLI::App* sub) { opt(sub, "--threads", cfg.threads, "Worker threads"); };
  auto model = [&](CLI::App* sub) {
    opt(sub, "--model", cfg.model, "Model directory or safetensors file")->required();
    opt(sub, "--tokenizer", cfg.tokenizer, "Tokenizer path (default: the model directory)");
    opt(sub, "--template", cfg.template_path, "Prompt template JSON (default: <model>/template.json if present)");
    opt(sub, "--style", cfg.style, "Prompt style: pointwise or pairwise");
  };
  auto limit = [&](CLI::App* sub) { opt(sub, "-n,--count", cfg.count, "Use only the first n items (0 = all)"); };
  auto ranking = [&](CLI::App* sub) {
    opt(sub, "--corpus", cfg.corpus, "Corpus (TSV or JSON lines)");
    opt(sub, "--queries", cfg.queries, "Queries (TSV or JSON lines)");
    opt(sub, "--qrels", cfg.qrels, "TREC qrels");
    opt(sub, "--run", cfg.run, "First-stage TREC run");
    opt(sub, "--rerank-depth", cfg.rerank_depth, "Candidates reranked per query");
  };

  auto* fixture = app.add_subcommand("make-fixture", "Write a synthetic model, tokenizer, template and keyword task");
  common(fixture);
  opt(fixture, "--fixture", cfg.fixture, "planted (known relevance circuit) or random (random weights)");
  opt(fixture, "--fixture-queries", cfg.fixture_queries, "Queries in the keyword task");

  auto* build = app.add_subcommand("build-data", "Sample (query, positive, BM25 negative) triplets");
  common(build);
  threads(build);
  opt(build, "--corpus", cfg.corpus, "Corpus (TSV or JSON lines)");
  opt(build, "--queries", cfg.queries, "Queries (TSV or JSON lines)");
  opt(build, "--qrels", cfg.qrels, "TREC qrels");
  opt(build, "-n,--count", build_count, "Triplets to sample");
  opt(build, "--depth", cfg.depth, "BM25 depth negatives are drawn from");
  opt(build, "--k1", cfg.k1, "BM25 k1");
  opt(build, "--b", cfg.b, "BM25 b");

  auto* trace = app.add_subcommand("trace", "Activation patching sweeps written as IE grids");
  common(trace);
  threads(trace);
  model(trace);
  limit(trace);
  opt(trace, "--triplets", cfg.triplets, "Triplet file from build-data")->required();
  opt(trace, "--granularity", cfg.granularity, "layer, head or attn-score");
  opt(trace, "--site", cfg.sites, "Sites for layer granularity (resid, attn_out, mlp_out)")->delimiter(',');
  opt(trace, "--positions", cfg.positions, "Position groups for head granularity")->delimiter(',');
  opt(trace, "--eps", cfg.eps, "Prompts with |LD_clean - LD_corrupted| <= eps are excluded");
  opt(trace, "--capture-precision", cfg.capture_precision, "Donor activation precision: f32 or bf16");
  flag(trace, "--split-documents", cfg.split_documents, "Add document_a / document_b columns");
  flag(trace, "--clamp", cfg.clamp, "Clamp mean IE to [0, 1] in the written grids");

  auto* heads = app.add_subcommand("heads", "Interaction, unembedding, correlation and RBO reports from saved grids");
  common(heads);
  threads(heads);
  model(heads);
  limit(heads);
  opt(heads, "--triplets", cfg.triplets, "Triplet file used for the grids")->required();
  opt(heads, "--positions", cfg.positions, "Position group of the head grid")->delimiter(',');
  opt(heads, "--grids", cfg.grids, "Directory holding the trace grids (default: <out>/grids)");
  opt(heads, "--top-k", cfg.top_k, "Unembedding tokens per head");
  opt(heads, "--report-heads", cfg.report_heads, "Heads in the unembedding report");
  opt(heads, "--rbo-p", cfg.rbo_p, "RBO persistence");

  auto* eval = app.add_subcommand("eval", "Head knockout on judgment F1 and reranking NDCG@10");
  common(eval);
  threads(eval);
  model(eval);
  limit(eval);
  ranking(eval);
  opt(eval, "--triplets", cfg.triplets, "Judgment triplets");
  opt(eval, "--grids", cfg.grids, "Directory holding head grids (default: <out>/grids)");
  opt(eval, "--group-k", cfg.group_k, "Heads per position-group row");
  opt(eval, "--random-k", cfg.random_k, "Heads in the random row");
  opt(eval, "--random-seeds", cfg.random_seeds, "Seeds averaged in the random row");

  auto* judge = app.add_subcommand("judge", "Relevance judgment of one prompt or a triplet file");
  common(judge);
  model(judge);
  limit(judge);
  opt(judge, "--triplets", cfg.triplets, "Triplet file");
  opt(judge, "--query", cfg.query, "Query text");
  opt(judge, "--document", cfg.document, "Document text (document A for pairwise)");
  opt(judge, "--document-b", cfg.document_b, "Second document for pairwise");

  auto* rerank = app.add_subcommand("rerank", "Rerank a first-stage run with the model");
  common(rerank);
  threads(rerank);
  model(rerank);
  limit(rerank);
  ranking(rerank);

  for (auto* sub : app.get_subcommands({})) sub->configurable();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  const auto selected = app.get_subcommands();
  cfg.command = selected.front()->get_name();
  if (cfg.command == "build-data") cfg.count = build_count;

  try {
    run_command(cfg, out);
  } catch (const StageError& e) {
    err << "relprobe " << cfg.command << ": " << e.stage() << " failed: " << e.detail() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "relprobe " << cfg.command << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace relprobe::app
