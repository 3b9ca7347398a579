#include "commands.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

#include "output.hpp"
#include "relprobe/checkpoint.hpp"
#include "relprobe/eval.hpp"
#include "relprobe/fixture.hpp"
#include "relprobe/heads.hpp"
#include "relprobe/patching.hpp"
#include "relprobe/prompt.hpp"
#include "relprobe/retrieval.hpp"

namespace relprobe::app {

namespace fs = std::filesystem;

namespace {

template <typename F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void validate(const ExperimentConfig& config) {
  stage("validating config", [&] { config.validate(); });
}

struct Workbench {
  Model model;
  std::unique_ptr<Tokenizer> tokenizer;
  std::unique_ptr<PromptRenderer> renderer;
};

PromptTemplate load_template(const ExperimentConfig& config) {
  if (!config.template_path.empty()) return PromptTemplate::load(config.template_path);
  const fs::path beside = fs::path(config.model) / "template.json";
  if (fs::is_directory(config.model) && fs::exists(beside)) return PromptTemplate::load(beside.string());
  return PromptTemplate{};
}

Workbench load_workbench(const ExperimentConfig& config) {
  Workbench wb{stage("loading model", [&] { return load_model(config.model); }), nullptr, nullptr};
  wb.tokenizer = stage("loading tokenizer", [&] { return load_tokenizer(config.tokenizer_path()); });
  stage("loading template", [&] {
    wb.renderer = std::make_unique<PromptRenderer>(*wb.tokenizer, load_template(config));
    for (PromptStyle s : {PromptStyle::pointwise, PromptStyle::pairwise}) wb.renderer->answers(s);
  });
  if (wb.tokenizer->vocab_size() > static_cast<std::size_t>(wb.model.config().vocab_size)) {
    throw StageError("loading tokenizer", "tokenizer has " + std::to_string(wb.tokenizer->vocab_size()) +
                                              " ids but the model vocabulary is " +
                                              std::to_string(wb.model.config().vocab_size));
  }
  return wb;
}

std::vector<Triplet> load_triplets(const ExperimentConfig& config) {
  auto triplets = stage("reading triplets", [&] { return read_triplets(config.triplets); });
  if (config.count > 0 && triplets.size() > config.count) triplets.resize(config.count);
  if (triplets.empty()) throw StageError("reading triplets", config.triplets + " holds no triplets");
  return triplets;
}

std::vector<PromptPair> render_pairs(const PromptRenderer& renderer, const std::vector<Triplet>& triplets,
                                     PromptStyle style) {
  return stage("rendering prompts", [&] {
    std::vector<PromptPair> pairs;
    pairs.reserve(triplets.size());
    for (const auto& t : triplets) pairs.push_back(renderer.render(t, style));
    return pairs;
  });
}

std::string dataset_name(const std::string& path) { return fs::path(path).stem().string(); }

std::string grid_stem(const std::string& style, const std::string& site, const std::string& group = {}) {
  return style + "_" + site + (group.empty() ? "" : "_" + group);
}

void write_grid(OutputDir& out, const std::string& stem, const IEGrid& grid) {
  out.write_json("grids/" + stem + ".json", "ie-grid", grid.to_json());
  out.write_text("grids/" + stem + ".csv", "ie-grid-csv", grid.to_csv());
}

IEGrid read_grid(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open grid " + file.string());
  try {
    return IEGrid::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed grid " + file.string() + ": " + e.what());
  }
}

std::string records_tsv(const std::vector<TextRecord>& records) {
  std::string body;
  for (const auto& r : records) body += r.id + "\t" + r.text + "\n";
  return body;
}

std::string qrels_text(const Qrels& qrels) {
  std::string body;
  for (const auto& [qid, docs] : qrels) {
    for (const auto& [docid, rel] : docs) body += qid + " 0 " + docid + " " + std::to_string(rel) + "\n";
  }
  return body;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

void cmd_make_fixture(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  Model model = config.fixture == "planted" ? planted_circuit(config.seed).model : [&] {
    RandomModelSpec spec;
    spec.seed = config.seed;
    spec.vocab = static_cast<int>(std::max<std::size_t>(512, keyword_tokenizer().vocab_size()));
    Model m = random_model(spec);
    return m;
  }();
  const FixtureTokenizer tokenizer = keyword_tokenizer();
  KeywordTaskOptions task_options;
  task_options.queries = config.fixture_queries;
  task_options.seed = config.seed;
  const KeywordTask task = stage("generating data", [&] { return make_keyword_task(task_options); });

  OutputDir out(config.out, OutputMeta::from_config(config, model.id()));
  const auto meta = out.meta();
  stage("writing model", [&] {
    save_model(model, out.path("model"),
               {{"config_hash", meta.config_hash}, {"seed", std::to_string(meta.seed)}, {"tool_version", kToolVersion}});
    out.record("model/model.safetensors", "weights");
    const nlohmann::json cfg_json = model.config().to_json();
    nlohmann::ordered_json cfg;
    for (const auto& [k, v] : cfg_json.items()) cfg[k] = v;
    out.write_json("model/config.json", "model-config", cfg);
    const nlohmann::json tok_json = tokenizer.to_json();
    nlohmann::ordered_json tok;
    for (const auto& [k, v] : tok_json.items()) tok[k] = v;
    out.write_json("model/fixture_tokenizer.json", "tokenizer", tok);
    out.write_json("model/template.json", "template", keyword_template().to_json());
  });
  stage("writing data", [&] {
    out.write_text("data/corpus.tsv", "corpus", records_tsv(task.corpus));
    out.write_text("data/queries.tsv", "queries", records_tsv(task.queries));
    out.write_text("data/qrels.txt", "qrels", qrels_text(task.qrels));
    write_run(out.path("data/run.txt"), task.first_stage, meta.header());
    out.record("data/run.txt", "run");
  });
  out.write_manifest();
  log << "wrote " << config.fixture << " fixture " << model.id() << " (" << model.config().n_layers << " layers, "
      << model.config().n_heads << " heads) with " << task.queries.size() << " queries and " << task.corpus.size()
      << " documents to " << config.out << "\n";
}

void cmd_build_data(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const auto corpus = stage("reading corpus", [&] { return read_records(config.corpus); });
  const auto queries = stage("reading queries", [&] { return read_records(config.queries); });
  const auto qrels = stage("reading qrels", [&] { return read_qrels(config.qrels); });
  TripletOptions options;
  options.count = config.count;
  options.seed = config.seed;
  options.depth = config.depth;
  options.bm25 = {config.k1, config.b};
  options.threads = config.threads;
  const TripletBuild build = stage("sampling triplets", [&] { return build_triplets(queries, corpus, qrels, options); });

  OutputDir out(config.out, OutputMeta::from_config(config, ""));
  stage("writing triplets", [&] {
    write_triplets(out.path("triplets.jsonl"), build.triplets, out.meta().header());
    out.record("triplets.jsonl", "triplets");
    std::map<std::string, std::size_t> reasons;
    nlohmann::ordered_json skipped = nlohmann::ordered_json::array();
    for (const auto& s : build.skipped) {
      ++reasons[s.reason];
      skipped.push_back({{"query_id", s.query_id}, {"reason", s.reason}});
    }
    nlohmann::ordered_json summary;
    summary["triplets"] = build.triplets.size();
    summary["queries"] = queries.size();
    summary["documents"] = corpus.size();
    summary["skipped"] = build.skipped.size();
    summary["skip_reasons"] = reasons;
    summary["skipped_queries"] = skipped;
    out.write_json("build_data.json", "build-summary", summary);
    log << "wrote " << build.triplets.size() << " triplets to " << out.path("triplets.jsonl") << "\n";
    log << "skipped " << build.skipped.size() << " queries\n";
    for (const auto& [reason, n] : reasons) log << "  " << n << "  " << reason << "\n";
  });
  out.write_manifest();
}

void cmd_trace(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const Workbench wb = load_workbench(config);
  const PromptStyle style = parse_style(config.style);
  const auto pairs = render_pairs(*wb.renderer, load_triplets(config), style);

  TraceOptions options;
  options.eps = config.eps;
  options.threads = config.threads;
  options.split_documents = config.split_documents;
  options.cache_precision = config.capture_precision == "bf16" ? CachePrecision::bf16 : CachePrecision::f32;
  options.dataset = dataset_name(config.triplets);

  std::vector<std::pair<std::string, IEGrid>> grids;
  stage("tracing", [&] {
    if (config.granularity == "layer") {
      std::vector<Site> sites;
      for (const auto& s : config.sites) sites.push_back(parse_site(s));
      for (auto& g : trace_components(wb.model, pairs, sites, options)) {
        grids.emplace_back(grid_stem(config.style, g.site), std::move(g));
      }
    } else if (config.granularity == "head") {
      for (const auto& name : config.positions) {
        grids.emplace_back(grid_stem(config.style, "head_out", name),
                           trace_heads(wb.model, pairs, parse_group(name), options));
      }
    } else {
      grids.emplace_back(grid_stem(config.style, "attn_pattern"), trace_attention_scores(wb.model, pairs, options));
    }
  });

  OutputDir out(config.out, OutputMeta::from_config(config, wb.model.id()));
  stage("writing grids", [&] {
    for (auto& [stem, grid] : grids) {
      if (config.clamp) grid = grid.clamped();
      write_grid(out, stem, grid);
      double best = -1e300;
      std::string where;
      for (std::size_t r = 0; r < grid.rows.size(); ++r) {
        for (std::size_t c = 0; c < grid.cols.size(); ++c) {
          if (grid.mean_ie[r][c] > best) {
            best = grid.mean_ie[r][c];
            where = "layer " + std::to_string(grid.rows[r]) + " / " + grid.cols[c];
          }
        }
      }
      log << stem << ": " << grid.rows.size() << "x" << grid.cols.size() << " grid over " << grid.prompts
          << " prompts (" << grid.excluded << " excluded), max IE " << fmt(best) << " at " << where << "\n";
    }
  });
  out.write_manifest();
}

void cmd_heads(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const fs::path dir = config.grid_dir();
  const std::string group = config.positions.front();
  const IEGrid ie_output = stage("reading grids", [&] {
    return read_grid(dir / (grid_stem(config.style, "head_out", group) + ".json"));
  });
  const IEGrid ie_attn = stage("reading grids", [&] { return read_grid(dir / (grid_stem(config.style, "attn_pattern") + ".json")); });

  const Workbench wb = load_workbench(config);
  const auto pairs = render_pairs(*wb.renderer, load_triplets(config), parse_style(config.style));

  const InteractionReport interaction =
      stage("interaction scores", [&] { return mean_interaction(wb.model, pairs, config.threads); });
  const auto report = stage("head report", [&] { return head_report(ie_output, ie_attn, interaction); });
  const auto chosen = top_heads(ie_output, config.report_heads);
  const auto unembed = stage("unembedding", [&] {
    return unembed_report(wb.model, pairs, chosen, config.top_k, wb.tokenizer.get(), config.threads);
  });

  nlohmann::ordered_json comparisons = nlohmann::ordered_json::array();
  stage("rank-biased overlap", [&] {
    for (const std::string site : {"resid", "attn_out", "mlp_out"}) {
      const fs::path a = dir / (grid_stem("pointwise", site) + ".json");
      const fs::path b = dir / (grid_stem("pairwise", site) + ".json");
      if (!fs::exists(a) || !fs::exists(b)) continue;
      const IEGrid ga = read_grid(a);
      const IEGrid gb = read_grid(b);
      for (const auto& col : ga.cols) {
        if (std::find(gb.cols.begin(), gb.cols.end(), col) == gb.cols.end()) continue;
        comparisons.push_back(compare_layer_rankings(ga, gb, col, config.rbo_p).to_json());
      }
    }
  });

  OutputDir out(config.out, OutputMeta::from_config(config, wb.model.id()));
  stage("writing reports", [&] {
    out.write_json("reports/interaction_" + config.style + ".json", "interaction", interaction.to_json());
    out.write_json("reports/heads_" + config.style + ".json", "head-report", report);
    out.write_json("reports/unembed_" + config.style + ".json", "unembed", unembed);
    nlohmann::ordered_json rbo;
    rbo["left"] = "pointwise";
    rbo["right"] = "pairwise";
    rbo["comparisons"] = comparisons;
    out.write_json("reports/rbo.json", "rbo", rbo);
  });
  out.write_manifest();

  log << "top heads by " << ie_output.site << " IE:";
  for (const auto& h : chosen) log << " " << h.to_string() << " (" << fmt(ie_output.at(h.layer, "H" + std::to_string(h.head))) << ")";
  log << "\n";
  const HeadInteraction* best = nullptr;
  for (const auto& h : interaction.heads) {
    if (!best || h.S > best->S) best = &h;
  }
  if (best) log << "largest interaction S: " << best->head.to_string() << " (" << fmt(best->S) << ")\n";
  for (const auto& c : comparisons) {
    log << "rbo " << c["site"].get<std::string>() << "/" << c["column"].get<std::string>() << " = "
        << fmt(c["rbo"].get<double>()) << "\n";
  }
  if (comparisons.empty()) log << "rbo: no pointwise/pairwise layer grid pair found in " << dir.string() << "\n";
}

void cmd_eval(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const Workbench wb = load_workbench(config);
  const fs::path dir = config.grid_dir();

  std::map<PositionGroup, IEGrid> head_grids;
  stage("reading grids", [&] {
    for (PositionGroup g : {PositionGroup::documents, PositionGroup::query, PositionGroup::instruction,
                            PositionGroup::last}) {
      const fs::path file = dir / (grid_stem(config.style, "head_out", std::string(group_name(g))) + ".json");
      if (fs::exists(file)) head_grids.emplace(g, read_grid(file));
    }
  });
  if (head_grids.empty()) {
    log << "note: no head grids in " << dir.string() << "; the plan has only the full and random rows\n";
  }
  PlanOptions plan_options;
  plan_options.group_k = config.group_k;
  plan_options.random_k = config.random_k;
  plan_options.random_seeds = config.random_seeds;
  plan_options.seed = config.seed;
  const KnockoutPlan plan = stage("building plan", [&] {
    KnockoutPlan p = make_knockout_plan(wb.model.config(), head_grids, plan_options);
    p.validate(wb.model.config());
    return p;
  });

  KnockoutInputs inputs;
  if (!config.triplets.empty()) inputs.judgment = load_triplets(config);
  if (!config.run.empty()) {
    inputs.ranking = stage("reading ranking data", [&] {
      return build_ranking_tasks(read_records(config.queries), read_records(config.corpus), read_qrels(config.qrels),
                                 read_run(config.run), config.rerank_depth);
    });
    if (config.count > 0 && inputs.ranking.size() > config.count) inputs.ranking.resize(config.count);
  }
  const KnockoutReport report =
      stage("knockout evaluation", [&] { return knockout_eval(wb.model, *wb.renderer, plan, inputs, config.threads); });

  OutputDir out(config.out, OutputMeta::from_config(config, wb.model.id()));
  stage("writing reports", [&] {
    nlohmann::ordered_json payload = report.to_json();
    payload["plan"] = plan.to_json();
    out.write_json("reports/knockout.json", "knockout", payload);
    out.write_text("reports/knockout.txt", "knockout-table", report.to_table());
  });
  out.write_manifest();
  log << report.to_table();
}

void cmd_judge(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const Workbench wb = load_workbench(config);
  const PromptStyle style = parse_style(config.style);
  const AnswerTokens answers = wb.renderer->answers(style);
  nlohmann::ordered_json payload;
  payload["style"] = config.style;

  if (config.triplets.empty()) {
    const RenderedPrompt prompt = stage("rendering prompts", [&] {
      return style == PromptStyle::pointwise ? wb.renderer->pointwise(config.query, config.document)
                                             : wb.renderer->pairwise(config.query, config.document, config.document_b);
    });
    const double ld = stage("scoring", [&] { return score_prompt(wb.model, prompt.tokens, prompt.positions, answers); });
    payload["query"] = config.query;
    payload["document"] = config.document;
    if (style == PromptStyle::pairwise) payload["document_b"] = config.document_b;
    payload["tokens"] = prompt.tokens.size();
    payload["logit_diff"] = ld;
    if (style == PromptStyle::pointwise) {
      payload["judgment"] = judge(ld) ? "relevant" : "nonrelevant";
    } else {
      payload["judgment"] = judge(ld) ? "first" : "second";
    }
    log << "logit difference " << fmt(ld) << " -> " << payload["judgment"].get<std::string>() << "\n";
  } else {
    const auto triplets = load_triplets(config);
    const auto pairs = render_pairs(*wb.renderer, triplets, style);
    std::vector<double> clean(pairs.size()), corrupted(pairs.size());
    stage("scoring", [&] {
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const RunTriple r = endpoint_runs(wb.model, pairs[i]);
        clean[i] = r.clean;
        corrupted[i] = r.corrupted;
      }
    });
    std::vector<bool> preds, golds;
    nlohmann::ordered_json items = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      preds.push_back(judge(clean[i]));
      golds.push_back(true);
      preds.push_back(judge(corrupted[i]));
      golds.push_back(false);
      items.push_back({{"query_id", triplets[i].query_id}, {"clean_logit_diff", clean[i]},
                       {"corrupted_logit_diff", corrupted[i]}});
    }
    payload["samples"] = preds.size();
    payload["f1"] = f1(preds, golds);
    payload["items"] = items;
    log << config.style << " judgment F1 " << fmt(payload["f1"].get<double>()) << " over " << preds.size()
        << " prompts\n";
  }
  OutputDir out(config.out, OutputMeta::from_config(config, wb.model.id()));
  stage("writing reports", [&] { out.write_json("reports/judge_" + config.style + ".json", "judgment", payload); });
  out.write_manifest();
}

void cmd_rerank(const ExperimentConfig& config, std::ostream& log) {
  validate(config);
  const Workbench wb = load_workbench(config);
  const PromptStyle style = parse_style(config.style);
  const bool judged = !config.qrels.empty();

  auto tasks = stage("reading ranking data", [&] {
    const auto queries = read_records(config.queries);
    const auto run = read_run(config.run);
    Qrels qrels;
    if (judged) {
      qrels = read_qrels(config.qrels);
    } else {
      for (const auto& e : run) qrels[e.query_id];
    }
    return build_ranking_tasks(queries, read_records(config.corpus), qrels, run, config.rerank_depth);
  });
  if (config.count > 0 && tasks.size() > config.count) tasks.resize(config.count);

  std::vector<RunEntry> reranked;
  nlohmann::ordered_json per_query = nlohmann::ordered_json::array();
  double first_total = 0.0, reranked_total = 0.0;
  stage("reranking", [&] {
    for (const auto& task : tasks) {
      const RerankResult r = style == PromptStyle::pointwise ? rerank_pointwise(wb.model, *wb.renderer, task, {}, config.threads)
                                                             : rerank_pairwise(wb.model, *wb.renderer, task, {}, config.threads);
      std::vector<std::string> ids;
      for (std::size_t rank = 0; rank < r.order.size(); ++rank) {
        const std::size_t c = r.order[rank];
        ids.push_back(task.candidates[c].id);
        reranked.push_back({task.query_id, task.candidates[c].id, static_cast<int>(rank + 1), r.scores[c],
                            "relprobe-" + config.style});
      }
      nlohmann::ordered_json q;
      q["query_id"] = task.query_id;
      q["candidates"] = task.candidates.size();
      q["prompts"] = r.judged_prompts;
      if (judged) {
        const double before = ndcg_at_k(task.first_stage_ids(), task.qrels, 10);
        const double after = ndcg_at_k(ids, task.qrels, 10);
        first_total += before;
        reranked_total += after;
        q["first_stage_ndcg@10"] = before;
        q["ndcg@10"] = after;
      }
      per_query.push_back(q);
    }
  });

  OutputDir out(config.out, OutputMeta::from_config(config, wb.model.id()));
  stage("writing reports", [&] {
    write_run(out.path("rerank_" + config.style + ".run"), reranked, out.meta().header());
    out.record("rerank_" + config.style + ".run", "run");
    nlohmann::ordered_json payload;
    payload["style"] = config.style;
    payload["queries"] = tasks.size();
    if (judged && !tasks.empty()) {
      payload["first_stage_ndcg@10"] = first_total / static_cast<double>(tasks.size());
      payload["ndcg@10"] = reranked_total / static_cast<double>(tasks.size());
    }
    payload["per_query"] = per_query;
    out.write_json("reports/rerank_" + config.style + ".json", "rerank", payload);
  });
  out.write_manifest();
  log << "reranked " << tasks.size() << " queries";
  if (judged && !tasks.empty()) {
    log << ": NDCG@10 " << fmt(first_total / tasks.size()) << " -> " << fmt(reranked_total / tasks.size());
  }
  log << "\n";
}

void run_command(const ExperimentConfig& config, std::ostream& log) {
  static const std::map<std::string, void (*)(const ExperimentConfig&, std::ostream&)> commands = {
      {"make-fixture", cmd_make_fixture}, {"build-data", cmd_build_data}, {"trace", cmd_trace},
      {"heads", cmd_heads},               {"eval", cmd_eval},             {"judge", cmd_judge},
      {"rerank", cmd_rerank}};
  const auto it = commands.find(config.command);
  if (it == commands.end()) throw StageError("config", "unknown command '" + config.command + "'");
  it->second(config, log);
}

}  // namespace relprobe::app
