#include "relprobe/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "relprobe/errors.hpp"
#include "relprobe/random.hpp"

namespace relprobe {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (float& v : m.values()) v = static_cast<float>(normal(rng) * stddev);
  return m;
}

std::vector<float> filled(std::size_t n, float value) { return std::vector<float>(n, value); }

}  // namespace

Model random_model(const RandomModelSpec& spec) {
  ModelConfig c;
  c.n_layers = spec.layers;
  c.n_heads = spec.heads;
  c.n_kv_heads = spec.kv_heads;
  c.d_model = spec.d_model;
  c.d_ff = spec.d_ff;
  c.vocab_size = spec.vocab;
  c.max_seq_len = 512;
  c.validate();
  Rng rng(derive_seed(spec.seed, "random-model"));
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.head_dim());
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  Weights w;
  w.embed = WeightMatrix(gaussian(c.vocab_size, d, 1.0, rng));
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = filled(d, 1.0f);
    lw.ffn_norm = filled(d, 1.0f);
    for (auto& g : lw.attn_norm) g += static_cast<float>(0.1 * normal(rng));
    for (auto& g : lw.ffn_norm) g += static_cast<float>(0.1 * normal(rng));
    lw.wq = WeightMatrix(gaussian(c.n_heads * dh, d, s_in, rng));
    lw.wk = WeightMatrix(gaussian(c.n_kv_heads * dh, d, s_in, rng));
    lw.wv = WeightMatrix(gaussian(c.n_kv_heads * dh, d, s_in, rng));
    lw.wo = WeightMatrix(gaussian(d, c.n_heads * dh, 1.0 / std::sqrt(static_cast<double>(c.n_heads * dh)), rng));
    lw.w_gate = WeightMatrix(gaussian(c.d_ff, d, s_in, rng));
    lw.w_up = WeightMatrix(gaussian(c.d_ff, d, s_in, rng));
    lw.w_down = WeightMatrix(gaussian(d, c.d_ff, 1.0 / std::sqrt(static_cast<double>(c.d_ff)), rng));
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = filled(d, 1.0f);
  w.unembed = WeightMatrix(gaussian(c.vocab_size, d, s_in, rng));
  w.unembed_bias.resize(c.vocab_size);
  for (auto& b : w.unembed_bias) b = static_cast<float>(0.1 * normal(rng));
  Model model(c, std::move(w));
  model.set_id("random-L" + std::to_string(spec.layers) + "H" + std::to_string(spec.heads) + "-d" +
               std::to_string(spec.d_model) + "-s" + std::to_string(spec.seed));
  return model;
}

namespace {

const std::vector<std::string> kTemplateWords = {"<s>",          "Document:", "Document A:", "\nDocument B:",
                                                 "\nQuery:",     "\nRelevant?", "\nFirst better?",
                                                 " Answer:",     " yes",      " no"};

}  // namespace

const std::vector<std::string>& keyword_words() {
  static const std::vector<std::string> words = {"apple", "river",   "copper", "violin", "glacier",
                                                 "tiger", "lantern", "orbit",  "maple",  "harbor"};
  return words;
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {"the", "of", "and", "with", "near", "some"};
  return words;
}

FixtureTokenizer keyword_tokenizer(std::size_t vocab_size) {
  std::vector<std::string> words = kTemplateWords;
  for (const auto& k : keyword_words()) words.push_back(" " + k);
  for (const auto& f : filler_words()) words.push_back(" " + f);
  if (vocab_size > 0) {
    if (vocab_size < 256 + words.size()) throw ConfigError("keyword vocabulary needs at least " +
                                                           std::to_string(256 + words.size()) + " ids");
    for (std::size_t i = 0; 256 + words.size() < vocab_size; ++i) words.push_back("<unused" + std::to_string(i) + ">");
  }
  return FixtureTokenizer(std::move(words));
}

PromptTemplate keyword_template() {
  PromptTemplate t;
  t.pointwise = "<s>Document: {document}\nQuery: {query}\nRelevant? Answer:";
  t.pairwise = "<s>Document A: {document_a}\nDocument B: {document_b}\nQuery: {query}\nFirst better? Answer:";
  return t;
}

KeywordTask make_keyword_task(const KeywordTaskOptions& options) {
  if (options.doc_length < 4) throw ConfigError("keyword task documents need at least four words");
  if (options.docs_per_query < 2) throw ConfigError("keyword task needs at least two documents per query");
  const auto& kws = keyword_words();
  const auto& fillers = filler_words();
  Rng rng(derive_seed(options.seed, "keyword-task"));
  KeywordTask task;

  auto make_doc = [&](std::vector<std::size_t> keywords) {
    std::vector<std::string> words;
    for (auto k : keywords) words.push_back(kws[k]);
    while (words.size() < options.doc_length) words.push_back(fillers[uniform_index(rng, fillers.size())]);
    shuffle(words, rng);
    std::string text;
    for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
    return text;
  };
  auto other_keywords = [&](std::size_t count, std::set<std::size_t> exclude) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      const std::size_t k = uniform_index(rng, kws.size());
      if (exclude.insert(k).second) out.push_back(k);
    }
    return out;
  };

  std::vector<std::pair<std::size_t, std::size_t>> query_keys;
  std::vector<std::vector<std::size_t>> query_docs(options.queries);
  for (std::size_t q = 0; q < options.queries; ++q) {
    const std::size_t a = uniform_index(rng, kws.size());
    std::size_t b = uniform_index(rng, kws.size() - 1);
    if (b >= a) ++b;
    query_keys.push_back({a, b});
    task.queries.push_back({"q" + std::to_string(q), kws[a] + " " + kws[b]});
    for (std::size_t i = 0; i < options.docs_per_query; ++i) {
      std::vector<std::size_t> keys;
      if (i == 0) {
        keys = {a, b};
        const auto extra = other_keywords(uniform_index(rng, 2), {a, b});
        keys.insert(keys.end(), extra.begin(), extra.end());
      } else if (i % 2 == 1) {
        keys = {uniform_index(rng, 2) == 0 ? a : b};
        const auto extra = other_keywords(1 + uniform_index(rng, 2), {a, b});
        keys.insert(keys.end(), extra.begin(), extra.end());
      } else {
        keys = other_keywords(1 + uniform_index(rng, 3), {});
      }
      query_docs[q].push_back(task.corpus.size());
      task.corpus.push_back({"d" + std::to_string(task.corpus.size()), make_doc(keys)});
    }
  }

  std::vector<std::set<std::string>> doc_terms;
  for (const auto& d : task.corpus) {
    const auto terms = analyze(d.text);
    doc_terms.emplace_back(terms.begin(), terms.end());
  }
  for (std::size_t q = 0; q < options.queries; ++q) {
    const auto& [a, b] = query_keys[q];
    auto& judged = task.qrels[task.queries[q].id];
    for (std::size_t d = 0; d < task.corpus.size(); ++d) {
      if (doc_terms[d].count(kws[a]) && doc_terms[d].count(kws[b])) judged[task.corpus[d].id] = 1;
    }
    // Candidates: the documents generated for this query, then random fill,
    // capped at the run depth, in random order.
    std::vector<std::size_t> cands;
    auto add = [&](std::size_t d) {
      if (cands.size() < options.candidates && std::find(cands.begin(), cands.end(), d) == cands.end()) {
        cands.push_back(d);
      }
    };
    for (auto d : query_docs[q]) add(d);
    while (cands.size() < std::min(options.candidates, task.corpus.size())) add(uniform_index(rng, task.corpus.size()));
    shuffle(cands, rng);
    int rank = 1;
    for (auto d : cands) {
      judged.emplace(task.corpus[d].id, 0);
      task.first_stage.push_back({task.queries[q].id, task.corpus[d].id, rank,
                                  static_cast<double>(cands.size()) - rank + 1.0, "shuffled"});
      ++rank;
    }
  }
  return task;
}

namespace {

// Residual layout of the planted model.
constexpr int kConst = 0;
constexpr int kBos = 1;
constexpr int kKeyword = 2;
constexpr int kQueryMark = 3;
constexpr int kDocBMark = 4;
constexpr int kAnswer = 5;
constexpr int kAfterQuery = 6;
constexpr int kAfterDocB = 7;
constexpr int kMatch = 8;
constexpr int kYes = 9;
constexpr int kKeywordId = 16;
constexpr int kNoiseBegin = 128;

constexpr float kConstValue = 10.0f;
constexpr double kTokenNoiseNorm = 3.0;
constexpr float kAnswerScale = 3.0f;

// Head-local dimensions that rotary embeddings leave (almost) untouched: the
// first rotary pair spins at one radian per position, the others barely move
// at the huge base used here.
constexpr int kSlots[] = {1, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15};

}  // namespace

PlantedCircuit planted_circuit(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 16;
  c.n_kv_heads = 8;
  c.d_model = 256;
  c.d_ff = 32;
  c.rope_theta = 1e30;
  c.max_seq_len = 512;
  FixtureTokenizer tokenizer = keyword_tokenizer();
  c.vocab_size = static_cast<int>(tokenizer.vocab_size());
  c.validate();

  const int d = c.d_model;
  const int dh = c.head_dim();
  const int n_noise = d - kNoiseBegin;
  Rng rng(derive_seed(seed, "planted-circuit"));
  auto id_of = [&](const std::string& w) { return *tokenizer.word_id(w); };

  // Embeddings: constant direction, role flags, keyword one-hot, and a
  // fixed-norm random component in the noise subspace.
  Matrix embed(c.vocab_size, d);
  for (int t = 0; t < c.vocab_size; ++t) {
    auto row = embed.row(t);
    row[kConst] = kConstValue;
    std::vector<double> noise(n_noise);
    double norm = 0.0;
    for (auto& v : noise) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int i = 0; i < n_noise; ++i) row[kNoiseBegin + i] = static_cast<float>(noise[i] / norm * kTokenNoiseNorm);
  }
  embed(id_of("<s>"), kBos) = 1.0f;
  embed(id_of("\nQuery:"), kQueryMark) = 1.0f;
  embed(id_of("\nDocument B:"), kDocBMark) = 1.0f;
  embed(id_of(" Answer:"), kAnswer) = 1.0f;
  for (std::size_t k = 0; k < keyword_words().size(); ++k) {
    const TokenId t = id_of(" " + keyword_words()[k]);
    embed(t, kKeyword) = 1.0f;
    embed(t, kKeywordId + static_cast<int>(k)) = 1.0f;
  }

  // Every norm gain is the RMS of a typical residual, so the normalized
  // stream stays close to the raw one.
  const float gain = static_cast<float>(
      std::sqrt((kConstValue * kConstValue + kTokenNoiseNorm * kTokenNoiseNorm + 2.0) / static_cast<double>(d)));
  const float unit = 1.0f / kConstValue;  // reads the constant direction as 1
  // Attention multiplies q·k by 1/sqrt(dh); queries carry the inverse.
  const float qs = std::sqrt(static_cast<float>(dh));

  struct LayerBuild {
    Matrix wq, wk, wv, wo;
  };
  std::vector<LayerBuild> layers(c.n_layers);
  for (auto& lb : layers) {
    lb.wq = gaussian(c.n_heads * dh, d, 0.05, rng);
    lb.wk = gaussian(c.n_kv_heads * dh, d, 0.05, rng);
    lb.wv = gaussian(c.n_kv_heads * dh, d, 0.05, rng);
    lb.wo = Matrix(d, c.n_heads * dh);
    for (int r = kNoiseBegin; r < d; ++r) {
      for (int col = 0; col < c.n_heads * dh; ++col) lb.wo(r, col) = static_cast<float>(0.02 * normal(rng));
    }
  }
  // Zeroes a circuit head's query, its key/value head and its output columns.
  auto claim = [&](HeadId id) {
    LayerBuild& lb = layers[id.layer];
    const int kv = id.head / c.group_size();
    for (int s = 0; s < dh; ++s) {
      for (int col = 0; col < d; ++col) {
        lb.wq(id.head * dh + s, col) = 0.0f;
        lb.wk(kv * dh + s, col) = 0.0f;
        lb.wv(kv * dh + s, col) = 0.0f;
      }
      for (int r = 0; r < d; ++r) lb.wo(r, id.head * dh + s) = 0.0f;
    }
  };
  auto q = [&](HeadId id, int slot, int dim) -> float& { return layers[id.layer].wq(id.head * dh + kSlots[slot], dim); };
  auto k = [&](HeadId id, int slot, int dim) -> float& {
    return layers[id.layer].wk((id.head / c.group_size()) * dh + kSlots[slot], dim);
  };
  auto v = [&](HeadId id, int dim) -> float& { return layers[id.layer].wv((id.head / c.group_size()) * dh, dim); };
  auto out = [&](HeadId id, int dim) -> float& { return layers[id.layer].wo(dim, id.head * dh); };

  const std::vector<HeadId> position_heads = {{0, 1}, {0, 6}};
  const std::vector<HeadId> matching_heads = {{1, 3}, {1, 6}};
  const std::vector<HeadId> aggregator_heads = {{2, 5}, {3, 2}};
  for (const auto& list : {position_heads, matching_heads, aggregator_heads}) {
    for (const auto& id : list) claim(id);
  }

  // Position heads: score 10 on the marker, 5 on <s>; value = marker flag.
  const std::pair<int, int> marks[] = {{kQueryMark, kAfterQuery}, {kDocBMark, kAfterDocB}};
  for (std::size_t i = 0; i < 2; ++i) {
    const HeadId id = position_heads[i];
    q(id, 0, kConst) = qs * unit;
    k(id, 0, marks[i].first) = 10.0f;
    k(id, 0, kBos) = 5.0f;
    v(id, marks[i].first) = 1.0f;
    out(id, marks[i].second) = 1.0f;
  }

  // Matching heads: score 12 for the same keyword, 6 for <s>, -20 for tokens
  // after the query marker; value = keyword flag, negated inside document B.
  const int n_kw = static_cast<int>(keyword_words().size());
  for (const HeadId id : matching_heads) {
    for (int w = 0; w < n_kw; ++w) {
      q(id, w, kKeywordId + w) = qs * 12.0f;
      k(id, w, kKeywordId + w) = 1.0f;
    }
    q(id, n_kw, kConst) = qs * unit;
    k(id, n_kw, kAfterQuery) = -20.0f;
    q(id, n_kw + 1, kConst) = qs * unit;
    k(id, n_kw + 1, kBos) = 6.0f;
    v(id, kKeyword) = 1.0f;
    v(id, kAfterDocB) = -2.0f;
    out(id, kMatch) = 0.5f;
  }

  // Aggregators: from the answer token, score 10 on query keywords minus
  // 5 x match (pointwise only, so the least matched keyword dominates);
  // value = match - 1/2, shifted back to match in pairwise prompts.
  for (const HeadId id : aggregator_heads) {
    q(id, 0, kAnswer) = qs * 10.0f;
    k(id, 0, kKeyword) = 1.0f;
    k(id, 0, kAfterQuery) = 1.0f;
    k(id, 0, kConst) = -unit;
    q(id, 1, kAnswer) = qs * -5.0f;
    q(id, 1, kAfterDocB) = qs * 5.0f;
    k(id, 1, kMatch) = 1.0f;
    v(id, kMatch) = 1.0f;
    v(id, kConst) = -0.5f * unit;
    v(id, kAfterDocB) = 0.5f;
    out(id, kYes) = 1.0f;
  }

  Weights w;
  w.embed = WeightMatrix(std::move(embed));
  for (auto& lb : layers) {
    LayerWeights lw;
    lw.attn_norm = filled(d, gain);
    lw.ffn_norm = filled(d, gain);
    lw.wq = WeightMatrix(std::move(lb.wq));
    lw.wk = WeightMatrix(std::move(lb.wk));
    lw.wv = WeightMatrix(std::move(lb.wv));
    lw.wo = WeightMatrix(std::move(lb.wo));
    lw.w_gate = WeightMatrix(gaussian(c.d_ff, d, 0.05, rng));
    lw.w_up = WeightMatrix(gaussian(c.d_ff, d, 0.05, rng));
    Matrix down(d, c.d_ff);
    for (int r = kNoiseBegin; r < d; ++r) {
      for (int col = 0; col < c.d_ff; ++col) down(r, col) = static_cast<float>(0.02 * normal(rng));
    }
    lw.w_down = WeightMatrix(std::move(down));
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = filled(d, gain);
  Matrix unembed(c.vocab_size, d);
  for (int t = 0; t < c.vocab_size; ++t) {
    for (int r = kNoiseBegin; r < d; ++r) unembed(t, r) = static_cast<float>(0.02 * normal(rng));
  }
  unembed(id_of(" yes"), kYes) = kAnswerScale;
  unembed(id_of(" no"), kYes) = -kAnswerScale;
  w.unembed = WeightMatrix(std::move(unembed));
  w.unembed_bias.assign(c.vocab_size, 0.0f);

  Model model(c, std::move(w));
  model.set_id("planted-circuit-s" + std::to_string(seed));
  return PlantedCircuit{std::move(model), std::move(tokenizer), keyword_template(),
                        position_heads, matching_heads, aggregator_heads};
}

}  // namespace relprobe
