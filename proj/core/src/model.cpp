#include "relprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "relprobe/errors.hpp"

namespace relprobe {

namespace {

Matrix rms_norm(const Matrix& x, const std::vector<float>& gain, double eps) {
  Matrix out(x.rows(), x.cols());
  const auto width = static_cast<float>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const float* row = x.row(i).data();
    const float mean_sq = dot(row, row, x.cols()) / width;
    const float inv = 1.0f / std::sqrt(mean_sq + static_cast<float>(eps));
    float* dst = out.row(i).data();
    for (std::size_t c = 0; c < x.cols(); ++c) dst[c] = row[c] * inv * gain[c];
  }
  return out;
}

void add_bias(Matrix& m, const std::vector<float>& bias) {
  if (bias.empty()) return;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

float silu(float v) { return v / (1.0f + std::exp(-v)); }

int require_int(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_integer()) {
    throw LoadError(std::string("model config is missing integer field '") + key + "'");
  }
  return j.at(key).get<int>();
}

}  // namespace

std::string_view site_name(Site site) {
  switch (site) {
    case Site::resid: return "resid";
    case Site::attn_out: return "attn_out";
    case Site::head_out: return "head_out";
    case Site::mlp_out: return "mlp_out";
    case Site::attn_pattern: return "attn_pattern";
  }
  return "unknown";
}

Site parse_site(std::string_view name) {
  for (Site s : {Site::resid, Site::attn_out, Site::head_out, Site::mlp_out, Site::attn_pattern}) {
    if (site_name(s) == name) return s;
  }
  throw ConfigError("unknown activation site '" + std::string(name) + "'");
}

bool site_has_head(Site site) { return site == Site::head_out || site == Site::attn_pattern; }

std::string CacheKey::to_string() const {
  std::string out(site_name(site));
  out += "[" + std::to_string(layer);
  if (head >= 0) out += "," + std::to_string(head);
  out += "]";
  return out;
}

const Matrix& ActivationCache::at(const CacheKey& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("activation cache has no entry " + key.to_string());
  return it->second;
}

Matrix& ActivationCache::at(const CacheKey& key) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("activation cache has no entry " + key.to_string());
  return it->second;
}

std::vector<CacheKey> ActivationCache::keys() const {
  std::vector<CacheKey> out;
  out.reserve(entries_.size());
  for (const auto& [key, value] : entries_) out.push_back(key);
  return out;
}

bool CapturePattern::matches(const CacheKey& key) const {
  if (key.site != site) return false;
  if (layer && *layer != key.layer) return false;
  if (head && *head != key.head) return false;
  return true;
}

CaptureSet CaptureSet::all() {
  CaptureSet set;
  for (Site s : {Site::resid, Site::attn_out, Site::head_out, Site::mlp_out, Site::attn_pattern}) {
    set.add(s);
  }
  return set;
}

CaptureSet CaptureSet::of_keys(std::span<const CacheKey> keys) {
  CaptureSet set;
  for (const auto& key : keys) {
    set.add(key.site, key.layer, key.head >= 0 ? std::optional<int>(key.head) : std::nullopt);
  }
  return set;
}

CaptureSet& CaptureSet::add(CapturePattern pattern) {
  patterns_.push_back(pattern);
  return *this;
}

CaptureSet& CaptureSet::add(Site site, std::optional<int> layer, std::optional<int> head) {
  return add(CapturePattern{site, layer, head});
}

bool CaptureSet::matches(const CacheKey& key) const {
  return std::any_of(patterns_.begin(), patterns_.end(),
                     [&](const CapturePattern& p) { return p.matches(key); });
}

bool CaptureSet::wants_site(Site site) const {
  return std::any_of(patterns_.begin(), patterns_.end(),
                     [&](const CapturePattern& p) { return p.site == site; });
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(n_kv_heads, "n_kv_heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("model config: n_heads must be divisible by n_kv_heads");
  }
  if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model config: head dimension must be even for rotary embeddings");
  if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be positive");
  if (!(rope_theta > 0.0)) throw ConfigError("model config: rope_theta must be positive");
  if (rope_scaling.type != "none" && rope_scaling.type != "llama3") {
    throw ConfigError("model config: unsupported rope_scaling type '" + rope_scaling.type + "'");
  }
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.model_type = j.value("model_type", std::string("llama"));
  if (c.model_type != "llama" && c.model_type != "qwen2" && c.model_type != "mistral") {
    throw LoadError("unsupported architecture field model_type='" + c.model_type + "'");
  }
  if (j.contains("hidden_act") && j.at("hidden_act") != "silu") {
    throw LoadError("unsupported architecture field hidden_act='" +
                    j.at("hidden_act").get<std::string>() + "'");
  }
  c.n_layers = require_int(j, "num_hidden_layers");
  c.n_heads = require_int(j, "num_attention_heads");
  c.n_kv_heads = j.contains("num_key_value_heads") && !j.at("num_key_value_heads").is_null()
                     ? j.at("num_key_value_heads").get<int>()
                     : c.n_heads;
  c.d_model = require_int(j, "hidden_size");
  c.d_ff = require_int(j, "intermediate_size");
  c.vocab_size = require_int(j, "vocab_size");
  c.rope_theta = j.value("rope_theta", 10000.0);
  c.norm_eps = j.value("rms_norm_eps", 1e-6);
  c.max_seq_len = j.value("max_position_embeddings", 2048);
  if (j.contains("sliding_window") && j.at("sliding_window").is_number_integer() &&
      j.value("use_sliding_window", c.model_type == "mistral")) {
    c.max_seq_len = std::min(c.max_seq_len, j.at("sliding_window").get<int>());
  }
  c.tie_word_embeddings = j.value("tie_word_embeddings", false);
  c.attention_bias = j.value("attention_bias", c.model_type == "qwen2");
  if (j.contains("head_dim") && j.at("head_dim").is_number_integer() && c.n_heads > 0 &&
      j.at("head_dim").get<int>() != c.d_model / c.n_heads) {
    throw LoadError("unsupported architecture field head_dim (must equal hidden_size / num_attention_heads)");
  }
  if (j.contains("rope_scaling") && !j.at("rope_scaling").is_null()) {
    const auto& rs = j.at("rope_scaling");
    std::string type = rs.value("rope_type", rs.value("type", std::string("none")));
    if (type != "llama3") throw LoadError("unsupported architecture field rope_scaling type='" + type + "'");
    c.rope_scaling.type = type;
    c.rope_scaling.factor = rs.value("factor", 1.0);
    c.rope_scaling.low_freq_factor = rs.value("low_freq_factor", 1.0);
    c.rope_scaling.high_freq_factor = rs.value("high_freq_factor", 4.0);
    c.rope_scaling.original_max_position = rs.value("original_max_position_embeddings", 8192);
  }
  c.validate();
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j = {
      {"model_type", model_type},
      {"hidden_act", "silu"},
      {"num_hidden_layers", n_layers},
      {"num_attention_heads", n_heads},
      {"num_key_value_heads", n_kv_heads},
      {"hidden_size", d_model},
      {"intermediate_size", d_ff},
      {"vocab_size", vocab_size},
      {"rope_theta", rope_theta},
      {"rms_norm_eps", norm_eps},
      {"max_position_embeddings", max_seq_len},
      {"tie_word_embeddings", tie_word_embeddings},
      {"attention_bias", attention_bias},
  };
  if (rope_scaling.type == "llama3") {
    j["rope_scaling"] = {{"rope_type", "llama3"},
                         {"factor", rope_scaling.factor},
                         {"low_freq_factor", rope_scaling.low_freq_factor},
                         {"high_freq_factor", rope_scaling.high_freq_factor},
                         {"original_max_position_embeddings", rope_scaling.original_max_position}};
  } else {
    j["rope_scaling"] = nullptr;
  }
  return j;
}

void validate_weights(const ModelConfig& c, const Weights& w) {
  auto check = [](const WeightMatrix& m, std::size_t rows, std::size_t cols, const std::string& role) {
    if (m.rows() != rows || m.cols() != cols) {
      throw LoadError("tensor " + role + ": expected shape [" + std::to_string(rows) + ", " +
                      std::to_string(cols) + "], got [" + std::to_string(m.rows()) + ", " +
                      std::to_string(m.cols()) + "]");
    }
  };
  auto check_vec = [](const std::vector<float>& v, std::size_t n, const std::string& role) {
    if (v.size() != n) {
      throw LoadError("tensor " + role + ": expected length " + std::to_string(n) + ", got " +
                      std::to_string(v.size()));
    }
  };
  const std::size_t d = c.d_model, V = c.vocab_size, ff = c.d_ff;
  const std::size_t q_width = static_cast<std::size_t>(c.n_heads) * c.head_dim();
  const std::size_t kv_width = static_cast<std::size_t>(c.n_kv_heads) * c.head_dim();
  check(w.embed, V, d, "W_E");
  if (w.layers.size() != static_cast<std::size_t>(c.n_layers)) {
    throw LoadError("weights hold " + std::to_string(w.layers.size()) + " layers, config declares " +
                    std::to_string(c.n_layers));
  }
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    const std::string at = " (layer " + std::to_string(l) + ")";
    check_vec(lw.attn_norm, d, "attn_norm" + at);
    check(lw.wq, q_width, d, "W_Q" + at);
    check(lw.wk, kv_width, d, "W_K" + at);
    check(lw.wv, kv_width, d, "W_V" + at);
    check(lw.wo, d, q_width, "W_O" + at);
    if (c.attention_bias) {
      check_vec(lw.bq, q_width, "b_Q" + at);
      check_vec(lw.bk, kv_width, "b_K" + at);
      check_vec(lw.bv, kv_width, "b_V" + at);
    }
    check_vec(lw.ffn_norm, d, "ffn_norm" + at);
    check(lw.w_gate, ff, d, "W_gate" + at);
    check(lw.w_up, ff, d, "W_up" + at);
    check(lw.w_down, d, ff, "W_down" + at);
  }
  check_vec(w.final_norm, d, "final_norm");
  check(w.unembed, V, d, "W_U");
  check_vec(w.unembed_bias, V, "b");
}

Model::Model(ModelConfig config, Weights weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  validate_weights(config_, weights_);
  const int dh = config_.head_dim();
  inv_freq_.resize(dh / 2);
  for (int i = 0; i < dh / 2; ++i) {
    inv_freq_[i] = 1.0 / std::pow(config_.rope_theta, (2.0 * i) / dh);
  }
  if (config_.rope_scaling.type == "llama3") {
    const auto& rs = config_.rope_scaling;
    const double low_wavelen = rs.original_max_position / rs.low_freq_factor;
    const double high_wavelen = rs.original_max_position / rs.high_freq_factor;
    for (double& f : inv_freq_) {
      const double wavelen = 2.0 * std::numbers::pi / f;
      if (wavelen < high_wavelen) continue;
      if (wavelen > low_wavelen) {
        f /= rs.factor;
      } else {
        const double smooth = (rs.original_max_position / wavelen - rs.low_freq_factor) /
                              (rs.high_freq_factor - rs.low_freq_factor);
        f = (1.0 - smooth) * f / rs.factor + smooth * f;
      }
    }
  }
}

void Model::validate_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw LengthError("token sequence is empty");
  if (tokens.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw ShapeError("token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(config_.vocab_size));
    }
  }
}

Matrix Model::embed(std::span<const TokenId> tokens) const {
  Matrix x(tokens.size(), config_.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) weights_.embed.copy_row(tokens[i], x.row(i));
  return x;
}

void Model::rope_tables(std::size_t n, std::vector<float>& cos_t, std::vector<float>& sin_t) const {
  const std::size_t half = config_.head_dim() / 2;
  cos_t.resize(n * half);
  sin_t.resize(n * half);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(pos) * inv_freq_[i];
      cos_t[pos * half + i] = static_cast<float>(std::cos(angle));
      sin_t[pos * half + i] = static_cast<float>(std::sin(angle));
    }
  }
}

void Model::apply_rope(Matrix& projected, int n_heads, const std::vector<float>& cos_t,
                       const std::vector<float>& sin_t) const {
  const std::size_t dh = config_.head_dim();
  const std::size_t half = dh / 2;
  for (std::size_t pos = 0; pos < projected.rows(); ++pos) {
    const float* c = cos_t.data() + pos * half;
    const float* s = sin_t.data() + pos * half;
    auto row = projected.row(pos);
    for (int h = 0; h < n_heads; ++h) {
      float* v = row.data() + h * dh;
      for (std::size_t i = 0; i < half; ++i) {
        const float a = v[i];
        const float b = v[i + half];
        v[i] = a * c[i] - b * s[i];
        v[i + half] = b * c[i] + a * s[i];
      }
    }
  }
}

ForwardResult Model::forward(std::span<const TokenId> tokens, const ForwardOptions& options) const {
  validate_tokens(tokens);
  const std::size_t n = tokens.size();
  const std::size_t d = config_.d_model;
  const std::size_t dh = config_.head_dim();
  const int group = config_.group_size();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  ForwardResult result;
  Matrix x;
  const int start = options.start_layer;
  if (start < 0 || start > config_.n_layers) throw ShapeError("start_layer out of range");
  if (start > 0) {
    if (options.start_resid == nullptr || options.start_resid->rows() != n ||
        options.start_resid->cols() != d) {
      throw ShapeError("resuming at layer " + std::to_string(start) + " needs an N×d residual");
    }
    x = *options.start_resid;
  } else {
    x = embed(tokens);
  }

  ActivationHook* hook = options.hook;
  auto emit = [&](const CacheKey& key, Matrix& value) {
    if (hook != nullptr && hook->touches_layer(key.layer)) hook->on_activation(key, value);
    if (options.capture.matches(key)) result.cache.insert(key, value);
  };

  std::vector<float> scores(n);
  std::vector<float> cos_t, sin_t;
  rope_tables(n, cos_t, sin_t);
  for (int l = start; l < config_.n_layers; ++l) {
    const LayerWeights& lw = weights_.layers[l];
    const Matrix xn = rms_norm(x, lw.attn_norm, config_.norm_eps);
    Matrix q = lw.wq.project(xn);
    Matrix k = lw.wk.project(xn);
    Matrix v = lw.wv.project(xn);
    add_bias(q, lw.bq);
    add_bias(k, lw.bk);
    add_bias(v, lw.bv);
    apply_rope(q, config_.n_heads, cos_t, sin_t);
    apply_rope(k, config_.n_kv_heads, cos_t, sin_t);

    Matrix attn_out(n, d);
    for (int h = 0; h < config_.n_heads; ++h) {
      const std::size_t q_off = h * dh;
      const std::size_t kv_off = (h / group) * dh;
      Matrix pattern(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        const float* qi = q.row(i).data() + q_off;
        float max_score = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = dot(qi, k.row(j).data() + kv_off, dh) * scale;
          max_score = std::max(max_score, scores[j]);
        }
        float total = 0.0f;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - max_score);
          total += scores[j];
        }
        auto prow = pattern.row(i);
        for (std::size_t j = 0; j <= i; ++j) prow[j] = scores[j] / total;
      }
      emit(CacheKey{Site::attn_pattern, l, h}, pattern);

      Matrix z(n, dh);
      for (std::size_t i = 0; i < n; ++i) {
        auto zi = z.row(i);
        const auto prow = pattern.row(i);
        for (std::size_t j = 0; j <= i; ++j) {
          const float p = prow[j];
          if (p == 0.0f) continue;
          const float* vj = v.row(j).data() + kv_off;
          for (std::size_t c = 0; c < dh; ++c) zi[c] += p * vj[c];
        }
      }
      Matrix head_out = lw.wo.project_columns(z, q_off);
      emit(CacheKey{Site::head_out, l, h}, head_out);
      attn_out += head_out;
    }
    emit(CacheKey{Site::attn_out, l, -1}, attn_out);
    x += attn_out;

    const Matrix xn2 = rms_norm(x, lw.ffn_norm, config_.norm_eps);
    Matrix gate = lw.w_gate.project(xn2);
    const Matrix up = lw.w_up.project(xn2);
    for (std::size_t i = 0; i < gate.size(); ++i) {
      gate.values()[i] = silu(gate.values()[i]) * up.values()[i];
    }
    Matrix mlp_out = lw.w_down.project(gate);
    emit(CacheKey{Site::mlp_out, l, -1}, mlp_out);
    x += mlp_out;
    emit(CacheKey{Site::resid, l, -1}, x);
  }

  const std::size_t first = options.logits == LogitScope::last_position ? n - 1 : 0;
  Matrix final_x(n - first, d);
  for (std::size_t i = first; i < n; ++i) {
    std::copy(x.row(i).begin(), x.row(i).end(), final_x.row(i - first).begin());
  }
  const Matrix normed = rms_norm(final_x, weights_.final_norm, config_.norm_eps);
  result.logits = weights_.unembed.project(normed);
  add_bias(result.logits, weights_.unembed_bias);
  return result;
}

std::vector<float> Model::unembed(std::span<const float> vector) const {
  if (vector.size() != static_cast<std::size_t>(config_.d_model)) {
    throw ShapeError("unembed expects a " + std::to_string(config_.d_model) + "-dim vector, got " +
                     std::to_string(vector.size()));
  }
  std::vector<float> logits = weights_.unembed.project_vector(vector);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += weights_.unembed_bias[i];
  return logits;
}

std::vector<float> Model::final_norm(std::span<const float> residual) const {
  if (residual.size() != static_cast<std::size_t>(config_.d_model)) {
    throw ShapeError("final_norm expects a " + std::to_string(config_.d_model) + "-dim vector");
  }
  Matrix m(1, residual.size(), std::vector<float>(residual.begin(), residual.end()));
  return rms_norm(m, weights_.final_norm, config_.norm_eps).storage();
}

}  // namespace relprobe
