#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprobe/tensor.hpp"

namespace relprobe {

using TokenId = std::int32_t;

struct RopeScaling {
  std::string type = "none";  // "none" or "llama3"
  double factor = 1.0;
  double low_freq_factor = 1.0;
  double high_freq_factor = 4.0;
  int original_max_position = 8192;
};

// Hyper-parameters of a pre-norm decoder (RMS norm, rotary positions, gated
// feed-forward, grouped-query attention). Field names in JSON follow the
// Hugging Face config.json conventions so real checkpoints load unchanged.
struct ModelConfig {
  std::string model_type = "llama";
  int n_layers = 0;
  int n_heads = 0;
  int n_kv_heads = 0;
  int d_model = 0;
  int d_ff = 0;
  int vocab_size = 0;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  int max_seq_len = 2048;
  bool tie_word_embeddings = false;
  bool attention_bias = false;
  RopeScaling rope_scaling;

  int head_dim() const { return d_model / n_heads; }
  int group_size() const { return n_heads / n_kv_heads; }

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct LayerWeights {
  std::vector<float> attn_norm;
  WeightMatrix wq;  // [H·dh × d]
  WeightMatrix wk;  // [KV·dh × d]
  WeightMatrix wv;  // [KV·dh × d]
  WeightMatrix wo;  // [d × H·dh]
  std::vector<float> bq, bk, bv;  // empty unless attention_bias
  std::vector<float> ffn_norm;
  WeightMatrix w_gate;  // [d_ff × d]
  WeightMatrix w_up;    // [d_ff × d]
  WeightMatrix w_down;  // [d × d_ff]
};

struct Weights {
  WeightMatrix embed;    // W_E: [|V| × d]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  WeightMatrix unembed;  // W_U: [|V| × d]
  std::vector<float> unembed_bias;  // b: |V|, zeros when the checkpoint has none
};

// Activation sites that can be captured or intervened on.
enum class Site { resid, attn_out, head_out, mlp_out, attn_pattern };

std::string_view site_name(Site site);
Site parse_site(std::string_view name);
bool site_has_head(Site site);

// Identifies one cached tensor. `head` is -1 for whole-layer sites.
//   resid[l]        stream after layer l (N×d)
//   attn_out[l]     attention block output after W_O (N×d)
//   head_out[l,h]   head h's projected output, Σ_h head_out = attn_out (N×d)
//   mlp_out[l]      feed-forward output (N×d)
//   attn_pattern[l,h]  post-softmax pattern, rows = target, cols = source (N×N)
struct CacheKey {
  Site site = Site::resid;
  int layer = 0;
  int head = -1;

  auto operator<=>(const CacheKey&) const = default;
  std::string to_string() const;
};

class ActivationCache {
 public:
  bool contains(const CacheKey& key) const { return entries_.count(key) != 0; }
  const Matrix& at(const CacheKey& key) const;
  Matrix& at(const CacheKey& key);
  void insert(const CacheKey& key, Matrix value) { entries_[key] = std::move(value); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::vector<CacheKey> keys() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<CacheKey, Matrix> entries_;
};

// A capture request: site with optional layer/head filters.
struct CapturePattern {
  Site site = Site::resid;
  std::optional<int> layer;
  std::optional<int> head;

  bool matches(const CacheKey& key) const;
};

class CaptureSet {
 public:
  CaptureSet() = default;
  CaptureSet(std::initializer_list<CapturePattern> patterns) : patterns_(patterns) {}

  static CaptureSet all();
  static CaptureSet of_keys(std::span<const CacheKey> keys);

  CaptureSet& add(CapturePattern pattern);
  CaptureSet& add(Site site, std::optional<int> layer = std::nullopt,
                  std::optional<int> head = std::nullopt);

  bool empty() const { return patterns_.empty(); }
  bool matches(const CacheKey& key) const;
  bool wants_site(Site site) const;

 private:
  std::vector<CapturePattern> patterns_;
};

// Interception point used by the intervention engine. Called once per
// computed activation, after computation and before the value is consumed
// downstream; implementations may overwrite entries in place.
class ActivationHook {
 public:
  virtual ~ActivationHook() = default;
  virtual void on_activation(const CacheKey& key, Matrix& value) = 0;
  // Lets the model skip work for layers the hook never touches.
  virtual bool touches_layer(int layer) const = 0;
};

enum class LogitScope { all_positions, last_position };

struct ForwardOptions {
  CaptureSet capture;
  ActivationHook* hook = nullptr;
  LogitScope logits = LogitScope::all_positions;
  // Resume from a cached residual instead of the embeddings: layers
  // [0, start_layer) are skipped and `start_resid` (resid[start_layer-1] of
  // the same token sequence) is used as the incoming stream.
  int start_layer = 0;
  const Matrix* start_resid = nullptr;
};

struct ForwardResult {
  Matrix logits;  // N×|V|, or 1×|V| for LogitScope::last_position
  ActivationCache cache;
};

// Immutable decoder-only transformer. Safe to share across threads; every
// forward pass owns its own buffers.
class Model {
 public:
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  ForwardResult forward(std::span<const TokenId> tokens, const ForwardOptions& options = {}) const;

  // W_U·v + b, the affine prediction head without the final normalization.
  std::vector<float> unembed(std::span<const float> vector) const;
  // Final RMS normalization applied before the prediction head.
  std::vector<float> final_norm(std::span<const float> residual) const;

  void validate_tokens(std::span<const TokenId> tokens) const;

 private:
  Matrix embed(std::span<const TokenId> tokens) const;
  void rope_tables(std::size_t n, std::vector<float>& cos_t, std::vector<float>& sin_t) const;
  void apply_rope(Matrix& projected, int n_heads, const std::vector<float>& cos_t,
                  const std::vector<float>& sin_t) const;

  ModelConfig config_;
  Weights weights_;
  std::vector<double> inv_freq_;
  std::string id_ = "model";
};

// Validates tensor shapes against the config; throws LoadError naming the
// offending tensor role (W_E, W_Q, ..., W_U, b).
void validate_weights(const ModelConfig& config, const Weights& weights);

}  // namespace relprobe
