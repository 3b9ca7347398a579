#include "relprobe/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "relprobe/errors.hpp"

namespace relprobe {

namespace fs = std::filesystem;

namespace {

DType parse_dtype(const std::string& s, const std::string& tensor) {
  if (s == "F32") return DType::f32;
  if (s == "F16") return DType::f16;
  if (s == "BF16") return DType::bf16;
  throw LoadError("tensor '" + tensor + "' has unsupported dtype " + s);
}

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 2; }

std::uint64_t read_u64_le(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace

std::size_t TensorInfo::numel() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::int64_t b) { return a * static_cast<std::size_t>(b); });
}

SafetensorsReader::SafetensorsReader(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("weights path does not exist: " + path.string());
  fs::path target = path;
  if (fs::is_directory(path)) {
    if (fs::exists(path / "model.safetensors.index.json")) {
      target = path / "model.safetensors.index.json";
    } else if (fs::exists(path / "model.safetensors")) {
      target = path / "model.safetensors";
    } else {
      throw LoadError("no model.safetensors or index in " + path.string());
    }
  }
  if (target.extension() == ".json") {
    const auto index = read_json_file(target);
    if (!index.contains("weight_map")) throw LoadError("index file lacks weight_map: " + target.string());
    std::map<std::string, bool> shards;
    for (const auto& [name, shard] : index.at("weight_map").items()) shards[shard.get<std::string>()] = true;
    for (const auto& [shard, unused] : shards) parse_file(target.parent_path() / shard);
  } else {
    parse_file(target);
  }
}

void SafetensorsReader::parse_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + file.string());
  unsigned char prefix[8];
  if (!in.read(reinterpret_cast<char*>(prefix), 8)) throw LoadError("truncated header in " + file.string());
  const std::uint64_t header_len = read_u64_le(prefix);
  const auto file_size = fs::file_size(file);
  if (header_len > file_size - 8) throw LoadError("header length exceeds file size in " + file.string());
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw LoadError("truncated header in " + file.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed safetensors header in " + file.string() + ": " + e.what());
  }
  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_size = file_size - data_start;
  for (const auto& [name, entry] : j.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    TensorInfo info;
    info.name = name;
    info.dtype = parse_dtype(entry.at("dtype").get<std::string>(), name);
    info.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
      throw LoadError("tensor '" + name + "' has invalid data_offsets");
    }
    info.begin = offsets[0];
    info.end = offsets[1];
    info.file = file;
    info.data_start = data_start;
    if (info.numel() * dtype_size(info.dtype) != info.end - info.begin) {
      throw LoadError("tensor '" + name + "' byte length does not match its shape");
    }
    tensors_[name] = std::move(info);
  }
}

const TensorInfo& SafetensorsReader::info(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "'");
  return it->second;
}

std::vector<std::string> SafetensorsReader::names() const {
  std::vector<std::string> out;
  for (const auto& [name, unused] : tensors_) out.push_back(name);
  return out;
}

namespace {

std::vector<unsigned char> read_bytes(const TensorInfo& info) {
  std::ifstream in(info.file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + info.file.string());
  in.seekg(static_cast<std::streamoff>(info.data_start + info.begin));
  std::vector<unsigned char> bytes(info.end - info.begin);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw LoadError("short read for tensor '" + info.name + "'");
  }
  return bytes;
}

std::vector<std::uint16_t> to_u16(const std::vector<unsigned char>& bytes) {
  std::vector<std::uint16_t> out(bytes.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  }
  return out;
}

}  // namespace

std::vector<float> SafetensorsReader::read_f32(const std::string& name) const {
  const TensorInfo& ti = info(name);
  const auto bytes = read_bytes(ti);
  std::vector<float> out(ti.numel());
  if (ti.dtype == DType::f32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | bytes[4 * i + b];
      out[i] = std::bit_cast<float>(bits);
    }
  } else {
    const auto halves = to_u16(bytes);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = ti.dtype == DType::bf16 ? bfloat16_to_float(halves[i]) : half_to_float(halves[i]);
    }
  }
  return out;
}

WeightMatrix SafetensorsReader::read_weight(const std::string& name, bool keep_half) const {
  const TensorInfo& ti = info(name);
  if (ti.shape.size() != 2) throw LoadError("tensor '" + name + "' is not 2-D");
  const auto rows = static_cast<std::size_t>(ti.shape[0]);
  const auto cols = static_cast<std::size_t>(ti.shape[1]);
  if (keep_half && ti.dtype != DType::f32) return WeightMatrix(rows, cols, ti.dtype, to_u16(read_bytes(ti)));
  return WeightMatrix(Matrix(rows, cols, read_f32(name)));
}

void write_safetensors(const fs::path& path, const std::map<std::string, NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header;
  if (!metadata.empty()) {
    nlohmann::ordered_json meta;
    for (const auto& [k, v] : metadata) meta[k] = v;
    header["__metadata__"] = meta;
  }
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    const std::size_t numel = std::accumulate(tensor.shape.begin(), tensor.shape.end(), std::size_t{1},
                                              [](std::size_t a, std::int64_t b) { return a * b; });
    if (numel != tensor.values.size()) throw ShapeError("tensor '" + name + "' values do not match shape");
    const std::uint64_t bytes = numel * 4;
    header[name] = {{"dtype", "F32"}, {"shape", tensor.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + path.string());
  unsigned char prefix[8];
  std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) prefix[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(prefix), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : tensors) {
    for (float f : tensor.values) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
      out.write(b, 4);
    }
  }
}

namespace {

std::string layer_name(int l, const std::string& suffix) {
  return "model.layers." + std::to_string(l) + "." + suffix;
}

// Reads a tensor and checks its shape, naming the architectural role on error.
class TensorLoader {
 public:
  TensorLoader(const SafetensorsReader& reader, bool keep_half) : reader_(reader), keep_half_(keep_half) {}

  WeightMatrix matrix(const std::string& name, const std::string& role, std::int64_t rows, std::int64_t cols) const {
    expect(name, role, {rows, cols});
    return reader_.read_weight(name, keep_half_);
  }

  std::vector<float> vector(const std::string& name, const std::string& role, std::int64_t n) const {
    expect(name, role, {n});
    return reader_.read_f32(name);
  }

 private:
  void expect(const std::string& name, const std::string& role, const std::vector<std::int64_t>& shape) const {
    if (!reader_.contains(name)) throw LoadError("missing tensor '" + name + "' (" + role + ")");
    const auto& actual = reader_.info(name).shape;
    if (actual != shape) {
      auto fmt = [](const std::vector<std::int64_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
        return out + "]";
      };
      throw LoadError("tensor '" + name + "' (" + role + "): expected shape " + fmt(shape) + ", got " +
                      fmt(actual));
    }
  }

  const SafetensorsReader& reader_;
  bool keep_half_;
};

}  // namespace

Model load_model(const fs::path& weights_path, const fs::path& config_path, const LoadOptions& options) {
  fs::path cfg = config_path;
  if (cfg.empty()) {
    cfg = fs::is_directory(weights_path) ? weights_path / "config.json" : weights_path.parent_path() / "config.json";
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_json(read_json_file(cfg));
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad model config " + cfg.string() + ": " + e.what());
  }

  const SafetensorsReader reader(weights_path);
  const TensorLoader load(reader, options.keep_half_precision);
  const std::int64_t d = config.d_model, V = config.vocab_size, ff = config.d_ff;
  const std::int64_t qw = static_cast<std::int64_t>(config.n_heads) * config.head_dim();
  const std::int64_t kvw = static_cast<std::int64_t>(config.n_kv_heads) * config.head_dim();

  Weights w;
  w.embed = load.matrix("model.embed_tokens.weight", "W_E", V, d);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = load.vector(layer_name(l, "input_layernorm.weight"), "attn_norm", d);
    lw.wq = load.matrix(layer_name(l, "self_attn.q_proj.weight"), "W_Q", qw, d);
    lw.wk = load.matrix(layer_name(l, "self_attn.k_proj.weight"), "W_K", kvw, d);
    lw.wv = load.matrix(layer_name(l, "self_attn.v_proj.weight"), "W_V", kvw, d);
    lw.wo = load.matrix(layer_name(l, "self_attn.o_proj.weight"), "W_O", d, qw);
    if (config.attention_bias) {
      lw.bq = load.vector(layer_name(l, "self_attn.q_proj.bias"), "b_Q", qw);
      lw.bk = load.vector(layer_name(l, "self_attn.k_proj.bias"), "b_K", kvw);
      lw.bv = load.vector(layer_name(l, "self_attn.v_proj.bias"), "b_V", kvw);
    }
    lw.ffn_norm = load.vector(layer_name(l, "post_attention_layernorm.weight"), "ffn_norm", d);
    lw.w_gate = load.matrix(layer_name(l, "mlp.gate_proj.weight"), "W_gate", ff, d);
    lw.w_up = load.matrix(layer_name(l, "mlp.up_proj.weight"), "W_up", ff, d);
    lw.w_down = load.matrix(layer_name(l, "mlp.down_proj.weight"), "W_down", d, ff);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = load.vector("model.norm.weight", "final_norm", d);
  if (reader.contains("lm_head.weight")) {
    w.unembed = load.matrix("lm_head.weight", "W_U", V, d);
  } else if (config.tie_word_embeddings) {
    w.unembed = w.embed;
  } else {
    throw LoadError("missing tensor 'lm_head.weight' (W_U)");
  }
  w.unembed_bias = reader.contains("lm_head.bias") ? load.vector("lm_head.bias", "b", V)
                                                   : std::vector<float>(static_cast<std::size_t>(V), 0.0f);

  Model model(std::move(config), std::move(w));
  fs::path id_source = fs::is_directory(weights_path) ? weights_path : weights_path.parent_path();
  auto meta = reader.metadata().find("model_id");
  model.set_id(meta != reader.metadata().end() ? meta->second
                                               : fs::absolute(id_source).lexically_normal().filename().string());
  return model;
}

std::map<std::string, NamedTensor> export_tensors(const Model& model) {
  const auto& c = model.config();
  const auto& w = model.weights();
  std::map<std::string, NamedTensor> out;
  auto put_matrix = [&](const std::string& name, const WeightMatrix& m) {
    out[name] = NamedTensor{{static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
                            m.to_matrix().storage()};
  };
  auto put_vector = [&](const std::string& name, const std::vector<float>& v) {
    out[name] = NamedTensor{{static_cast<std::int64_t>(v.size())}, v};
  };
  put_matrix("model.embed_tokens.weight", w.embed);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    put_vector(layer_name(l, "input_layernorm.weight"), lw.attn_norm);
    put_matrix(layer_name(l, "self_attn.q_proj.weight"), lw.wq);
    put_matrix(layer_name(l, "self_attn.k_proj.weight"), lw.wk);
    put_matrix(layer_name(l, "self_attn.v_proj.weight"), lw.wv);
    put_matrix(layer_name(l, "self_attn.o_proj.weight"), lw.wo);
    if (c.attention_bias) {
      put_vector(layer_name(l, "self_attn.q_proj.bias"), lw.bq);
      put_vector(layer_name(l, "self_attn.k_proj.bias"), lw.bk);
      put_vector(layer_name(l, "self_attn.v_proj.bias"), lw.bv);
    }
    put_vector(layer_name(l, "post_attention_layernorm.weight"), lw.ffn_norm);
    put_matrix(layer_name(l, "mlp.gate_proj.weight"), lw.w_gate);
    put_matrix(layer_name(l, "mlp.up_proj.weight"), lw.w_up);
    put_matrix(layer_name(l, "mlp.down_proj.weight"), lw.w_down);
  }
  put_vector("model.norm.weight", w.final_norm);
  put_matrix("lm_head.weight", w.unembed);
  put_vector("lm_head.bias", w.unembed_bias);
  return out;
}

void save_model(const Model& model, const fs::path& directory, const std::map<std::string, std::string>& metadata) {
  fs::create_directories(directory);
  auto meta = metadata;
  meta["format"] = "pt";
  meta["model_id"] = model.id();
  write_safetensors(directory / "model.safetensors", export_tensors(model), meta);
  std::ofstream cfg(directory / "config.json", std::ios::trunc);
  cfg << model.config().to_json().dump(2) << "\n";
}

}  // namespace relprobe
