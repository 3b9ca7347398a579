#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "relprobe/checkpoint.hpp"
#include "relprobe/errors.hpp"
#include "relprobe/fixture.hpp"

using namespace relprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("relprobe_ckpt_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Raw safetensors writer: the header is assembled by hand so the reader is
// checked against the container layout rather than against our writer.
void write_raw(const fs::path& file, const std::string& name, const std::string& dtype,
               const std::vector<std::int64_t>& shape, const std::vector<std::uint8_t>& bytes) {
  nlohmann::json header;
  header[name] = {{"dtype", dtype}, {"shape", shape}, {"data_offsets", {0, bytes.size()}}};
  std::string text = header.dump();
  while (text.size() % 8 != 0) text += ' ';
  std::ofstream out(file, std::ios::binary);
  std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((n >> (8 * i)) & 0xff));
  out << text;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Model tiny() {
  RandomModelSpec spec;
  spec.layers = 2;
  spec.heads = 4;
  spec.kv_heads = 4;
  spec.d_model = 64;
  spec.vocab = 512;
  spec.seed = 3;
  return random_model(spec);
}

}  // namespace

TEST_CASE("tiny fixture round trip") {
  const fs::path dir = scratch("roundtrip");
  const Model model = tiny();
  save_model(model, dir);
  const Model loaded = load_model(dir);
  CHECK(loaded.config().n_layers == 2);
  CHECK(loaded.config().n_heads == 4);
  CHECK(loaded.id() == model.id());
  const std::vector<TokenId> tokens = {1, 2, 3, 500};
  CHECK(loaded.forward(tokens).logits == model.forward(tokens).logits);
  // file path and explicit config path work as well
  const Model again = load_model(dir / "model.safetensors", dir / "config.json");
  CHECK(again.forward(tokens).logits == model.forward(tokens).logits);
}

TEST_CASE("shape mismatch names the tensor role") {
  const fs::path dir = scratch("badwu");
  const Model model = tiny();
  auto tensors = export_tensors(model);
  auto& wu = tensors.at("lm_head.weight");
  wu.shape = {512, 32};
  wu.values.resize(512 * 32);
  write_safetensors(dir / "model.safetensors", tensors);
  std::ofstream(dir / "config.json") << model.config().to_json().dump();
  try {
    load_model(dir);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("W_U") != std::string::npos);
  }
}

TEST_CASE("missing tensor and unsupported architecture") {
  const fs::path dir = scratch("missing");
  const Model model = tiny();
  auto tensors = export_tensors(model);
  tensors.erase("model.layers.1.self_attn.k_proj.weight");
  write_safetensors(dir / "model.safetensors", tensors);
  std::ofstream(dir / "config.json") << model.config().to_json().dump();
  try {
    load_model(dir);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("W_K") != std::string::npos);
  }

  auto cfg = model.config().to_json();
  cfg["model_type"] = "gpt2";
  std::ofstream(dir / "config.json", std::ios::trunc) << cfg.dump();
  CHECK_THROWS_AS(load_model(dir), LoadError);
}

TEST_CASE("reader decodes 16-bit tensors from a hand-built container") {
  const fs::path dir = scratch("raw");
  // bf16: 1.0, -2.0 ; f16: 0.5, 3.0
  write_raw(dir / "bf16.safetensors", "w", "BF16", {1, 2}, {0x80, 0x3F, 0x00, 0xC0});
  write_raw(dir / "f16.safetensors", "w", "F16", {2}, {0x00, 0x38, 0x00, 0x42});
  const SafetensorsReader bf(dir / "bf16.safetensors");
  CHECK(bf.read_f32("w") == std::vector<float>{1.0f, -2.0f});
  const WeightMatrix kept = bf.read_weight("w", true);
  CHECK(kept.dtype() == DType::bf16);
  CHECK(kept.at(0, 1) == -2.0f);
  const SafetensorsReader f16(dir / "f16.safetensors");
  CHECK(f16.read_f32("w") == std::vector<float>{0.5f, 3.0f});

  write_raw(dir / "bad.safetensors", "w", "F32", {3}, {0, 0, 0, 0});
  CHECK_THROWS_AS(SafetensorsReader(dir / "bad.safetensors"), LoadError);
  std::ofstream(dir / "short.safetensors") << "abc";
  CHECK_THROWS_AS(SafetensorsReader(dir / "short.safetensors"), LoadError);
}

TEST_CASE("safetensors writer is deterministic and keeps metadata") {
  const fs::path dir = scratch("meta");
  std::map<std::string, NamedTensor> t;
  t["b"] = {{2}, {1.0f, 2.0f}};
  t["a"] = {{1, 1}, {3.0f}};
  write_safetensors(dir / "x.safetensors", t, {{"k", "v"}});
  write_safetensors(dir / "y.safetensors", t, {{"k", "v"}});
  std::ifstream x(dir / "x.safetensors", std::ios::binary), y(dir / "y.safetensors", std::ios::binary);
  const std::string sx((std::istreambuf_iterator<char>(x)), {}), sy((std::istreambuf_iterator<char>(y)), {});
  CHECK(sx == sy);
  const SafetensorsReader r(dir / "x.safetensors");
  CHECK(r.metadata().at("k") == "v");
  CHECK(r.names() == std::vector<std::string>{"a", "b"});
  CHECK(r.read_f32("b") == std::vector<float>{1.0f, 2.0f});
}

TEST_CASE("sharded checkpoints load through the index") {
  const fs::path dir = scratch("sharded");
  const Model model = tiny();
  auto tensors = export_tensors(model);
  std::map<std::string, NamedTensor> first, second;
  nlohmann::json index;
  int i = 0;
  for (auto& [name, t] : tensors) {
    const bool one = (i++ % 2) == 0;
    (one ? first : second)[name] = t;
    index["weight_map"][name] = one ? "model-00001-of-00002.safetensors" : "model-00002-of-00002.safetensors";
  }
  write_safetensors(dir / "model-00001-of-00002.safetensors", first);
  write_safetensors(dir / "model-00002-of-00002.safetensors", second);
  std::ofstream(dir / "model.safetensors.index.json") << index.dump();
  std::ofstream(dir / "config.json") << model.config().to_json().dump();
  const Model loaded = load_model(dir);
  const std::vector<TokenId> tokens = {4, 8, 15, 16, 23, 42};
  CHECK(loaded.forward(tokens).logits == model.forward(tokens).logits);
}
