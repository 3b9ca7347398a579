#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "relprobe/model.hpp"
#include "relprobe/tensor.hpp"

namespace relprobe {

// One entry of a safetensors header.
struct TensorInfo {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::uint64_t begin = 0;  // byte offsets relative to the data section
  std::uint64_t end = 0;
  std::filesystem::path file;
  std::uint64_t data_start = 0;  // absolute offset of the data section in `file`

  std::size_t numel() const;
};

// Reader for the safetensors container: 8-byte little-endian header length,
// JSON header, contiguous raw data. Sharded checkpoints are read through
// their model.safetensors.index.json.
class SafetensorsReader {
 public:
  explicit SafetensorsReader(const std::filesystem::path& path);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const TensorInfo& info(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  // Reads a tensor as float32 regardless of stored dtype.
  std::vector<float> read_f32(const std::string& name) const;
  // Reads a 2-D tensor; 16-bit inputs stay 16-bit when keep_half is set.
  WeightMatrix read_weight(const std::string& name, bool keep_half) const;

 private:
  void parse_file(const std::filesystem::path& file);

  std::map<std::string, TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

struct NamedTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;
};

// Writes float32 tensors in safetensors layout. Keys are emitted in sorted
// order so identical inputs produce identical files.
void write_safetensors(const std::filesystem::path& path, const std::map<std::string, NamedTensor>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

struct LoadOptions {
  bool keep_half_precision = false;
};

// Loads config.json plus weights. `weights_path` may be a .safetensors file,
// an index json, or a directory containing either. `config_path` may be empty
// when weights_path is a directory holding config.json.
Model load_model(const std::filesystem::path& weights_path, const std::filesystem::path& config_path = {},
                 const LoadOptions& options = {});

// Hugging Face tensor names for the supported decoder family.
std::map<std::string, NamedTensor> export_tensors(const Model& model);
// Writes model.safetensors and config.json. The model id and `metadata` go
// into the safetensors header.
void save_model(const Model& model, const std::filesystem::path& directory,
                const std::map<std::string, std::string>& metadata = {});

}  // namespace relprobe
