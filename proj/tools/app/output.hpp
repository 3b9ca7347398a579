#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "config.hpp"

namespace relprobe::app {

struct OutputMeta {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string model;

  static OutputMeta from_config(const ExperimentConfig& config, std::string model_id);
  nlohmann::ordered_json to_json() const;
  // One-line form for text files.
  std::string header() const;
};

// Writes artifacts under one experiment directory and indexes them in
// manifest.json. Existing manifest entries from other commands are kept.
class OutputDir {
 public:
  OutputDir(std::string root, OutputMeta meta);

  const std::string& root() const { return root_; }
  const OutputMeta& meta() const { return meta_; }
  std::string path(const std::string& relative) const;

  // {"meta": ..., payload...}
  void write_json(const std::string& relative, const std::string& kind, const nlohmann::ordered_json& payload);
  // Text file whose first line is "<comment> <header>".
  void write_text(const std::string& relative, const std::string& kind, const std::string& body,
                  const std::string& comment = "#");
  // File written by another routine.
  void record(const std::string& relative, const std::string& kind);

  void write_manifest() const;

 private:
  std::string root_;
  OutputMeta meta_;
  std::map<std::string, std::string> written_;  // relative path -> kind
};

}  // namespace relprobe::app
