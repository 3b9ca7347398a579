#include "output.hpp"

#include <filesystem>
#include <fstream>

#include "relprobe/errors.hpp"

namespace relprobe::app {

namespace fs = std::filesystem;

OutputMeta OutputMeta::from_config(const ExperimentConfig& config, std::string model_id) {
  return {config.command, config.hash(), config.seed, std::move(model_id)};
}

nlohmann::ordered_json OutputMeta::to_json() const {
  nlohmann::ordered_json j;
  j["tool"] = "relprobe";
  j["version"] = kToolVersion;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["model"] = model;
  return j;
}

std::string OutputMeta::header() const {
  return std::string("relprobe ") + kToolVersion + " command=" + command + " config=" + config_hash +
         " seed=" + std::to_string(seed) + " model=" + (model.empty() ? "-" : model);
}

OutputDir::OutputDir(std::string root, OutputMeta meta) : root_(std::move(root)), meta_(std::move(meta)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw LoadError("cannot create output directory " + root_ + ": " + ec.message());
}

std::string OutputDir::path(const std::string& relative) const { return (fs::path(root_) / relative).string(); }

namespace {

std::ofstream open_for_write(const std::string& file) {
  fs::create_directories(fs::path(file).parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file);
  return out;
}

}  // namespace

void OutputDir::write_json(const std::string& relative, const std::string& kind,
                           const nlohmann::ordered_json& payload) {
  nlohmann::ordered_json doc;
  doc["meta"] = meta_.to_json();
  for (auto it = payload.begin(); it != payload.end(); ++it) doc[it.key()] = it.value();
  auto out = open_for_write(path(relative));
  out << doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
  written_[relative] = kind;
}

void OutputDir::write_text(const std::string& relative, const std::string& kind, const std::string& body,
                           const std::string& comment) {
  auto out = open_for_write(path(relative));
  out << comment << ' ' << meta_.header() << "\n" << body;
  written_[relative] = kind;
}

void OutputDir::record(const std::string& relative, const std::string& kind) { written_[relative] = kind; }

void OutputDir::write_manifest() const {
  const std::string file = path("manifest.json");
  nlohmann::json manifest;
  if (fs::exists(file)) {
    std::ifstream in(file);
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed manifest " + file + ": " + e.what());
    }
  }
  manifest["tool"] = "relprobe";
  manifest["version"] = kToolVersion;
  if (!manifest.contains("artifacts") || !manifest["artifacts"].is_object()) manifest["artifacts"] = nlohmann::json::object();
  for (const auto& [relative, kind] : written_) {
    nlohmann::json entry;
    entry["kind"] = kind;
    entry["command"] = meta_.command;
    entry["config_hash"] = meta_.config_hash;
    entry["seed"] = meta_.seed;
    entry["model"] = meta_.model;
    manifest["artifacts"][fs::path(relative).generic_string()] = entry;
  }
  auto out = open_for_write(file);
  out << manifest.dump(2) << "\n";
}

}  // namespace relprobe::app
