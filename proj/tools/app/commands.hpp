#pragma once

#include <ostream>

#include "config.hpp"
#include "relprobe/errors.hpp"

namespace relprobe::app {

// Error tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error(stage + ": " + message), stage_(std::move(stage)), detail_(message) {}
  const std::string& stage() const { return stage_; }
  const std::string& detail() const { return detail_; }

 private:
  std::string stage_;
  std::string detail_;
};

// Each command validates `config` before doing any work, writes its
// artifacts under config.out and prints a short summary to `log`.
void cmd_make_fixture(const ExperimentConfig& config, std::ostream& log);
void cmd_build_data(const ExperimentConfig& config, std::ostream& log);
void cmd_trace(const ExperimentConfig& config, std::ostream& log);
void cmd_heads(const ExperimentConfig& config, std::ostream& log);
void cmd_eval(const ExperimentConfig& config, std::ostream& log);
void cmd_judge(const ExperimentConfig& config, std::ostream& log);
void cmd_rerank(const ExperimentConfig& config, std::ostream& log);

// Dispatches on config.command.
void run_command(const ExperimentConfig& config, std::ostream& log);

}  // namespace relprobe::app
