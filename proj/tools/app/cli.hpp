#pragma once

#include <ostream>

namespace relprobe::app {

// Parses the command line and runs the selected command. Option values come
// from flags, then a --config file, then RELPROBE_* environment variables.
// Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace relprobe::app
