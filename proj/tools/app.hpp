#pragma once

// `odseg <subcommand> --config <path> [--key value]...`

#include <iosfwd>
#include <string>
#include <vector>

namespace odseg::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,            // bad arguments or configuration
  kIo = 3,               // unreadable, missing or malformed files
  kChannelMismatch = 4,  // input channels differ from the network
  kNumeric = 5,          // non-finite loss, gradient or value
};

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

const char* build_id();

}  // namespace odseg::cli
