#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lms {

/// Exit codes of run_command.
namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kCheckFailed = 1;   // gradcheck found a mismatch
inline constexpr int kUsage = 2;         // bad flags or invalid config
inline constexpr int kMissingInput = 3;  // an input file is absent, unreadable or malformed
}  // namespace exit_code

/// args[0] is the program name. Normal output goes to `out`, diagnostics to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lms
