#pragma once

#include <iosfwd>

namespace petformer::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,     // unexpected internal error
  kUsage = 2,       // bad flags or invalid configuration
  kData = 3,        // unreadable, malformed or incompatible data / files
  kDivergence = 4,  // training produced non-finite values
};

/// Entry point behind the `petformer` executable. Subcommands: synth, train,
/// eval, forecast, ablate, count-params. Normal output goes to `out`,
/// diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace petformer::cli
