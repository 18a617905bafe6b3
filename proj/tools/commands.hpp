#pragma once

#include <string>
#include <vector>

namespace relsearch::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIoOrConfig = 2;
inline constexpr int kExitNumerical = 3;

// Parses argv and runs one subcommand. Never throws; errors are printed to
// stderr and mapped to the exit codes above.
int run(int argc, char** argv);

// Worker cap from RELSEARCH_THREADS; 0 when unset or not a positive integer.
int threads_from_env();

}  // namespace relsearch::cli
