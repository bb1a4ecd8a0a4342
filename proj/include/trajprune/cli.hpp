#pragma once

namespace trajprune {

// Full command-line entry point: subcommands analyze, train, prune, sample,
// eval. Returns the process exit code: 0 success, 2 configuration error,
// 3 degenerate score curve, 4 training divergence, 5 numerical failure
// during pruning, 1 anything else.
int run_cli(int argc, const char* const* argv);

}  // namespace trajprune
