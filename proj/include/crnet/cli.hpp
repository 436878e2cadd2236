#pragma once

namespace crnet {

// Full command-line driver. Returns the process exit code: 0 success,
// 1 operational error, 2 ran-but-check-failed.
int cli_main(int argc, const char* const* argv);

}  // namespace crnet
