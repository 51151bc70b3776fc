#pragma once

namespace memoir {

// Entry point shared by the binary and the in-process CLI tests.
// Exit codes: 0 success, 1 runtime/io failure (single-line "error: ..." on
// stderr), 2 usage error.
int cli_main(int argc, const char* const* argv);

}  // namespace memoir
