#pragma once

namespace ccat {

// Entry point behind the ccat-net binary; exposed so tests can drive the CLI
// in-process. Returns the process exit status.
int cli_main(int argc, char** argv);

}  // namespace ccat
