#pragma once

namespace pertrace::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kConvergence = 4 };

int run(int argc, char** argv);

} // namespace pertrace::cli
