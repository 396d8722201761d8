// SPDX-License-Identifier: Apache-2.0
//
// The `hipo` command line. Exit codes: 0 success, 1 usage, 2 data, 3 numeric
// or failed check, 4 endpoint.

#pragma once

#include <exception>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace hipo::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3, kEndpoint = 4 };

int exit_code_for(const std::exception& e);

// Directory searched for matrix files given by bare name.
std::filesystem::path preset_dir();
// A path as given if it exists, otherwise <preset_dir>/<name>[.json].
// Throws UsageError when neither exists.
std::filesystem::path resolve_matrix(const std::string& name_or_path);

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hipo::cli
