#pragma once

#include <string>
#include <vector>

#include <CLI11.hpp>

namespace storygen::cli {

/// Splices the entries of a subcommand's `--config FILE` into the argument
/// list as `--key=value` flags placed before the user's own flags, so that
/// command-line values win. Keys may use '-' or '_'. A key that names no
/// option of the subcommand is a ConfigError.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args);

/// `key = value` lines for every option of the parsed subcommand, in
/// registration order, with defaults filled in.
std::string resolved_config(const CLI::App& subcommand);

/// Maps the active exception to the process exit code and prints it.
///   0 ok, 1 usage/config, 2 data, 3 numeric
int report_failure();

}  // namespace storygen::cli
