#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "sigma/config.hpp"

namespace sigma::cli {

struct CliOptions {
    std::string command;  // run | gradcheck | oracle | eval
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> steps;
    std::optional<std::string> qc_mode;
};

/// Applies CLI overrides on top of the loaded config file.
RunConfig resolve_config(const CliOptions& opts);

/// Full training run: config echo, metrics stream (one JSON object per step),
/// loss-curve CSV, summary report, final checkpoint.
int cmd_run(const RunConfig& cfg);

/// Finite-difference check on a derived minimal instance; exit 0 iff every
/// parameter group passes at 1e-4.
int cmd_gradcheck(const RunConfig& cfg);

/// Sinkhorn-vs-Hungarian agreement report over seeded random instances.
int cmd_oracle(const RunConfig& cfg);

/// Evaluation of the checkpoint in the output directory (or a fresh
/// initialization when none exists).
int cmd_eval(const RunConfig& cfg);

int dispatch(const CliOptions& opts);

}  // namespace sigma::cli
