#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sigma/matching.hpp"
#include "sigma/synth.hpp"

namespace sigma {

/// Full run configuration. Defaults mirror the published hyperparameters:
/// lambda1 = lambda2 = 0.1, tau_fg = 0.5, tau_bg = 0.05, edge drop 0.1,
/// 20 Sinkhorn iterations, 100-node per-map cap, SGD 0.0025/0.9/5e-4.
struct RunConfig {
    synth::ScenarioConfig scenario;

    double lambda1 = 0.1;
    double lambda2 = 0.1;
    matching::QcMode qc_mode = matching::QcMode::squared;
    bool include_background_matches = true;

    int max_nodes_per_map = 100;
    double tau_fg = 0.5;
    double tau_bg = 0.05;
    double edge_drop = 0.1;
    int sinkhorn_iterations = 20;

    double learning_rate = 0.0025;
    double momentum = 0.9;
    double weight_decay = 5e-4;

    bool completion_enabled = true;

    int steps = 2000;
    std::uint64_t seed = 7;
    std::string output_dir = "out";

    int eval_every = 50;
    int eval_batches = 4;

    int gradcheck_nodes = 8;          // per-side cap for the check instance
    int gradcheck_entries = 12;       // FD probes per parameter group
    std::string gradcheck_corrupt_group;  // test hook: poison one group's gradient

    int oracle_instances = 100;
    int oracle_size = 5;
    double oracle_temperature = 0.01;

    void validate() const;
};

/// Flat key-value configuration text: one `key = value` per line, `#` starts
/// a comment. Unknown keys raise config_error naming the key and the
/// accepted set.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

/// Canonical echo of every key (used for the config echo artifact and the
/// byte-identical rerun contract).
std::string config_echo(const RunConfig& cfg);

/// All accepted keys, for error messages and the defaults test.
std::vector<std::string> config_keys();

std::string qc_mode_name(matching::QcMode mode);
matching::QcMode qc_mode_from_name(const std::string& name);

}  // namespace sigma
