#include "sigma/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

namespace sigma {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<int> parse_int_list(const std::string& raw, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw config_error("config key '" + key + "': expected a comma-separated int list, got '" +
                               raw + "'");
        }
    }
    return out;
}

double parse_double(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return v;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected a number, got '" + raw + "'");
    }
}

int parse_int(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return v;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected an integer, got '" + raw + "'");
    }
}

std::uint64_t parse_u64(const std::string& raw, const std::string& key) {
    try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(raw, &used);
        if (used != raw.size()) throw std::invalid_argument(raw);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected an unsigned integer, got '" + raw +
                           "'");
    }
}

bool parse_bool(const std::string& raw, const std::string& key) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    throw config_error("config key '" + key + "': expected true/false, got '" + raw + "'");
}

struct KeyHandler {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

const std::vector<KeyHandler>& handlers() {
    static const std::vector<KeyHandler> h = {
        {"scenario.classes",
         [](RunConfig& c, const std::string& v) { c.scenario.classes = parse_int(v, "scenario.classes"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.classes); }},
        {"scenario.embed_dim",
         [](RunConfig& c, const std::string& v) { c.scenario.embed_dim = parse_int(v, "scenario.embed_dim"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.embed_dim); }},
        {"scenario.map_width",
         [](RunConfig& c, const std::string& v) { c.scenario.map_width = parse_int(v, "scenario.map_width"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.map_width); }},
        {"scenario.map_height",
         [](RunConfig& c, const std::string& v) { c.scenario.map_height = parse_int(v, "scenario.map_height"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.map_height); }},
        {"scenario.boxes_per_image",
         [](RunConfig& c, const std::string& v) { c.scenario.boxes_per_image = parse_int(v, "scenario.boxes_per_image"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.boxes_per_image); }},
        {"scenario.batch_size",
         [](RunConfig& c, const std::string& v) { c.scenario.batch_size = parse_int(v, "scenario.batch_size"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.batch_size); }},
        {"scenario.min_box",
         [](RunConfig& c, const std::string& v) { c.scenario.min_box = parse_int(v, "scenario.min_box"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.min_box); }},
        {"scenario.max_box",
         [](RunConfig& c, const std::string& v) { c.scenario.max_box = parse_int(v, "scenario.max_box"); },
         [](const RunConfig& c) { return std::to_string(c.scenario.max_box); }},
        {"scenario.mean_scale",
         [](RunConfig& c, const std::string& v) { c.scenario.mean_scale = parse_double(v, "scenario.mean_scale"); },
         [](const RunConfig& c) { return fmt_double(c.scenario.mean_scale); }},
        {"scenario.source_noise",
         [](RunConfig& c, const std::string& v) { c.scenario.source_noise = parse_double(v, "scenario.source_noise"); },
         [](const RunConfig& c) { return fmt_double(c.scenario.source_noise); }},
        {"scenario.target_noise",
         [](RunConfig& c, const std::string& v) { c.scenario.target_noise = parse_double(v, "scenario.target_noise"); },
         [](const RunConfig& c) { return fmt_double(c.scenario.target_noise); }},
        {"scenario.shift_scale",
         [](RunConfig& c, const std::string& v) { c.scenario.shift_scale = parse_double(v, "scenario.shift_scale"); },
         [](const RunConfig& c) { return fmt_double(c.scenario.shift_scale); }},
        {"scenario.score_sharpness",
         [](RunConfig& c, const std::string& v) { c.scenario.score_sharpness = parse_double(v, "scenario.score_sharpness"); },
         [](const RunConfig& c) { return fmt_double(c.scenario.score_sharpness); }},
        {"scenario.source_classes",
         [](RunConfig& c, const std::string& v) { c.scenario.source_classes = parse_int_list(v, "scenario.source_classes"); },
         [](const RunConfig& c) { return join_ints(c.scenario.source_classes); }},
        {"scenario.target_classes",
         [](RunConfig& c, const std::string& v) { c.scenario.target_classes = parse_int_list(v, "scenario.target_classes"); },
         [](const RunConfig& c) { return join_ints(c.scenario.target_classes); }},
        {"loss.lambda1",
         [](RunConfig& c, const std::string& v) { c.lambda1 = parse_double(v, "loss.lambda1"); },
         [](const RunConfig& c) { return fmt_double(c.lambda1); }},
        {"loss.lambda2",
         [](RunConfig& c, const std::string& v) { c.lambda2 = parse_double(v, "loss.lambda2"); },
         [](const RunConfig& c) { return fmt_double(c.lambda2); }},
        {"loss.qc_mode",
         [](RunConfig& c, const std::string& v) { c.qc_mode = qc_mode_from_name(v); },
         [](const RunConfig& c) { return qc_mode_name(c.qc_mode); }},
        {"matching.include_background",
         [](RunConfig& c, const std::string& v) { c.include_background_matches = parse_bool(v, "matching.include_background"); },
         [](const RunConfig& c) { return c.include_background_matches ? "true" : "false"; }},
        {"sampling.max_nodes_per_map",
         [](RunConfig& c, const std::string& v) { c.max_nodes_per_map = parse_int(v, "sampling.max_nodes_per_map"); },
         [](const RunConfig& c) { return std::to_string(c.max_nodes_per_map); }},
        {"sampling.tau_fg",
         [](RunConfig& c, const std::string& v) { c.tau_fg = parse_double(v, "sampling.tau_fg"); },
         [](const RunConfig& c) { return fmt_double(c.tau_fg); }},
        {"sampling.tau_bg",
         [](RunConfig& c, const std::string& v) { c.tau_bg = parse_double(v, "sampling.tau_bg"); },
         [](const RunConfig& c) { return fmt_double(c.tau_bg); }},
        {"graph.edge_drop",
         [](RunConfig& c, const std::string& v) { c.edge_drop = parse_double(v, "graph.edge_drop"); },
         [](const RunConfig& c) { return fmt_double(c.edge_drop); }},
        {"sinkhorn.iterations",
         [](RunConfig& c, const std::string& v) { c.sinkhorn_iterations = parse_int(v, "sinkhorn.iterations"); },
         [](const RunConfig& c) { return std::to_string(c.sinkhorn_iterations); }},
        {"optim.learning_rate",
         [](RunConfig& c, const std::string& v) { c.learning_rate = parse_double(v, "optim.learning_rate"); },
         [](const RunConfig& c) { return fmt_double(c.learning_rate); }},
        {"optim.momentum",
         [](RunConfig& c, const std::string& v) { c.momentum = parse_double(v, "optim.momentum"); },
         [](const RunConfig& c) { return fmt_double(c.momentum); }},
        {"optim.weight_decay",
         [](RunConfig& c, const std::string& v) { c.weight_decay = parse_double(v, "optim.weight_decay"); },
         [](const RunConfig& c) { return fmt_double(c.weight_decay); }},
        {"completion.enabled",
         [](RunConfig& c, const std::string& v) { c.completion_enabled = parse_bool(v, "completion.enabled"); },
         [](const RunConfig& c) { return c.completion_enabled ? "true" : "false"; }},
        {"train.steps",
         [](RunConfig& c, const std::string& v) { c.steps = parse_int(v, "train.steps"); },
         [](const RunConfig& c) { return std::to_string(c.steps); }},
        {"run.seed",
         [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v, "run.seed"); },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"run.output_dir",
         [](RunConfig& c, const std::string& v) { c.output_dir = v; },
         [](const RunConfig& c) { return c.output_dir; }},
        {"eval.every",
         [](RunConfig& c, const std::string& v) { c.eval_every = parse_int(v, "eval.every"); },
         [](const RunConfig& c) { return std::to_string(c.eval_every); }},
        {"eval.batches",
         [](RunConfig& c, const std::string& v) { c.eval_batches = parse_int(v, "eval.batches"); },
         [](const RunConfig& c) { return std::to_string(c.eval_batches); }},
        {"gradcheck.nodes",
         [](RunConfig& c, const std::string& v) { c.gradcheck_nodes = parse_int(v, "gradcheck.nodes"); },
         [](const RunConfig& c) { return std::to_string(c.gradcheck_nodes); }},
        {"gradcheck.entries",
         [](RunConfig& c, const std::string& v) { c.gradcheck_entries = parse_int(v, "gradcheck.entries"); },
         [](const RunConfig& c) { return std::to_string(c.gradcheck_entries); }},
        {"gradcheck.corrupt_group",
         [](RunConfig& c, const std::string& v) { c.gradcheck_corrupt_group = v; },
         [](const RunConfig& c) { return c.gradcheck_corrupt_group; }},
        {"oracle.instances",
         [](RunConfig& c, const std::string& v) { c.oracle_instances = parse_int(v, "oracle.instances"); },
         [](const RunConfig& c) { return std::to_string(c.oracle_instances); }},
        {"oracle.size",
         [](RunConfig& c, const std::string& v) { c.oracle_size = parse_int(v, "oracle.size"); },
         [](const RunConfig& c) { return std::to_string(c.oracle_size); }},
        {"oracle.temperature",
         [](RunConfig& c, const std::string& v) { c.oracle_temperature = parse_double(v, "oracle.temperature"); },
         [](const RunConfig& c) { return fmt_double(c.oracle_temperature); }},
    };
    return h;
}

}  // namespace

void RunConfig::validate() const {
    scenario.validate();
    if (lambda1 < 0.0 || lambda2 < 0.0) throw config_error("loss weights must be nonnegative");
    if (!(0.0 < tau_bg && tau_bg < tau_fg && tau_fg < 1.0))
        throw config_error("need 0 < sampling.tau_bg < sampling.tau_fg < 1");
    if (edge_drop < 0.0 || edge_drop >= 1.0) throw config_error("graph.edge_drop must be in [0,1)");
    if (sinkhorn_iterations < 1) throw config_error("sinkhorn.iterations must be >= 1");
    if (max_nodes_per_map < scenario.classes + 1)
        throw config_error("sampling.max_nodes_per_map must be >= C+1");
    if (steps < 0) throw config_error("train.steps must be nonnegative");
    if (eval_every < 1) throw config_error("eval.every must be >= 1");
    if (eval_batches < 1) throw config_error("eval.batches must be >= 1");
    if (gradcheck_nodes < 2 || gradcheck_nodes > 12)
        throw config_error("gradcheck.nodes must be in 2..12 (small instances only)");
    if (oracle_size < 2 || oracle_size > 9)
        throw config_error("oracle.size must be in 2..9 (brute-force oracle range)");
    if (oracle_instances < 1) throw config_error("oracle.instances must be >= 1");
    if (oracle_temperature <= 0.0) throw config_error("oracle.temperature must be positive");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(lineno) +
                               ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool found = false;
        for (const KeyHandler& h : handlers())
            if (h.name == key) {
                h.set(cfg, value);
                found = true;
                break;
            }
        if (!found) {
            std::string accepted;
            for (const KeyHandler& h : handlers()) {
                if (!accepted.empty()) accepted += ", ";
                accepted += h.name;
            }
            throw config_error("unknown config key '" + key + "'; accepted keys: " + accepted);
        }
    }
    // scenario rng seed follows the run seed
    cfg.scenario.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw config_error("cannot read config file: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str());
}

std::string config_echo(const RunConfig& cfg) {
    std::string out;
    for (const KeyHandler& h : handlers()) out += h.name + " = " + h.get(cfg) + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const KeyHandler& h : handlers()) keys.push_back(h.name);
    return keys;
}

std::string qc_mode_name(matching::QcMode mode) {
    return mode == matching::QcMode::squared ? "squared" : "literal";
}

matching::QcMode qc_mode_from_name(const std::string& name) {
    if (name == "squared") return matching::QcMode::squared;
    if (name == "literal") return matching::QcMode::literal;
    throw config_error("loss.qc_mode must be 'squared' or 'literal', got '" + name + "'");
}

}  // namespace sigma
