#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sigma/ad.hpp"
#include "sigma/completion.hpp"
#include "sigma/config.hpp"
#include "sigma/graph.hpp"
#include "sigma/matching.hpp"
#include "sigma/params.hpp"
#include "sigma/synth.hpp"

namespace sigma::engine {

/// Node discriminator: GRL, three Fc(256)-LayerNorm-ReLU blocks, 1-dim head.
struct DiscriminatorParams {
    Linear fc1, fc2, fc3;
    LayerNorm ln1, ln2, ln3;
    Linear head;

    static DiscriminatorParams init(int dim, Rng& rng, int width = 256);
};

struct DiscriminatorVars {
    LinearVars fc1, fc2, fc3;
    LayerNormVars ln1, ln2, ln3;
    LinearVars head;
};

struct LossWeights {
    double lambda1 = 0.1;
    double lambda2 = 0.1;
};

/// Every learnable tensor of the pipeline. The hallucination projection is a
/// learned linear map separate from the V2G projection; both memory banks
/// live outside (they are state, not parameters).
struct ModelParams {
    Matrix w_e;
    Matrix w_gcn;
    LayerNorm gcn_ln;
    synth::V2GParams v2g;
    matching::CgiParams cgi;
    matching::AffinityParams affinity;
    matching::ClassifierParams classifier;
    Linear halluc_proj;
    DiscriminatorParams disc;

    static ModelParams init(int dim, int classes, Rng& rng);
    void register_all(ParamRegistry& reg);
};

struct ModelVars {
    ad::Var w_e;
    ad::Var w_gcn;
    LayerNormVars gcn_ln;
    synth::V2GVars v2g;
    matching::CgiVars cgi;
    matching::AffinityVars affinity;
    matching::ClassifierVars classifier;
    LinearVars halluc_proj;
    DiscriminatorVars disc;
};

/// Domain-adversarial node alignment loss at the pre-GCN stage. BCE summed
/// over nodes (domain label 1 = source, 0 = target) behind a gradient
/// reversal, so discriminator parameters descend while embeddings ascend.
/// Hallucinated nodes are filtered out defensively. Empty sides contribute
/// nothing; `one_sided` reports when only one side was scored.
ad::Var node_alignment_loss(ad::Tape& t, ad::Var src_nodes, const std::vector<char>& src_halluc,
                            ad::Var tgt_nodes, const std::vector<char>& tgt_halluc,
                            const DiscriminatorVars& disc, bool* one_sided = nullptr);

/// Discriminator forward without GRL; returns per-node logits (N x 1).
ad::Var discriminator_logits(ad::Tape& t, ad::Var nodes, const DiscriminatorVars& disc);

/// L = lambda1 * L_node + lambda2 * L_mat + L_NA
ad::Var composite_loss(ad::Tape& t, ad::Var node_loss, ad::Var mat_loss, ad::Var na_loss,
                       const LossWeights& w);

struct EvalMetrics {
    double matching_accuracy = 0.0;
    double centroid_gap_mean = 0.0;
    std::map<int, double> centroid_gap_per_class;
    double discriminator_accuracy = 0.0;
    int te_excluded_rows = 0;
    double ds_residual_rows = 0.0;
    double ds_residual_cols = 0.0;
};

struct MetricsRecord {
    std::uint64_t step = 0;
    double loss_te = 0.0, loss_fs = 0.0, loss_qc = 0.0;
    double loss_mat = 0.0, loss_node = 0.0, loss_na = 0.0, loss_total = 0.0;
    int te_excluded_rows = 0;
    int halluc_source = 0, halluc_target = 0;
    int nodes_source = 0, nodes_target = 0;
    bool placeholder_used = false;
    bool aborted = false;
    std::optional<EvalMetrics> eval;

    std::string to_json_line() const;
    static MetricsRecord from_json_line(const std::string& line);
};

struct TrainState {
    RunConfig config;
    synth::Scenario scenario;
    ModelParams params;
    completion::MemoryBank bank_source;
    completion::MemoryBank bank_target;
    ParamRegistry registry;
    std::uint64_t step = 0;
    Rng rng;

    explicit TrainState(const RunConfig& cfg);
    TrainState(const TrainState&) = delete;
    TrainState& operator=(const TrainState&) = delete;
};

/// Intermediate handles the caller may inspect after a forward pass.
struct ForwardResult {
    ad::Var loss_total, loss_node, loss_na;
    matching::MatchingLossBreakdown mat;
    ad::Var affinity_normalized;
    ad::Var cgi_source, cgi_target;
    ad::Var raw_source, raw_target;  // pre-completion V2G embeddings
    graph::NodeMeta meta_source, meta_target;
    int halluc_source = 0, halluc_target = 0;
    bool placeholder_used = false;
    bool skipped = false;  // no source nodes at all: nothing to optimize

    struct BankUpdate {
        graph::Domain domain;
        int category = 0;
        Matrix nodes;  // detached enhanced embeddings
        std::vector<char> hallucinated;
    };
    std::vector<BankUpdate> bank_updates;
};

/// Runs the whole pipeline (sample -> V2G -> L_NA -> completion -> graphs ->
/// GCN -> CGI -> L_node -> affinity/Sinkhorn -> L_mat -> composite) on one
/// generated batch. Pure in the state: bank updates are returned, not
/// applied. `input_leaves` lifts sampled pixel features as gradient leaves
/// (used by the gradient checker).
ForwardResult forward_pipeline(ad::Tape& t, const ModelParams& params, ParamRegistry& registry,
                               const completion::MemoryBank& bank_s,
                               const completion::MemoryBank& bank_t,
                               const synth::ScenarioBatch& batch, const RunConfig& cfg, Rng& rng,
                               bool training, bool input_leaves = false);

/// One optimization step: forward, composite backward, SGD with momentum and
/// weight decay, then the gradient-free bank updates. A non-finite loss
/// aborts the step and leaves the state untouched.
MetricsRecord train_step(TrainState& state, const synth::ScenarioBatch& batch);

/// Deterministic evaluation (edge drop off, no updates) on eval batches that
/// are regenerated identically every call from the eval stream.
EvalMetrics evaluate_metrics(TrainState& state);

struct GroupCheck {
    std::string name;
    double max_rel_err = 0.0;
    int compared = 0;
    bool pass = true;
};

struct GradientCheckReport {
    std::vector<GroupCheck> groups;
    double threshold = 1e-4;
    bool grl_sign_ok = false;
    double grl_max_rel_err = 0.0;
    bool bank_gradient_free = false;
    bool pass = false;
    std::string first_failed;

    std::string to_json() const;
};

/// Central finite differences (h default 1e-5) on every parameter group
/// against the analytic gradients of the composite loss, plus an explicit
/// gradient-reversal sign check on L_NA and the bank's gradient-free
/// contract.
GradientCheckReport finite_difference_check(TrainState& state, double h = 1e-5);

/// Versioned checkpoint: all parameters, momentum buffers, both banks, the
/// step counter, and the RNG stream.
void save_checkpoint(const TrainState& state, const std::string& path);
void load_checkpoint(TrainState& state, const std::string& path);

}  // namespace sigma::engine
