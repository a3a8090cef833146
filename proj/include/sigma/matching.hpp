#pragma once

#include <utility>
#include <vector>

#include "sigma/ad.hpp"
#include "sigma/common.hpp"
#include "sigma/graph.hpp"
#include "sigma/params.hpp"

namespace sigma::matching {

/// Shared cross-attention parameters (both directions use the same maps).
struct CgiParams {
    Matrix w_q, w_k, w_v, w_p;
    LayerNorm ln;

    static CgiParams init(int dim, Rng& rng);
};

struct CgiVars {
    ad::Var w_q, w_k, w_v, w_p;
    LayerNormVars ln;
};

/// V^_s = LN(softmax((V~_s Wq)(V~_t Wk)^T)(V~_t Wv)Wp + V~_s), and the same
/// with roles swapped. Softmax runs over the counterpart-node axis.
std::pair<ad::Var, ad::Var> cross_graph_interaction(ad::Tape& t, ad::Var src, ad::Var tgt,
                                                    const CgiVars& p);

/// Node-affinity head: per-pair concat of f_p embeddings through an
/// Fc-ReLU-Fc MLP with a single output channel.
struct AffinityParams {
    Linear f_p;
    Linear mlp1;
    Linear mlp2;

    static AffinityParams init(int dim, int proj_dim, int hidden, Rng& rng);
};

struct AffinityVars {
    LinearVars f_p;
    LinearVars mlp1;
    LinearVars mlp2;
};

ad::Var node_affinity(ad::Tape& t, ad::Var src, ad::Var tgt, const AffinityVars& p);

/// Whole-matrix standardization: zero mean, unit population variance,
/// eps = 1e-5 in the denominator. Needs at least 2 entries.
ad::Var instance_normalize(ad::Tape& t, ad::Var raw);
Matrix instance_normalize(const Matrix& raw);

/// exp after detached max-subtraction, then `iterations` rounds of
/// column-normalize followed by row-normalize, so the output always ends on a
/// row step (rows sum to 1; square matrices approach doubly stochastic).
ad::Var sinkhorn_normalize(ad::Tape& t, ad::Var m, int iterations = 20);
Matrix sinkhorn_normalize(const Matrix& m, int iterations = 20);

/// y(i,j) = 1 iff labels match. Background pairs (0,0) count as positives
/// unless include_background is false.
Matrix build_match_targets(const std::vector<int>& src_labels,
                           const std::vector<int>& tgt_labels, bool include_background = true);

enum class QcMode { squared, literal };

/// TE / FS / QC decomposition of the structure-aware matching loss.
struct MatchingLossBreakdown {
    ad::Var te, fs, qc, total;
    int te_excluded_rows = 0;  // source rows with no same-category target
    bool fs_degenerate = false;  // all-positive targets: FS defined as 0
};

MatchingLossBreakdown matching_loss(ad::Tape& t, ad::Var aff_normalized, const Matrix& targets,
                                    ad::Var adj_s, ad::Var adj_t, QcMode qc_mode);

/// Value-level convenience for oracle tests.
struct MatchingLossValues {
    double te = 0.0, fs = 0.0, qc = 0.0, total = 0.0;
    int te_excluded_rows = 0;
    bool fs_degenerate = false;
};

MatchingLossValues matching_loss_values(const Matrix& aff_normalized, const Matrix& targets,
                                        const Matrix& adj_s, const Matrix& adj_t, QcMode qc_mode);

enum class MultiMatchKind { bce, mse };

/// Eq-7-style multiple matching: elementwise BCE or MSE between
/// sigmoid(raw affinity) and the targets, mean over entries. No instance
/// normalization or Sinkhorn on this path.
ad::Var multiple_matching_loss(ad::Tape& t, ad::Var aff_raw, const Matrix& targets,
                               MultiMatchKind kind);

/// Node classifier (Fc-ReLU-Fc into C+1 logits).
struct ClassifierParams {
    Linear fc1;
    Linear fc2;

    static ClassifierParams init(int dim, int hidden, int classes, Rng& rng);
};

struct ClassifierVars {
    LinearVars fc1;
    LinearVars fc2;
};

/// Mean cross-entropy of softmax(f_cls(v)) against node labels.
ad::Var node_classification_loss(ad::Tape& t, ad::Var nodes, const std::vector<int>& labels,
                                 const ClassifierVars& p);

/// Exact minimum-cost perfect assignment. Brute force over permutations for
/// N <= 9, augmenting-path (Jonker-Volgenant style) above.
struct Assignment {
    std::vector<int> row_to_col;
    double cost = 0.0;
};

Assignment hungarian_oracle(const Matrix& cost);
Assignment assignment_brute_force(const Matrix& cost);
Assignment assignment_augmenting_path(const Matrix& cost);

}  // namespace sigma::matching
