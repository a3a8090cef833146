#pragma once

#include <vector>

#include "sigma/ad.hpp"
#include "sigma/common.hpp"
#include "sigma/params.hpp"
#include "sigma/rng.hpp"

namespace sigma::graph {

enum class Domain { source, target };

/// Batch of node embeddings with per-node bookkeeping. Labels are 0..C with
/// 0 = background; hallucinated nodes are always foreground.
struct NodeSet {
    Matrix embeddings;  // N x D
    std::vector<int> labels;
    Domain domain = Domain::source;
    std::vector<char> hallucinated;
    std::vector<char> pseudo;

    int size() const { return static_cast<int>(embeddings.rows()); }
    int dim() const { return static_cast<int>(embeddings.cols()); }
    void validate() const;
};

/// Row-stochastic adjacency (softmax rows), possibly with dropped edges.
struct AdjacencyMatrix {
    Matrix entries;  // N x N, nonnegative
    double drop_rate = 0.0;
};

/// Per-node metadata carried alongside a tape variable through the pipeline.
struct NodeMeta {
    std::vector<int> labels;
    Domain domain = Domain::source;
    std::vector<char> hallucinated;
    std::vector<char> pseudo;

    int size() const { return static_cast<int>(labels.size()); }
};

/// Tape-resident node batch: embeddings as a Var plus metadata.
struct NodeBatch {
    ad::Var emb;
    NodeMeta meta;
};

NodeBatch lift(ad::Tape& t, const NodeSet& nodes, bool requires_grad = false);
NodeSet lower(const ad::Tape& t, const NodeBatch& batch);

/// Bernoulli edge-drop mask, drawn entry by entry in row-major order; kept
/// entries are 1, dropped entries 0. This draw order is part of the contract
/// (the reference tests re-derive it).
Matrix edge_drop_mask(int n, double drop_rate, Rng& rng);

/// A = EdgeDrop(softmax_rows(V W_e (V W_e)^T)). Drop only when training; the
/// dropped entries are zeroed without renormalizing rows.
ad::Var build_adjacency(ad::Tape& t, ad::Var embeddings, ad::Var w_e, double drop_rate,
                        Rng& rng, bool training);

/// Convenience forward-only form on plain values.
AdjacencyMatrix build_adjacency(const NodeSet& nodes, const Matrix& w_e, double drop_rate,
                                Rng& rng, bool training);

/// v~_i = LN(sum_j A_ij v_j W_gcn + v_i)
ad::Var gcn_forward(ad::Tape& t, ad::Var embeddings, ad::Var adjacency, ad::Var w_gcn,
                    const LayerNormVars& ln);

NodeSet gcn_forward(const NodeSet& nodes, const AdjacencyMatrix& adj, const Matrix& w_gcn,
                    const LayerNorm& ln);

/// y = gain .* (x - mean) / sqrt(popvar + 1e-5) + shift, D >= 2.
Vector layer_normalize(const Vector& x, const Vector& gain, const Vector& shift);

constexpr double kLayerNormEps = 1e-5;

}  // namespace sigma::graph
