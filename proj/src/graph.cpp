#include "sigma/graph.hpp"

#include <cmath>
#include <string>

namespace sigma::graph {

void NodeSet::validate() const {
    const auto n = static_cast<std::size_t>(embeddings.rows());
    if (labels.size() != n || hallucinated.size() != n || pseudo.size() != n)
        throw shape_error("NodeSet: per-node field lengths differ from embedding rows");
    for (std::size_t i = 0; i < n; ++i) {
        if (hallucinated[i] && labels[i] < 1)
            throw shape_error("NodeSet: hallucinated node " + std::to_string(i) +
                              " carries a background label");
    }
    if (!all_finite(embeddings)) {
        for (Eigen::Index i = 0; i < embeddings.rows(); ++i)
            if (!embeddings.row(i).allFinite())
                throw numeric_error("NodeSet: non-finite embedding at node " + std::to_string(i));
    }
}

NodeBatch lift(ad::Tape& t, const NodeSet& nodes, bool requires_grad) {
    nodes.validate();
    NodeBatch b;
    b.emb = t.leaf(nodes.embeddings, requires_grad);
    b.meta.labels = nodes.labels;
    b.meta.domain = nodes.domain;
    b.meta.hallucinated = nodes.hallucinated;
    b.meta.pseudo = nodes.pseudo;
    return b;
}

NodeSet lower(const ad::Tape& t, const NodeBatch& batch) {
    NodeSet n;
    n.embeddings = t.value(batch.emb);
    n.labels = batch.meta.labels;
    n.domain = batch.meta.domain;
    n.hallucinated = batch.meta.hallucinated;
    n.pseudo = batch.meta.pseudo;
    return n;
}

Matrix edge_drop_mask(int n, double drop_rate, Rng& rng) {
    Matrix mask = Matrix::Ones(n, n);
    if (drop_rate <= 0.0) return mask;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (rng.bernoulli(drop_rate)) mask(i, j) = 0.0;
    return mask;
}

ad::Var build_adjacency(ad::Tape& t, ad::Var embeddings, ad::Var w_e, double drop_rate,
                        Rng& rng, bool training) {
    const Matrix& v = t.value(embeddings);
    const Matrix& w = t.value(w_e);
    if (v.rows() < 1) throw shape_error("build_adjacency: need at least one node");
    if (drop_rate < 0.0 || drop_rate >= 1.0)
        throw shape_error("build_adjacency: drop_rate must be in [0,1)");
    if (v.cols() != w.rows())
        throw shape_error("build_adjacency: embedding dim " + std::to_string(v.cols()) +
                          " does not match W_e input dim " + std::to_string(w.rows()));
    ad::Var proj = t.matmul(embeddings, w_e);
    ad::Var logits = t.matmul(proj, t.transpose(proj));
    ad::Var soft = t.row_softmax(logits);
    if (training && drop_rate > 0.0)
        return t.mul_mask(soft, edge_drop_mask(static_cast<int>(v.rows()), drop_rate, rng));
    return soft;
}

AdjacencyMatrix build_adjacency(const NodeSet& nodes, const Matrix& w_e, double drop_rate,
                                Rng& rng, bool training) {
    nodes.validate();
    ad::Tape t;
    ad::Var emb = t.constant(nodes.embeddings);
    ad::Var w = t.constant(w_e);
    ad::Var a = build_adjacency(t, emb, w, drop_rate, rng, training);
    return AdjacencyMatrix{t.value(a), drop_rate};
}

ad::Var gcn_forward(ad::Tape& t, ad::Var embeddings, ad::Var adjacency, ad::Var w_gcn,
                    const LayerNormVars& ln) {
    const Matrix& v = t.value(embeddings);
    const Matrix& a = t.value(adjacency);
    if (a.rows() != v.rows() || a.cols() != v.rows())
        throw shape_error("gcn_forward: adjacency must be NxN for the N nodes");
    if (!all_finite(v)) {
        for (Eigen::Index i = 0; i < v.rows(); ++i)
            if (!v.row(i).allFinite())
                throw numeric_error("gcn_forward: non-finite embedding at node " +
                                    std::to_string(i));
    }
    ad::Var message = t.matmul(adjacency, t.matmul(embeddings, w_gcn));
    ad::Var residual = t.add(message, embeddings);
    return t.layer_norm_rows(residual, ln.gain, ln.shift, kLayerNormEps);
}

NodeSet gcn_forward(const NodeSet& nodes, const AdjacencyMatrix& adj, const Matrix& w_gcn,
                    const LayerNorm& ln) {
    nodes.validate();
    ad::Tape t;
    ad::Var emb = t.constant(nodes.embeddings);
    ad::Var a = t.constant(adj.entries);
    ad::Var w = t.constant(w_gcn);
    LayerNormVars lnv{t.constant(ln.gain), t.constant(ln.shift)};
    ad::Var out = gcn_forward(t, emb, a, w, lnv);
    NodeSet result = nodes;
    result.embeddings = t.value(out);
    return result;
}

Vector layer_normalize(const Vector& x, const Vector& gain, const Vector& shift) {
    const Eigen::Index d = x.size();
    if (d < 2) throw shape_error("layer_normalize: D must be >= 2");
    if (gain.size() != d || shift.size() != d)
        throw shape_error("layer_normalize: gain/shift must match x");
    const double m = x.mean();
    const double var = (x.array() - m).square().sum() / static_cast<double>(d);
    return (gain.array() * (x.array() - m) / std::sqrt(var + kLayerNormEps) + shift.array())
        .matrix();
}

}  // namespace sigma::graph
