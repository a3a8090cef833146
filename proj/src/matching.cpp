#include "sigma/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace sigma::matching {

CgiParams CgiParams::init(int dim, Rng& rng) {
    CgiParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    auto fill = [&](Matrix& m) {
        m.resize(dim, dim);
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) m(i, j) = s * rng.normal();
    };
    fill(p.w_q);
    fill(p.w_k);
    fill(p.w_v);
    fill(p.w_p);
    p.ln = LayerNorm::init(dim);
    return p;
}

std::pair<ad::Var, ad::Var> cross_graph_interaction(ad::Tape& t, ad::Var src, ad::Var tgt,
                                                    const CgiVars& p) {
    const Matrix& vs = t.value(src);
    const Matrix& vt = t.value(tgt);
    if (vs.rows() < 1 || vt.rows() < 1)
        throw shape_error("cross_graph_interaction: both node sets must be non-empty");
    if (vs.cols() != vt.cols())
        throw shape_error("cross_graph_interaction: embedding dims differ");

    auto direction = [&](ad::Var a, ad::Var b) {
        ad::Var attn = t.row_softmax(
            t.matmul(t.matmul(a, p.w_q), t.transpose(t.matmul(b, p.w_k))));
        ad::Var mixed = t.matmul(t.matmul(attn, t.matmul(b, p.w_v)), p.w_p);
        return t.layer_norm_rows(t.add(mixed, a), p.ln.gain, p.ln.shift, graph::kLayerNormEps);
    };
    return {direction(src, tgt), direction(tgt, src)};
}

AffinityParams AffinityParams::init(int dim, int proj_dim, int hidden, Rng& rng) {
    AffinityParams p;
    p.f_p = Linear::init(dim, proj_dim, rng);
    p.mlp1 = Linear::init(2 * proj_dim, hidden, rng);
    p.mlp2 = Linear::init(hidden, 1, rng);
    return p;
}

ad::Var node_affinity(ad::Tape& t, ad::Var src, ad::Var tgt, const AffinityVars& p) {
    const int ns = static_cast<int>(t.value(src).rows());
    const int nt = static_cast<int>(t.value(tgt).rows());
    if (t.value(p.mlp1.w).rows() != 2 * t.value(p.f_p.w).cols())
        throw shape_error("node_affinity: f_mlp input dim must be twice f_p output dim");
    if (t.value(p.mlp2.w).cols() != 1)
        throw shape_error("node_affinity: f_mlp must have a single output channel");

    ad::Var ps = apply_linear(t, src, p.f_p);
    ad::Var pt = apply_linear(t, tgt, p.f_p);

    std::vector<int> rep_s(static_cast<std::size_t>(ns) * static_cast<std::size_t>(nt));
    std::vector<int> rep_t(rep_s.size());
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < nt; ++j) {
            rep_s[static_cast<std::size_t>(i) * static_cast<std::size_t>(nt) +
                  static_cast<std::size_t>(j)] = i;
            rep_t[static_cast<std::size_t>(i) * static_cast<std::size_t>(nt) +
                  static_cast<std::size_t>(j)] = j;
        }
    ad::Var pairs = t.concat_cols(t.select_rows(ps, rep_s), t.select_rows(pt, rep_t));
    ad::Var h = t.relu(apply_linear(t, pairs, p.mlp1));
    ad::Var flat = apply_linear(t, h, p.mlp2);  // (ns*nt) x 1
    return t.reshape(flat, ns, nt);
}

ad::Var instance_normalize(ad::Tape& t, ad::Var raw) {
    const Matrix& x = t.value(raw);
    if (x.size() < 2) throw shape_error("instance_normalize: needs at least 2 entries");
    ad::Var mu = t.mean(raw);
    ad::Var centered = t.sub_scalar(raw, mu);
    ad::Var var = t.mean(t.square(centered));
    ad::Var denom = t.sqrt(t.add_const(var, 1e-5));
    return t.div_scalar(centered, denom);
}

Matrix instance_normalize(const Matrix& raw) {
    ad::Tape t;
    return t.value(instance_normalize(t, t.constant(raw)));
}

ad::Var sinkhorn_normalize(ad::Tape& t, ad::Var m, int iterations) {
    const Matrix& x = t.value(m);
    if (!all_finite(x)) throw numeric_error("sinkhorn_normalize: non-finite input");
    // a uniform shift cancels in the first normalization; subtracting the
    // detached max only stabilizes exp
    ad::Var s = t.exp(t.add_const(m, -x.maxCoeff()));
    for (int k = 0; k < iterations; ++k) {
        s = t.div_col_broadcast(s, t.col_sums(s));
        s = t.div_row_broadcast(s, t.row_sums(s));
    }
    return s;
}

Matrix sinkhorn_normalize(const Matrix& m, int iterations) {
    ad::Tape t;
    return t.value(sinkhorn_normalize(t, t.constant(m), iterations));
}

Matrix build_match_targets(const std::vector<int>& src_labels,
                           const std::vector<int>& tgt_labels, bool include_background) {
    Matrix y = Matrix::Zero(static_cast<Eigen::Index>(src_labels.size()),
                            static_cast<Eigen::Index>(tgt_labels.size()));
    for (std::size_t i = 0; i < src_labels.size(); ++i)
        for (std::size_t j = 0; j < tgt_labels.size(); ++j) {
            if (src_labels[i] != tgt_labels[j]) continue;
            if (!include_background && src_labels[i] == 0) continue;
            y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
        }
    return y;
}

MatchingLossBreakdown matching_loss(ad::Tape& t, ad::Var aff_normalized, const Matrix& targets,
                                    ad::Var adj_s, ad::Var adj_t, QcMode qc_mode) {
    const Matrix& m = t.value(aff_normalized);
    const Eigen::Index ns = m.rows(), nt = m.cols();
    if (targets.rows() != ns || targets.cols() != nt)
        throw shape_error("matching_loss: target shape differs from affinity");
    if (t.value(adj_s).rows() != ns || t.value(adj_s).cols() != ns)
        throw shape_error("matching_loss: source adjacency must be Ns x Ns");
    if (t.value(adj_t).rows() != nt || t.value(adj_t).cols() != nt)
        throw shape_error("matching_loss: target adjacency must be Nt x Nt");

    MatchingLossBreakdown out;

    // TE: per included row, the best same-category entry pulled toward 1.
    // Rows without a positive have no defined max and are excluded.
    std::vector<std::pair<int, int>> best;
    for (Eigen::Index i = 0; i < ns; ++i) {
        int arg = -1;
        double val = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < nt; ++j)
            if (targets(i, j) > 0.5 && m(i, j) > val) {
                val = m(i, j);
                arg = static_cast<int>(j);
            }
        if (arg >= 0)
            best.emplace_back(static_cast<int>(i), arg);
        else
            ++out.te_excluded_rows;
    }
    if (!best.empty()) {
        ad::Var picked = t.gather(aff_normalized, best);
        out.te = t.mean(t.square(t.add_const(picked, -1.0)));
    } else {
        out.te = t.scalar(0.0);
    }

    // FS: wrongly activated cross-category entries, squared, normalized by
    // the count of negatives.
    const double negatives = (1.0 - targets.array()).sum();
    if (negatives > 0.0) {
        ad::Var masked = t.mul_mask(aff_normalized, (1.0 - targets.array()).matrix());
        out.fs = t.scale(t.sum(t.square(masked)), 1.0 / negatives);
    } else {
        out.fs = t.scalar(0.0);
        out.fs_degenerate = true;
    }

    // QC: structural residual A_s M - M A_t.
    ad::Var residual = t.sub(t.matmul(adj_s, aff_normalized), t.matmul(aff_normalized, adj_t));
    const double scale = 1.0 / static_cast<double>(ns * nt);
    out.qc = qc_mode == QcMode::squared ? t.scale(t.sum(t.square(residual)), scale)
                                        : t.scale(t.sum(residual), scale);

    out.total = t.add(t.add(out.te, out.fs), out.qc);
    return out;
}

MatchingLossValues matching_loss_values(const Matrix& aff_normalized, const Matrix& targets,
                                        const Matrix& adj_s, const Matrix& adj_t,
                                        QcMode qc_mode) {
    ad::Tape t;
    MatchingLossBreakdown b = matching_loss(t, t.constant(aff_normalized), targets,
                                            t.constant(adj_s), t.constant(adj_t), qc_mode);
    MatchingLossValues v;
    v.te = t.scalar_value(b.te);
    v.fs = t.scalar_value(b.fs);
    v.qc = t.scalar_value(b.qc);
    v.total = t.scalar_value(b.total);
    v.te_excluded_rows = b.te_excluded_rows;
    v.fs_degenerate = b.fs_degenerate;
    return v;
}

ad::Var multiple_matching_loss(ad::Tape& t, ad::Var aff_raw, const Matrix& targets,
                               MultiMatchKind kind) {
    const Matrix& m = t.value(aff_raw);
    if (targets.rows() != m.rows() || targets.cols() != m.cols())
        throw shape_error("multiple_matching_loss: target shape differs");
    if (kind == MultiMatchKind::bce) {
        const double n = static_cast<double>(m.size());
        return t.scale(t.bce_with_logits_sum(aff_raw, targets), 1.0 / n);
    }
    ad::Var diff = t.sub(t.sigmoid(aff_raw), t.constant(targets));
    return t.mean(t.square(diff));
}

ClassifierParams ClassifierParams::init(int dim, int hidden, int classes, Rng& rng) {
    ClassifierParams p;
    p.fc1 = Linear::init(dim, hidden, rng);
    p.fc2 = Linear::init(hidden, classes + 1, rng);
    return p;
}

ad::Var node_classification_loss(ad::Tape& t, ad::Var nodes, const std::vector<int>& labels,
                                 const ClassifierVars& p) {
    ad::Var h = t.relu(apply_linear(t, nodes, p.fc1));
    ad::Var logits = apply_linear(t, h, p.fc2);
    return t.softmax_ce_mean(logits, labels);
}

Assignment assignment_brute_force(const Matrix& cost) {
    const int n = static_cast<int>(cost.rows());
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Assignment best;
    best.cost = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (int i = 0; i < n; ++i) c += cost(i, perm[static_cast<std::size_t>(i)]);
        if (c < best.cost) {
            best.cost = c;
            best.row_to_col = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

Assignment assignment_augmenting_path(const Matrix& cost) {
    // classic shortest augmenting path with dual potentials, 1-indexed internals
    const int n = static_cast<int>(cost.rows());
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
    std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1,
                                 std::numeric_limits<double>::infinity());
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    Assignment a;
    a.row_to_col.assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            a.row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    a.cost = 0.0;
    for (int i = 0; i < n; ++i) a.cost += cost(i, a.row_to_col[static_cast<std::size_t>(i)]);
    return a;
}

Assignment hungarian_oracle(const Matrix& cost) {
    if (cost.rows() != cost.cols()) throw shape_error("hungarian_oracle: matrix must be square");
    if (!all_finite(cost)) throw numeric_error("hungarian_oracle: non-finite cost");
    if (cost.rows() == 0) return {};
    if (cost.rows() <= 9) return assignment_brute_force(cost);
    return assignment_augmenting_path(cost);
}

}  // namespace sigma::matching
