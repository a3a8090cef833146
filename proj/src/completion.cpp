#include "sigma/completion.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>

namespace sigma::completion {

MemoryBank MemoryBank::init(int classes, int dim, Rng& rng) {
    MemoryBank bank;
    bank.seeds.resize(classes, dim);
    for (int c = 0; c < classes; ++c)
        for (int d = 0; d < dim; ++d) bank.seeds(c, d) = 0.02 * rng.normal();
    bank.initialized.assign(static_cast<std::size_t>(classes), 0);
    return bank;
}

RowVector MemoryBank::seed(int category) const {
    if (category < 1 || category > classes())
        throw shape_error("MemoryBank: category " + std::to_string(category) + " out of 1..C");
    return seeds.row(category - 1);
}

CategoryInventory missing_category_sets(const std::vector<int>& source_labels,
                                        const std::vector<int>& target_labels, int classes) {
    CategoryInventory inv;
    for (int l : source_labels) {
        if (l < 0 || l > classes)
            throw shape_error("missing_category_sets: label out of 0..C");
        if (l > 0) inv.present_source.insert(l);
    }
    for (int l : target_labels) {
        if (l < 0 || l > classes)
            throw shape_error("missing_category_sets: label out of 0..C");
        if (l > 0) inv.present_target.insert(l);
    }
    for (int c : inv.present_target)
        if (!inv.present_source.count(c)) inv.missing_source.insert(c);
    for (int c : inv.present_source)
        if (!inv.present_target.count(c)) inv.missing_target.insert(c);
    return inv;
}

int hallucination_count(const std::vector<int>& counterpart_labels, int classes) {
    std::vector<int> per_class(static_cast<std::size_t>(classes) + 1, 0);
    for (int l : counterpart_labels)
        if (l >= 1 && l <= classes) ++per_class[static_cast<std::size_t>(l)];
    std::vector<int> counts;
    for (int c = 1; c <= classes; ++c)
        if (per_class[static_cast<std::size_t>(c)] > 0)
            counts.push_back(per_class[static_cast<std::size_t>(c)]);
    int median = 4;
    if (!counts.empty()) {
        std::sort(counts.begin(), counts.end());
        median = counts[counts.size() / 2];
    }
    return std::clamp(median, 4, 32);
}

HallucinationBatch hallucinate_nodes(ad::Tape& t, int category, const MemoryBank& bank,
                                     ad::Var counterpart_emb,
                                     const std::vector<int>& counterpart_labels,
                                     const std::vector<char>& counterpart_hallucinated,
                                     int count, const LinearVars& proj, Rng& rng) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < counterpart_labels.size(); ++i) {
        const bool halluc = i < counterpart_hallucinated.size() && counterpart_hallucinated[i];
        if (counterpart_labels[i] == category && !halluc) rows.push_back(static_cast<int>(i));
    }
    if (rows.empty())
        throw shape_error("hallucinate_nodes: no counterpart node of class " +
                          std::to_string(category));
    const int d = static_cast<int>(t.value(counterpart_emb).cols());

    HallucinationBatch out;
    out.category = category;
    out.count = count;
    out.mean_used = bank.seed(category);

    ad::Var mu = t.constant(out.mean_used);
    ad::Var sigma;
    if (rows.size() == 1) {
        // std of a single sample is undefined; degenerate draw at the mean
        sigma = t.constant(Matrix::Zero(1, d));
    } else {
        ad::Var cls = t.select_rows(counterpart_emb, rows);
        ad::Var m = t.scale(t.col_sums(cls), 1.0 / static_cast<double>(rows.size()));
        ad::Var centered = t.sub(cls, t.matmul(t.constant(Matrix::Ones(
                                                   static_cast<Eigen::Index>(rows.size()), 1)),
                                               m));
        ad::Var var = t.scale(t.col_sums(t.square(centered)),
                              1.0 / static_cast<double>(rows.size()));
        sigma = t.sqrt(var);
    }
    out.std_used = t.value(sigma).row(0);

    Matrix eps(count, d);
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < d; ++j) eps(i, j) = rng.normal();
    ad::Var samples = t.add(t.matmul(t.constant(Matrix::Ones(count, 1)), mu),
                            t.mul(t.matmul(t.constant(Matrix::Ones(count, 1)), sigma),
                                  t.constant(eps)));
    out.nodes = apply_linear(t, samples, proj);
    return out;
}

Matrix hallucinate_values(int category, const MemoryBank& bank, const Matrix& counterpart_emb,
                          const std::vector<int>& counterpart_labels, int count,
                          const Linear& proj, Rng& rng) {
    ad::Tape t;
    ad::Var emb = t.constant(counterpart_emb);
    LinearVars pv{t.constant(proj.w), proj.has_bias() ? t.constant(proj.b) : ad::Var{}};
    std::vector<char> no_halluc(counterpart_labels.size(), 0);
    HallucinationBatch h = hallucinate_nodes(t, category, bank, emb, counterpart_labels,
                                             no_halluc, count, pv, rng);
    return t.value(h.nodes);
}

std::pair<std::vector<int>, std::vector<int>> spectral_partition(const Matrix& points) {
    const int m = static_cast<int>(points.rows());
    if (m <= 5) throw shape_error("spectral_partition: needs more than 5 points");
    constexpr int kNeighbors = 5;

    // pairwise squared distances
    Matrix d2(m, m);
    for (int i = 0; i < m; ++i) {
        d2(i, i) = 0.0;
        for (int j = i + 1; j < m; ++j) {
            const double d = (points.row(i) - points.row(j)).squaredNorm();
            d2(i, j) = d;
            d2(j, i) = d;
        }
    }

    // K nearest neighbours per point and the median squared KNN distance
    std::vector<std::vector<int>> knn(static_cast<std::size_t>(m));
    std::vector<double> knn_d2;
    for (int i = 0; i < m; ++i) {
        std::vector<int> order;
        for (int j = 0; j < m; ++j)
            if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return d2(i, a) < d2(i, b); });
        order.resize(std::min<std::size_t>(kNeighbors, order.size()));
        for (int j : order) knn_d2.push_back(d2(i, j));
        knn[static_cast<std::size_t>(i)] = std::move(order);
    }
    std::sort(knn_d2.begin(), knn_d2.end());
    const double sigma2 = knn_d2[knn_d2.size() / 2];
    if (sigma2 <= 0.0) {
        // all points coincide: zero Laplacian, no meaningful cut
        std::vector<int> everything(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) everything[static_cast<std::size_t>(i)] = i;
        return {everything, {}};
    }

    // symmetric KNN affinity
    Matrix w = Matrix::Zero(m, m);
    for (int i = 0; i < m; ++i)
        for (int j : knn[static_cast<std::size_t>(i)]) {
            const double a = std::exp(-d2(i, j) / sigma2);
            w(i, j) = a;
            w(j, i) = a;
        }

    // a disconnected affinity graph makes the 0-eigenspace degenerate and the
    // Fiedler sign arbitrary; the natural two-way split is by component
    {
        std::vector<int> comp(static_cast<std::size_t>(m), -1);
        int ncomp = 0;
        for (int s = 0; s < m; ++s) {
            if (comp[static_cast<std::size_t>(s)] >= 0) continue;
            std::vector<int> stack{s};
            comp[static_cast<std::size_t>(s)] = ncomp;
            while (!stack.empty()) {
                const int u = stack.back();
                stack.pop_back();
                for (int v = 0; v < m; ++v)
                    if (w(u, v) > 0.0 && comp[static_cast<std::size_t>(v)] < 0) {
                        comp[static_cast<std::size_t>(v)] = ncomp;
                        stack.push_back(v);
                    }
            }
            ++ncomp;
        }
        if (ncomp > 1) {
            std::pair<std::vector<int>, std::vector<int>> clusters;
            for (int i = 0; i < m; ++i)
                (comp[static_cast<std::size_t>(i)] == comp[0] ? clusters.first
                                                              : clusters.second)
                    .push_back(i);
            return clusters;
        }
    }

    // normalized Laplacian L = I - D^-1/2 W D^-1/2
    Vector deg = w.rowwise().sum();
    Vector dinv = deg.array().max(1e-12).rsqrt().matrix();
    Matrix lap = Matrix::Identity(m, m) - (dinv.asDiagonal() * w * dinv.asDiagonal());

    Eigen::SelfAdjointEigenSolver<Matrix> es(lap);
    const Vector fiedler = es.eigenvectors().col(1);

    std::pair<std::vector<int>, std::vector<int>> clusters;
    for (int i = 0; i < m; ++i) {
        if (fiedler(i) >= 0.0)
            clusters.first.push_back(i);
        else
            clusters.second.push_back(i);
    }
    return clusters;
}

RowVector blend_seed(const RowVector& seed, const RowVector& b) {
    const double ns = seed.norm();
    const double nb = b.norm();
    double sim = 0.0;
    if (ns > 0.0 && nb > 0.0) sim = seed.dot(b) / (ns * nb);
    sim = std::clamp(sim, 0.0, 1.0);
    return sim * seed + (1.0 - sim) * b;
}

bool update_memory_bank(MemoryBank& bank, int category, const Matrix& class_node_values,
                        const std::vector<char>& hallucinated) {
    if (static_cast<std::size_t>(class_node_values.rows()) != hallucinated.size())
        throw shape_error("update_memory_bank: flag count differs from node count");

    // hallucination nodes never reach the bank
    std::vector<int> keep;
    for (std::size_t i = 0; i < hallucinated.size(); ++i)
        if (!hallucinated[i]) keep.push_back(static_cast<int>(i));
    if (keep.empty()) return false;

    Matrix nodes(static_cast<Eigen::Index>(keep.size()), class_node_values.cols());
    for (std::size_t i = 0; i < keep.size(); ++i)
        nodes.row(static_cast<Eigen::Index>(i)) = class_node_values.row(keep[i]);

    const RowVector seed = bank.seed(category);
    RowVector b;
    const int total = static_cast<int>(nodes.rows()) + 1;
    if (total > 5) {
        Matrix pts(total, nodes.cols());
        pts.row(0) = seed;
        pts.bottomRows(nodes.rows()) = nodes;
        const auto [ca, cb] = spectral_partition(pts);
        const bool seed_in_a = std::find(ca.begin(), ca.end(), 0) != ca.end();
        const std::vector<int>& seed_cluster = seed_in_a ? ca : cb;
        if (seed_cluster.size() <= 1) return false;  // seed alone: nothing to average
        b = RowVector::Zero(nodes.cols());
        int n = 0;
        for (int idx : seed_cluster)
            if (idx != 0) {
                b += pts.row(idx);
                ++n;
            }
        b /= static_cast<double>(n);
    } else {
        b = nodes.colwise().mean();
    }

    bank.seeds.row(category - 1) = blend_seed(seed, b);
    bank.initialized[static_cast<std::size_t>(category - 1)] = 1;
    return true;
}

}  // namespace sigma::completion
