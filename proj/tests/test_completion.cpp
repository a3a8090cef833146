#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fd_check.hpp"
#include "sigma/completion.hpp"

using namespace sigma;
using testutil::random_matrix;

TEST_CASE("missing category sets follow the set-difference definitions") {
    auto inv = completion::missing_category_sets({1, 2, 2, 0}, {2, 3, 0}, 4);
    CHECK(inv.missing_source == std::set<int>{3});
    CHECK(inv.missing_target == std::set<int>{1});

    inv = completion::missing_category_sets({1, 2}, {2, 1, 1}, 4);
    CHECK(inv.missing_source.empty());
    CHECK(inv.missing_target.empty());

    inv = completion::missing_category_sets({}, {1}, 4);
    CHECK(inv.missing_source == std::set<int>{1});
    CHECK(inv.missing_target.empty());

    inv = completion::missing_category_sets({0, 0}, {0}, 4);
    CHECK(inv.missing_source.empty());  // background never missing
    CHECK(inv.missing_target.empty());
}

TEST_CASE("missing category sets are antisymmetric under domain swap") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> a, b;
        for (int i = 0; i < 12; ++i) {
            a.push_back(static_cast<int>(rng.uniform_index(6)));
            b.push_back(static_cast<int>(rng.uniform_index(6)));
        }
        const auto fwd = completion::missing_category_sets(a, b, 5);
        const auto rev = completion::missing_category_sets(b, a, 5);
        CHECK(fwd.missing_source == rev.missing_target);
        CHECK(fwd.missing_target == rev.missing_source);
    }
}

TEST_CASE("hallucination with a single counterpart node degenerates to the seed") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(2, 3);
    bank.seeds.row(1) << 1.5, -2.0, 0.5;
    bank.initialized = {0, 0};

    Matrix counterpart(1, 3);
    counterpart << 9, 9, 9;  // single node: sigma = 0
    Linear ident{Matrix::Identity(3, 3), Matrix::Zero(1, 3)};
    Rng rng(1);
    const Matrix nodes =
        completion::hallucinate_values(2, bank, counterpart, {2}, 5, ident, rng);
    REQUIRE(nodes.rows() == 5);
    for (int i = 0; i < 5; ++i)
        CHECK((nodes.row(i) - bank.seeds.row(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hallucination sampling statistics match the configured gaussian") {
    // seed mean 5, counterpart std exactly 1 in one dimension
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(1, 1);
    bank.seeds(0, 0) = 5.0;
    bank.initialized = {0};
    Matrix counterpart(2, 1);
    counterpart << 4.0, 6.0;  // population std = 1
    Linear ident{Matrix::Identity(1, 1), Matrix::Zero(1, 1)};
    Rng rng(2);
    const Matrix nodes =
        completion::hallucinate_values(1, bank, counterpart, {1, 1}, 10000, ident, rng);
    const double mean = nodes.col(0).mean();
    const double var = (nodes.col(0).array() - mean).square().sum() / (nodes.rows() - 1.0);
    CHECK(std::abs(mean - 5.0) <= 0.03);
    CHECK(std::abs(std::sqrt(var) - 1.0) <= 0.05);
}

TEST_CASE("zero projection annihilates hallucination nodes") {
    Rng seed_rng(3);
    completion::MemoryBank bank;
    bank.seeds = random_matrix(3, 4, seed_rng);
    bank.initialized = {0, 0, 0};
    Rng rng(4);
    Matrix counterpart = random_matrix(6, 4, rng);
    Linear zero{Matrix::Zero(4, 4), Matrix::Zero(1, 4)};
    const Matrix nodes = completion::hallucinate_values(
        1, bank, counterpart, {1, 1, 1, 1, 1, 1}, 7, zero, rng);
    CHECK(nodes.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("hallucination requires a counterpart node of the class") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(2, 3);
    bank.initialized = {0, 0};
    Rng rng(5);
    Linear ident{Matrix::Identity(3, 3), Matrix::Zero(1, 3)};
    CHECK_THROWS_AS((void)completion::hallucinate_values(2, bank, Matrix::Ones(2, 3), {1, 1}, 3,
                                                         ident, rng),
                    shape_error);
}

TEST_CASE("hallucination count is the clamped median per-class count") {
    // counts: class 1 -> 6 nodes, class 2 -> 2 nodes; median of {2,6} -> 6
    std::vector<int> labels{1, 1, 1, 1, 1, 1, 2, 2, 0, 0};
    CHECK(completion::hallucination_count(labels, 4) == 6);
    // single tiny class clamps up to 4
    CHECK(completion::hallucination_count({1}, 4) == 4);
    // huge class clamps down to 32
    std::vector<int> big(100, 1);
    CHECK(completion::hallucination_count(big, 4) == 32);
    // no foreground at all: default minimum
    CHECK(completion::hallucination_count({0, 0}, 4) == 4);
}

namespace {

Matrix two_blobs(int per_side, double separation, double noise, Rng& rng) {
    Matrix pts(2 * per_side, 2);
    for (int i = 0; i < per_side; ++i) {
        pts(i, 0) = noise * rng.normal();
        pts(i, 1) = noise * rng.normal();
        pts(per_side + i, 0) = separation + noise * rng.normal();
        pts(per_side + i, 1) = noise * rng.normal();
    }
    return pts;
}

/// Exhaustive normalized-cut search over all 2-partitions, on the same
/// symmetric KNN(5) affinity construction.
std::pair<std::vector<int>, std::vector<int>> brute_force_ncut(const Matrix& points) {
    const int m = static_cast<int>(points.rows());
    Matrix d2(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) d2(i, j) = (points.row(i) - points.row(j)).squaredNorm();
    std::vector<double> knn_d2;
    std::vector<std::vector<int>> knn(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        std::vector<int> order;
        for (int j = 0; j < m; ++j)
            if (j != i) order.push_back(j);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return d2(i, a) < d2(i, b); });
        order.resize(5);
        for (int j : order) knn_d2.push_back(d2(i, j));
        knn[static_cast<std::size_t>(i)] = order;
    }
    std::sort(knn_d2.begin(), knn_d2.end());
    const double sigma2 = knn_d2[knn_d2.size() / 2];
    Matrix w = Matrix::Zero(m, m);
    for (int i = 0; i < m; ++i)
        for (int j : knn[static_cast<std::size_t>(i)]) {
            w(i, j) = std::exp(-d2(i, j) / sigma2);
            w(j, i) = w(i, j);
        }

    double best = std::numeric_limits<double>::infinity();
    unsigned best_mask = 1;
    for (unsigned mask = 1; mask < (1u << m) - 1; ++mask) {
        double cut = 0, vol_a = 0, vol_b = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                const bool ia = mask & (1u << i), ja = mask & (1u << j);
                if (ia && !ja) cut += w(i, j);
                if (ia) vol_a += w(i, j);
                if (!ia) vol_b += w(i, j);
            }
        if (vol_a == 0 || vol_b == 0) continue;
        const double ncut = cut / vol_a + cut / vol_b;
        if (ncut < best) {
            best = ncut;
            best_mask = mask;
        }
    }
    std::pair<std::vector<int>, std::vector<int>> out;
    for (int i = 0; i < m; ++i)
        (best_mask & (1u << i) ? out.first : out.second).push_back(i);
    return out;
}

bool same_partition(std::pair<std::vector<int>, std::vector<int>> a,
                    std::pair<std::vector<int>, std::vector<int>> b) {
    auto norm = [](std::pair<std::vector<int>, std::vector<int>>& p) {
        std::sort(p.first.begin(), p.first.end());
        std::sort(p.second.begin(), p.second.end());
        if (p.second.size() < p.first.size() ||
            (p.first.size() == p.second.size() && !p.first.empty() && !p.second.empty() &&
             p.second[0] < p.first[0]))
            std::swap(p.first, p.second);
    };
    norm(a);
    norm(b);
    return a.first == b.first && a.second == b.second;
}

}  // namespace

TEST_CASE("spectral partition recovers well-separated planted blobs") {
    Rng rng(6);
    const Matrix pts = two_blobs(20, 10.0, 1.0, rng);
    const auto [a, b] = completion::spectral_partition(pts);
    REQUIRE(a.size() + b.size() == 40);
    const bool first_low = std::find(a.begin(), a.end(), 0) != a.end();
    const std::vector<int>& low = first_low ? a : b;
    const std::vector<int>& high = first_low ? b : a;
    CHECK(low.size() == 20);
    CHECK(high.size() == 20);
    for (int i : low) CHECK(i < 20);
    for (int i : high) CHECK(i >= 20);
}

TEST_CASE("spectral partition of identical points degenerates to one cluster") {
    const Matrix pts = Matrix::Ones(8, 3);
    const auto [a, b] = completion::spectral_partition(pts);
    CHECK(a.size() == 8);
    CHECK(b.empty());
}

TEST_CASE("spectral partition is invariant to input order") {
    Rng rng(7);
    const Matrix pts = two_blobs(6, 8.0, 1.0, rng);
    const auto base = completion::spectral_partition(pts);

    Matrix shuffled(pts.rows(), pts.cols());
    std::vector<int> perm(static_cast<std::size_t>(pts.rows()));
    for (int i = 0; i < pts.rows(); ++i)
        perm[static_cast<std::size_t>(i)] = (i * 5 + 3) % static_cast<int>(pts.rows());
    for (int i = 0; i < pts.rows(); ++i)
        shuffled.row(i) = pts.row(perm[static_cast<std::size_t>(i)]);
    auto shuffled_result = completion::spectral_partition(shuffled);
    // map back through the permutation
    for (int& idx : shuffled_result.first) idx = perm[static_cast<std::size_t>(idx)];
    for (int& idx : shuffled_result.second) idx = perm[static_cast<std::size_t>(idx)];
    CHECK(same_partition(base, shuffled_result));
}

TEST_CASE("spectral partition agrees with brute-force normalized cut on M <= 12") {
    Rng rng(8);
    for (int trial = 0; trial < 4; ++trial) {
        const Matrix pts = two_blobs(6, 9.0, 1.0, rng);  // M = 12
        const auto spectral = completion::spectral_partition(pts);
        const auto brute = brute_force_ncut(pts);
        CHECK(same_partition(spectral, brute));
    }
}

TEST_CASE("spectral partition rejects M <= 5") {
    CHECK_THROWS_AS((void)completion::spectral_partition(Matrix::Ones(5, 2)), shape_error);
}

TEST_CASE("seed blend: cosine-gated convex combination") {
    RowVector seed(2), b(2);
    seed << 1, 0;

    // b aligned with the seed: unchanged
    b << 2, 0;
    CHECK((completion::blend_seed(seed, b) - seed).norm() < 1e-12);

    // orthogonal: full replacement
    b << 0, 1;
    CHECK((completion::blend_seed(seed, b) - b).norm() < 1e-12);

    // the hand-computed case: sim 0.6 -> [0.84, 0.32]
    b << 0.6, 0.8;
    const RowVector blended = completion::blend_seed(seed, b);
    CHECK(std::abs(blended(0) - 0.84) < 1e-12);
    CHECK(std::abs(blended(1) - 0.32) < 1e-12);

    // negative cosine clamps to zero: full replacement
    b << -1, 0;
    CHECK((completion::blend_seed(seed, b) - b).norm() < 1e-12);
}

TEST_CASE("bank update with <= 5 points bypasses clustering and uses the plain mean") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(1, 2);
    bank.seeds.row(0) << 1, 0;
    bank.initialized = {0};
    Matrix nodes(1, 2);
    nodes << 0.6, 0.8;
    CHECK(completion::update_memory_bank(bank, 1, nodes, {0}));
    CHECK(std::abs(bank.seeds(0, 0) - 0.84) < 1e-12);
    CHECK(std::abs(bank.seeds(0, 1) - 0.32) < 1e-12);
}

TEST_CASE("bank update ignores hallucinated rows entirely") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(1, 2);
    bank.seeds.row(0) << 1, 0;
    bank.initialized = {0};
    Matrix nodes(3, 2);
    nodes << 0.6, 0.8,   // real
             1e6, -1e6,  // hallucinated: must not contribute
             -1e6, 1e6;  // hallucinated
    CHECK(completion::update_memory_bank(bank, 1, nodes, {0, 1, 1}));
    CHECK(std::abs(bank.seeds(0, 0) - 0.84) < 1e-12);
    CHECK(std::abs(bank.seeds(0, 1) - 0.32) < 1e-12);

    // all hallucinated: no-op
    Matrix halluc_only = Matrix::Ones(2, 2);
    const Matrix before = bank.seeds;
    CHECK_FALSE(completion::update_memory_bank(bank, 1, halluc_only, {1, 1}));
    CHECK(bank.seeds == before);
}

TEST_CASE("bank update with empty class nodes is a no-op") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Ones(1, 2);
    bank.initialized = {0};
    const Matrix before = bank.seeds;
    CHECK_FALSE(completion::update_memory_bank(bank, 1, Matrix(0, 2), {}));
    CHECK(bank.seeds == before);
}

TEST_CASE("bank update norm is bounded by the convex-combination bound") {
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        completion::MemoryBank bank;
        bank.seeds = random_matrix(1, 4, rng);
        bank.initialized = {0};
        const double seed_norm = bank.seeds.row(0).norm();
        const Matrix nodes = random_matrix(3, 4, rng, 2.0);
        const RowVector b = nodes.colwise().mean();
        completion::update_memory_bank(bank, 1, nodes, {0, 0, 0});
        CHECK(bank.seeds.row(0).norm() <= std::max(seed_norm, b.norm()) + 1e-12);
    }
}

TEST_CASE("spectral gate: a lone seed cluster skips the update") {
    completion::MemoryBank bank;
    bank.seeds = Matrix::Zero(1, 2);
    bank.seeds.row(0) << 100.0, 100.0;  // far from every node
    bank.initialized = {0};
    Rng rng(10);
    Matrix nodes(8, 2);
    for (int i = 0; i < 8; ++i) {
        nodes(i, 0) = rng.normal();
        nodes(i, 1) = rng.normal();
    }
    const Matrix before = bank.seeds;
    const bool moved = completion::update_memory_bank(bank, 1, nodes, std::vector<char>(8, 0));
    CHECK_FALSE(moved);
    CHECK(bank.seeds == before);
}

TEST_CASE("repeated updates on a stationary class converge") {
    Rng rng(11);
    const int d = 8;
    RowVector target(d);
    for (int k = 0; k < d; ++k) target(k) = 2.0 * rng.normal();

    completion::MemoryBank bank = completion::MemoryBank::init(1, d, rng);
    double last_delta = 1e9;
    int converged_at = -1;
    RowVector prev = bank.seeds.row(0);
    for (int batch = 1; batch <= 200; ++batch) {
        Matrix nodes(8, d);
        for (int i = 0; i < 8; ++i)
            for (int k = 0; k < d; ++k) nodes(i, k) = target(k) + 0.05 * rng.normal();
        completion::update_memory_bank(bank, 1, nodes, std::vector<char>(8, 0));
        last_delta = (bank.seeds.row(0) - prev).norm();
        prev = bank.seeds.row(0);
        if (last_delta < 1e-3 && converged_at < 0) converged_at = batch;
    }
    CHECK(converged_at > 0);
    CHECK(converged_at <= 200);
    CHECK(last_delta < 1e-3);
}

TEST_CASE("sigma path through hallucination keeps analytic gradients exact") {
    // counterpart embeddings influence the loss through the on-tape std
    Rng rng(12);
    completion::MemoryBank bank;
    bank.seeds = random_matrix(2, 3, rng);
    bank.initialized = {0, 0};
    const std::vector<int> labels{1, 1, 1, 1};
    const Matrix mask = random_matrix(5, 3, rng);

    const double err = testutil::fd_max_rel_err(
        {random_matrix(4, 3, rng), random_matrix(3, 3, rng), random_matrix(1, 3, rng)},
        [&](ad::Tape& t, const std::vector<ad::Var>& v) {
            LinearVars proj{v[1], v[2]};
            Rng draw(77);  // identical gaussian draws for every evaluation
            completion::HallucinationBatch h = completion::hallucinate_nodes(
                t, 1, bank, v[0], labels, {0, 0, 0, 0}, 5, proj, draw);
            return t.sum(t.mul_mask(h.nodes, mask));
        });
    CHECK(err < 1e-4);
}
