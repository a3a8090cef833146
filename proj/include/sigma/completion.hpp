#pragma once

#include <set>
#include <utility>
#include <vector>

#include "sigma/ad.hpp"
#include "sigma/common.hpp"
#include "sigma/graph.hpp"
#include "sigma/params.hpp"
#include "sigma/rng.hpp"

namespace sigma::completion {

/// Per-domain category seed vectors. Seeds start at N(0, 0.02^2) and move by
/// cosine-gated convex combination with cluster means; no gradients ever flow
/// through the bank.
struct MemoryBank {
    Matrix seeds;  // C x D, row c-1 for class c
    std::vector<char> initialized;

    static MemoryBank init(int classes, int dim, Rng& rng);
    RowVector seed(int category) const;
    int classes() const { return static_cast<int>(seeds.rows()); }
};

/// Batch-level category bookkeeping. Background (0) never participates.
struct CategoryInventory {
    std::set<int> present_source;
    std::set<int> present_target;
    std::set<int> missing_source;  // present in target, absent in source
    std::set<int> missing_target;  // present in source, absent in target
};

CategoryInventory missing_category_sets(const std::vector<int>& source_labels,
                                        const std::vector<int>& target_labels, int classes);

/// Record of one category's hallucination draw.
struct HallucinationBatch {
    int category = 0;
    int count = 0;
    RowVector mean_used;
    RowVector std_used;
    ad::Var nodes;  // count x D, projected
};

/// Gaussian samples around the memory seed with the counterpart class's
/// per-dimension std, pushed through the learned linear projection. The seed
/// is detached; sigma stays on the tape (reparameterized draw), so gradients
/// reach the counterpart embeddings and the projection only.
HallucinationBatch hallucinate_nodes(ad::Tape& t, int category, const MemoryBank& bank,
                                     ad::Var counterpart_emb,
                                     const std::vector<int>& counterpart_labels,
                                     const std::vector<char>& counterpart_hallucinated,
                                     int count, const LinearVars& proj, Rng& rng);

/// Forward-only convenience used by tests.
Matrix hallucinate_values(int category, const MemoryBank& bank, const Matrix& counterpart_emb,
                          const std::vector<int>& counterpart_labels, int count,
                          const Linear& proj, Rng& rng);

/// How many nodes to hallucinate for one missing category: the median
/// per-class foreground node count of the counterpart batch, clamped to
/// [4, 32].
int hallucination_count(const std::vector<int>& counterpart_labels, int classes);

/// Two-way split by the sign of the Fiedler vector of the normalized
/// Laplacian over a symmetric KNN(5) affinity. Requires M > 5 points.
/// All-identical inputs degenerate to (everything, empty).
std::pair<std::vector<int>, std::vector<int>> spectral_partition(const Matrix& points);

/// Eq-style seed update: spectral gate when the seed plus nodes exceed 5
/// points, cluster mean b excluding the seed, cosine-momentum blend. Returns
/// true when the seed moved.
bool update_memory_bank(MemoryBank& bank, int category, const Matrix& class_node_values,
                        const std::vector<char>& hallucinated);

/// The blend itself: new_seed = sim * seed + (1 - sim) * b with cosine
/// similarity clamped to [0, 1].
RowVector blend_seed(const RowVector& seed, const RowVector& b);

}  // namespace sigma::completion
