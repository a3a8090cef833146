#pragma once

#include <string>
#include <vector>

#include "sigma/ad.hpp"
#include "sigma/common.hpp"
#include "sigma/graph.hpp"
#include "sigma/params.hpp"
#include "sigma/rng.hpp"

namespace sigma::synth {

/// Single-scale feature map. Pixels are stored as rows, (W*H) x D, with
/// linear index p = y * width + x.
struct FeatureMap {
    Matrix features;
    int width = 0;
    int height = 0;
    graph::Domain domain = graph::Domain::source;

    int pixels() const { return width * height; }
    int index(int x, int y) const { return y * width + x; }
};

/// Inclusive pixel rectangle with a foreground category in 1..C.
struct BoxAnnotation {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int category = 1;

    int width() const { return x1 - x0 + 1; }
    int height() const { return y1 - y0 + 1; }
    int area() const { return width() * height(); }
    bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

/// Per-class scores in [0,1], (W*H) x C, same pixel indexing as FeatureMap.
struct ScoreMap {
    Matrix scores;
};

struct ScenarioConfig {
    int classes = 4;        // C
    int embed_dim = 32;     // D (feature channels and node embedding width)
    int map_width = 12;
    int map_height = 12;
    int boxes_per_image = 2;
    int batch_size = 1;     // B images per domain per step
    int min_box = 3;
    int max_box = 4;
    double mean_scale = 1.0;     // class mean entries ~ N(0, mean_scale^2)
    double source_noise = 0.3;   // sigma_s (isotropic std)
    double target_noise = 0.3;   // sigma_t
    double shift_scale = 0.6;    // ||delta||; 0 disables the domain shift
    double score_sharpness = 12.0;
    std::vector<int> source_classes = {1, 2, 3, 4};
    std::vector<int> target_classes = {1, 2, 3, 4};
    std::uint64_t seed = 7;

    void validate() const;
};

struct SourceImage {
    FeatureMap map;
    std::vector<BoxAnnotation> boxes;
};

struct TargetImage {
    FeatureMap map;
    ScoreMap scores;
};

struct ScenarioBatch {
    std::vector<SourceImage> source;
    std::vector<TargetImage> target;
};

/// Fixed per-scenario geometry: class means and the domain-shift vector,
/// derived deterministically from the scenario seed.
class Scenario {
public:
    explicit Scenario(ScenarioConfig cfg);

    const ScenarioConfig& config() const { return cfg_; }
    const Matrix& class_means() const { return means_; }  // C x D, row c-1 for class c
    const RowVector& shift() const { return delta_; }

    /// One batch of both domains. Box categories cycle deterministically
    /// through each domain's allowed class list, with the cycle phase carried
    /// by batch_index and the target cycle offset by half a batch. When the
    /// per-batch slot count is smaller than the allowed list, consecutive
    /// batches cover different class subsets (batch-level mismatch); when it
    /// is at least the list length, every batch covers the whole mask.
    ScenarioBatch generate(Rng& rng, std::uint64_t batch_index = 0) const;

    /// Template score head: sigmoid(k * (x . m_c / |m_c|^2 - 1/2)).
    ScoreMap score_map(const FeatureMap& map) const;

private:
    ScenarioConfig cfg_;
    Matrix means_;
    RowVector delta_;

    FeatureMap blank_map(graph::Domain domain, Rng& rng) const;
    std::vector<BoxAnnotation> place_boxes(const std::vector<int>& categories, Rng& rng) const;
};

/// Raw sampled pixel features plus labels, before V2G projection.
struct NodeSample {
    Matrix features;  // N x D
    std::vector<int> labels;
    bool pseudo = false;

    int size() const { return static_cast<int>(features.rows()); }
};

/// Grid-stratified sampling inside ground-truth boxes plus a 1/(C+1) ratio of
/// background pixels outside all boxes.
NodeSample sample_source_nodes(const FeatureMap& map, const std::vector<BoxAnnotation>& boxes,
                               int max_nodes, int classes, Rng& rng);

/// Score-thresholded sampling: foreground where max_c score > tau_fg (pseudo
/// label = argmax), background pool where max_c score < tau_bg, dead zone in
/// between never sampled.
NodeSample sample_target_nodes(const FeatureMap& map, const ScoreMap& scores, int max_nodes,
                               int classes, double tau_fg, double tau_bg, Rng& rng);

/// Fc-Norm-ReLU-Fc projection into the graphical space.
struct V2GParams {
    Linear fc1;
    LayerNorm ln;
    Linear fc2;

    static V2GParams init(int in, int hidden, int out, Rng& rng);
};

struct V2GVars {
    LinearVars fc1;
    LayerNormVars ln;
    LinearVars fc2;
};

ad::Var v2g_project(ad::Tape& t, ad::Var raw, const V2GVars& p);
Matrix v2g_project(const Matrix& raw, const V2GParams& p);

/// Writes one batch to the binary tensor container for oracle cross-checks.
void export_scenario(const std::string& path, const ScenarioBatch& batch);

}  // namespace sigma::synth
