#include "sigma/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "sigma/io.hpp"

namespace sigma::synth {

void ScenarioConfig::validate() const {
    if (classes < 2) throw config_error("scenario.classes must be >= 2");
    if (embed_dim < 2) throw config_error("scenario.embed_dim must be >= 2");
    if (map_width < 1 || map_height < 1) throw config_error("scenario map must be at least 1x1");
    if (batch_size < 1) throw config_error("scenario.batch_size must be >= 1");
    if (boxes_per_image < 1) throw config_error("scenario.boxes_per_image must be >= 1");
    if (min_box < 1 || max_box < min_box || max_box > std::min(map_width, map_height))
        throw config_error("scenario box size range is invalid for the map size");
    if (source_classes.empty() || target_classes.empty())
        throw config_error("presence masks must allow at least one class per domain");
    for (int c : source_classes)
        if (c < 1 || c > classes) throw config_error("scenario.source_classes entry out of 1..C");
    for (int c : target_classes)
        if (c < 1 || c > classes) throw config_error("scenario.target_classes entry out of 1..C");
}

Scenario::Scenario(ScenarioConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng geom(cfg_.seed ^ 0x5ce9a7a11ULL);
    means_.resize(cfg_.classes, cfg_.embed_dim);
    for (int c = 0; c < cfg_.classes; ++c)
        for (int d = 0; d < cfg_.embed_dim; ++d) means_(c, d) = cfg_.mean_scale * geom.normal();
    delta_ = RowVector::Zero(cfg_.embed_dim);
    if (cfg_.shift_scale > 0.0) {
        for (int d = 0; d < cfg_.embed_dim; ++d) delta_(d) = geom.normal();
        delta_ *= cfg_.shift_scale / delta_.norm();
    }
}

FeatureMap Scenario::blank_map(graph::Domain domain, Rng& rng) const {
    const double noise =
        domain == graph::Domain::source ? cfg_.source_noise : cfg_.target_noise;
    FeatureMap m;
    m.width = cfg_.map_width;
    m.height = cfg_.map_height;
    m.domain = domain;
    m.features.resize(m.pixels(), cfg_.embed_dim);
    for (int p = 0; p < m.pixels(); ++p)
        for (int d = 0; d < cfg_.embed_dim; ++d) m.features(p, d) = noise * rng.normal();
    return m;
}

std::vector<BoxAnnotation> Scenario::place_boxes(const std::vector<int>& categories,
                                                 Rng& rng) const {
    std::vector<BoxAnnotation> boxes;
    for (int cat : categories) {
        BoxAnnotation box;
        box.category = cat;
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            const int bw = cfg_.min_box +
                           static_cast<int>(rng.uniform_index(
                               static_cast<std::uint64_t>(cfg_.max_box - cfg_.min_box + 1)));
            const int bh = cfg_.min_box +
                           static_cast<int>(rng.uniform_index(
                               static_cast<std::uint64_t>(cfg_.max_box - cfg_.min_box + 1)));
            box.x0 = static_cast<int>(
                rng.uniform_index(static_cast<std::uint64_t>(cfg_.map_width - bw + 1)));
            box.y0 = static_cast<int>(
                rng.uniform_index(static_cast<std::uint64_t>(cfg_.map_height - bh + 1)));
            box.x1 = box.x0 + bw - 1;
            box.y1 = box.y0 + bh - 1;
            placed = true;
            for (const BoxAnnotation& other : boxes) {
                const bool overlap = box.x0 <= other.x1 && other.x0 <= box.x1 &&
                                     box.y0 <= other.y1 && other.y0 <= box.y1;
                if (overlap) {
                    placed = false;
                    break;
                }
            }
        }
        if (placed) boxes.push_back(box);
        // a box that cannot be placed without overlap is skipped
    }
    return boxes;
}

ScenarioBatch Scenario::generate(Rng& rng, std::uint64_t batch_index) const {
    ScenarioBatch batch;
    const std::uint64_t slots =
        static_cast<std::uint64_t>(cfg_.batch_size) * cfg_.boxes_per_image;
    std::uint64_t source_cat_cursor = batch_index * slots;
    std::uint64_t target_cat_cursor = batch_index * slots + slots / 2;
    for (int b = 0; b < cfg_.batch_size; ++b) {
        SourceImage img;
        img.map = blank_map(graph::Domain::source, rng);
        std::vector<int> cats;
        for (int k = 0; k < cfg_.boxes_per_image; ++k) {
            cats.push_back(cfg_.source_classes[static_cast<std::size_t>(
                source_cat_cursor % cfg_.source_classes.size())]);
            ++source_cat_cursor;
        }
        img.boxes = place_boxes(cats, rng);
        for (const BoxAnnotation& box : img.boxes) {
            const RowVector mean = means_.row(box.category - 1);
            for (int y = box.y0; y <= box.y1; ++y)
                for (int x = box.x0; x <= box.x1; ++x) {
                    const int p = img.map.index(x, y);
                    for (int d = 0; d < cfg_.embed_dim; ++d)
                        img.map.features(p, d) = mean(d) + cfg_.source_noise * rng.normal();
                }
        }
        batch.source.push_back(std::move(img));
    }
    for (int b = 0; b < cfg_.batch_size; ++b) {
        TargetImage img;
        img.map = blank_map(graph::Domain::target, rng);
        std::vector<int> cats;
        for (int k = 0; k < cfg_.boxes_per_image; ++k) {
            cats.push_back(cfg_.target_classes[static_cast<std::size_t>(
                target_cat_cursor % cfg_.target_classes.size())]);
            ++target_cat_cursor;
        }
        const std::vector<BoxAnnotation> boxes = place_boxes(cats, rng);
        for (const BoxAnnotation& box : boxes) {
            const RowVector mean = means_.row(box.category - 1) + delta_;
            for (int y = box.y0; y <= box.y1; ++y)
                for (int x = box.x0; x <= box.x1; ++x) {
                    const int p = img.map.index(x, y);
                    for (int d = 0; d < cfg_.embed_dim; ++d)
                        img.map.features(p, d) = mean(d) + cfg_.target_noise * rng.normal();
                }
        }
        img.scores = score_map(img.map);
        batch.target.push_back(std::move(img));
    }
    if (batch.source.empty()) throw config_error("presence mask produced an empty source batch");
    if (batch.target.empty()) throw config_error("presence mask produced an empty target batch");
    return batch;
}

ScoreMap Scenario::score_map(const FeatureMap& map) const {
    ScoreMap s;
    s.scores.resize(map.pixels(), cfg_.classes);
    for (int c = 0; c < cfg_.classes; ++c) {
        const RowVector m = means_.row(c);
        const double norm2 = m.squaredNorm();
        for (int p = 0; p < map.pixels(); ++p) {
            const double a = map.features.row(p).dot(m) / norm2;
            s.scores(p, c) = 1.0 / (1.0 + std::exp(-cfg_.score_sharpness * (a - 0.5)));
        }
    }
    return s;
}

namespace {

/// fg + floor(fg/(C+1)) <= max_nodes for every fg up to this budget.
int foreground_budget(int max_nodes, int classes) {
    return (max_nodes * (classes + 1)) / (classes + 2);
}

std::vector<int> shuffled_prefix(int pool, int take, Rng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(pool));
    std::iota(idx.begin(), idx.end(), 0);
    const int k = std::min(take, pool);
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(pool - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

/// Stratified grid sampling of k distinct pixels inside a box: a
/// ceil(sqrt(k)) x ceil(sqrt(k)) cell grid, cells drawn with probability
/// proportional to their pixel count (systematic sampling), one uniform pixel
/// per draw. The per-pixel marginal is exactly uniform even when the box does
/// not divide evenly into cells.
std::vector<int> sample_box_pixels(const FeatureMap& map, const BoxAnnotation& box, int k,
                                   Rng& rng) {
    std::vector<int> picked;
    const int area = box.area();
    if (k >= area) {
        for (int y = box.y0; y <= box.y1; ++y)
            for (int x = box.x0; x <= box.x1; ++x) picked.push_back(map.index(x, y));
        return picked;
    }
    const int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(k))));
    struct Cell {
        int x0, x1, y0, y1;
        int area() const { return (x1 - x0 + 1) * (y1 - y0 + 1); }
    };
    std::vector<Cell> cells;
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            Cell c;
            c.x0 = box.x0 + (box.width() * gx) / g;
            c.x1 = box.x0 + (box.width() * (gx + 1)) / g - 1;
            c.y0 = box.y0 + (box.height() * gy) / g;
            c.y1 = box.y0 + (box.height() * (gy + 1)) / g - 1;
            if (c.x1 >= c.x0 && c.y1 >= c.y0) cells.push_back(c);
        }

    // systematic area-weighted cell multiplicities: k points spaced area/k
    // apart along the cumulative-area axis
    std::set<int> taken;
    const double stride = static_cast<double>(area) / k;
    const double offset = rng.uniform() * stride;
    double cum = 0.0;
    int point = 0;
    for (const Cell& c : cells) {
        const double hi = cum + c.area();
        int mult = 0;
        while (point < k && offset + point * stride < hi) {
            ++mult;
            ++point;
        }
        cum = hi;
        mult = std::min(mult, c.area());
        const int cw = c.x1 - c.x0 + 1, ch = c.y1 - c.y0 + 1;
        int placed = 0;
        int guard = 0;
        while (placed < mult && guard < mult * 64) {
            const int x = c.x0 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cw)));
            const int y = c.y0 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(ch)));
            if (taken.insert(map.index(x, y)).second) ++placed;
            ++guard;
        }
    }
    // deficit (collisions or clamped multiplicities): uniform distinct top-up
    while (static_cast<int>(taken.size()) < k) {
        const int x = box.x0 +
                      static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(box.width())));
        const int y = box.y0 +
                      static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(box.height())));
        taken.insert(map.index(x, y));
    }
    picked.assign(taken.begin(), taken.end());
    return picked;
}

}  // namespace

NodeSample sample_source_nodes(const FeatureMap& map, const std::vector<BoxAnnotation>& boxes,
                               int max_nodes, int classes, Rng& rng) {
    if (max_nodes < classes + 1)
        throw config_error("sample_source_nodes: max_nodes must be >= C+1");
    NodeSample out;
    out.pseudo = false;

    std::vector<int> pixel_ids;
    std::vector<int> labels;

    // even split of the foreground budget, remainder to larger boxes
    const int fg_budget = foreground_budget(max_nodes, classes);
    const int nboxes = static_cast<int>(boxes.size());
    if (nboxes > 0) {
        std::vector<int> alloc(static_cast<std::size_t>(nboxes), fg_budget / nboxes);
        int remainder = fg_budget % nboxes;
        std::vector<int> by_area(static_cast<std::size_t>(nboxes));
        std::iota(by_area.begin(), by_area.end(), 0);
        std::stable_sort(by_area.begin(), by_area.end(), [&](int a, int b) {
            return boxes[static_cast<std::size_t>(a)].area() >
                   boxes[static_cast<std::size_t>(b)].area();
        });
        for (int i = 0; i < remainder; ++i)
            alloc[static_cast<std::size_t>(by_area[static_cast<std::size_t>(i % nboxes)])] += 1;
        for (int b = 0; b < nboxes; ++b) {
            const BoxAnnotation& box = boxes[static_cast<std::size_t>(b)];
            const int k = std::min(alloc[static_cast<std::size_t>(b)], box.area());
            if (k <= 0) continue;
            for (int p : sample_box_pixels(map, box, k, rng)) {
                pixel_ids.push_back(p);
                labels.push_back(box.category);
            }
        }
    }

    // background: 1/(C+1) of the realized foreground count, outside all boxes
    const int fg_count = static_cast<int>(pixel_ids.size());
    const int bg_target = fg_count / (classes + 1);
    if (bg_target > 0) {
        std::vector<int> bg_pool;
        for (int y = 0; y < map.height; ++y)
            for (int x = 0; x < map.width; ++x) {
                bool inside = false;
                for (const BoxAnnotation& box : boxes)
                    if (box.contains(x, y)) {
                        inside = true;
                        break;
                    }
                if (!inside) bg_pool.push_back(map.index(x, y));
            }
        if (!bg_pool.empty()) {
            const std::vector<int> pick =
                shuffled_prefix(static_cast<int>(bg_pool.size()), bg_target, rng);
            for (int i : pick) {
                pixel_ids.push_back(bg_pool[static_cast<std::size_t>(i)]);
                labels.push_back(0);
            }
        }
    }

    out.features.resize(static_cast<Eigen::Index>(pixel_ids.size()), map.features.cols());
    for (std::size_t i = 0; i < pixel_ids.size(); ++i)
        out.features.row(static_cast<Eigen::Index>(i)) = map.features.row(pixel_ids[i]);
    out.labels = std::move(labels);
    return out;
}

NodeSample sample_target_nodes(const FeatureMap& map, const ScoreMap& scores, int max_nodes,
                               int classes, double tau_fg, double tau_bg, Rng& rng) {
    if (!(0.0 < tau_bg && tau_bg < tau_fg && tau_fg < 1.0))
        throw config_error("sample_target_nodes: need 0 < tau_bg < tau_fg < 1");
    if (scores.scores.rows() != map.features.rows() || scores.scores.cols() != classes)
        throw shape_error("sample_target_nodes: score map shape mismatch");

    std::vector<int> fg_pool, fg_labels, bg_pool;
    for (int p = 0; p < map.pixels(); ++p) {
        Eigen::Index best = 0;
        const double s = scores.scores.row(p).maxCoeff(&best);
        if (s > tau_fg) {
            fg_pool.push_back(p);
            fg_labels.push_back(static_cast<int>(best) + 1);
        } else if (s < tau_bg) {
            bg_pool.push_back(p);
        }
        // scores in [tau_bg, tau_fg] are never sampled
    }

    NodeSample out;
    out.pseudo = true;
    std::vector<int> pixel_ids;
    std::vector<int> labels;

    const int fg_budget = foreground_budget(max_nodes, classes);
    const std::vector<int> fg_pick =
        shuffled_prefix(static_cast<int>(fg_pool.size()), fg_budget, rng);
    for (int i : fg_pick) {
        pixel_ids.push_back(fg_pool[static_cast<std::size_t>(i)]);
        labels.push_back(fg_labels[static_cast<std::size_t>(i)]);
    }

    const int bg_target = static_cast<int>(pixel_ids.size()) / (classes + 1);
    const std::vector<int> bg_pick =
        shuffled_prefix(static_cast<int>(bg_pool.size()), bg_target, rng);
    for (int i : bg_pick) {
        pixel_ids.push_back(bg_pool[static_cast<std::size_t>(i)]);
        labels.push_back(0);
    }

    out.features.resize(static_cast<Eigen::Index>(pixel_ids.size()), map.features.cols());
    for (std::size_t i = 0; i < pixel_ids.size(); ++i)
        out.features.row(static_cast<Eigen::Index>(i)) = map.features.row(pixel_ids[i]);
    out.labels = std::move(labels);
    return out;
}

V2GParams V2GParams::init(int in, int hidden, int out, Rng& rng) {
    V2GParams p;
    p.fc1 = Linear::init(in, hidden, rng);
    p.ln = LayerNorm::init(hidden);
    p.fc2 = Linear::init(hidden, out, rng);
    return p;
}

ad::Var v2g_project(ad::Tape& t, ad::Var raw, const V2GVars& p) {
    ad::Var h = apply_linear(t, raw, p.fc1);
    h = apply_layer_norm(t, h, p.ln, graph::kLayerNormEps);
    h = t.relu(h);
    return apply_linear(t, h, p.fc2);
}

Matrix v2g_project(const Matrix& raw, const V2GParams& p) {
    if (raw.cols() != p.fc1.w.rows())
        throw shape_error("v2g_project: input dim does not match fc1");
    ad::Tape t;
    ad::Var x = t.constant(raw);
    V2GVars v{{t.constant(p.fc1.w), t.constant(p.fc1.b)},
              {t.constant(p.ln.gain), t.constant(p.ln.shift)},
              {t.constant(p.fc2.w), t.constant(p.fc2.b)}};
    return t.value(v2g_project(t, x, v));
}

void export_scenario(const std::string& path, const ScenarioBatch& batch) {
    io::TensorArchive a;
    Matrix counts(1, 2);
    counts << static_cast<double>(batch.source.size()), static_cast<double>(batch.target.size());
    a.put("batch_sizes", counts);
    for (std::size_t i = 0; i < batch.source.size(); ++i) {
        const std::string tag = "source" + std::to_string(i);
        const SourceImage& img = batch.source[i];
        a.put(tag + "/features", img.map.features);
        Matrix dims(1, 2);
        dims << img.map.width, img.map.height;
        a.put(tag + "/dims", dims);
        Matrix boxes(static_cast<Eigen::Index>(img.boxes.size()), 5);
        for (std::size_t b = 0; b < img.boxes.size(); ++b) {
            const BoxAnnotation& box = img.boxes[b];
            boxes.row(static_cast<Eigen::Index>(b)) << box.x0, box.y0, box.x1, box.y1,
                box.category;
        }
        a.put(tag + "/boxes", boxes);
    }
    for (std::size_t i = 0; i < batch.target.size(); ++i) {
        const std::string tag = "target" + std::to_string(i);
        const TargetImage& img = batch.target[i];
        a.put(tag + "/features", img.map.features);
        Matrix dims(1, 2);
        dims << img.map.width, img.map.height;
        a.put(tag + "/dims", dims);
        a.put(tag + "/scores", img.scores.scores);
    }
    a.save(path);
}

}  // namespace sigma::synth
