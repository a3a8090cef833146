#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "fd_check.hpp"
#include "sigma/io.hpp"
#include "sigma/synth.hpp"

using namespace sigma;
using testutil::random_matrix;

namespace {

synth::ScenarioConfig small_config() {
    synth::ScenarioConfig cfg;
    cfg.classes = 4;
    cfg.embed_dim = 8;
    cfg.map_width = 12;
    cfg.map_height = 12;
    cfg.boxes_per_image = 2;
    cfg.batch_size = 2;
    cfg.min_box = 3;
    cfg.max_box = 4;
    cfg.source_classes = {1, 2, 4};
    cfg.target_classes = {1, 3, 4};
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("scenario regeneration from the same stream is byte-identical") {
    const synth::Scenario scenario(small_config());
    Rng a(42), b(42);
    const synth::ScenarioBatch ba = scenario.generate(a);
    const synth::ScenarioBatch bb = scenario.generate(b);
    REQUIRE(ba.source.size() == bb.source.size());
    for (std::size_t i = 0; i < ba.source.size(); ++i) {
        CHECK(ba.source[i].map.features == bb.source[i].map.features);
        REQUIRE(ba.source[i].boxes.size() == bb.source[i].boxes.size());
    }
    for (std::size_t i = 0; i < ba.target.size(); ++i) {
        CHECK(ba.target[i].map.features == bb.target[i].map.features);
        CHECK(ba.target[i].scores.scores == bb.target[i].scores.scores);
    }
}

TEST_CASE("presence masks keep suppressed classes out of the batch") {
    synth::ScenarioConfig cfg = small_config();
    cfg.source_classes = {1, 2, 4};  // class 3 suppressed
    const synth::Scenario scenario(cfg);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const synth::ScenarioBatch batch = scenario.generate(rng);
        for (const synth::SourceImage& img : batch.source)
            for (const synth::BoxAnnotation& box : img.boxes) CHECK(box.category != 3);
    }
}

TEST_CASE("box categories cycle through the allowed list") {
    const synth::Scenario scenario(small_config());
    Rng rng(3);
    const synth::ScenarioBatch batch = scenario.generate(rng);
    std::set<int> seen;
    for (const synth::SourceImage& img : batch.source)
        for (const synth::BoxAnnotation& box : img.boxes) seen.insert(box.category);
    // 2 images x 2 boxes >= 3 allowed classes, so every allowed class appears
    CHECK(seen == std::set<int>{1, 2, 4});
}

TEST_CASE("zero shift and equal noise give matching class statistics") {
    synth::ScenarioConfig cfg = small_config();
    cfg.shift_scale = 0.0;
    cfg.source_noise = 0.3;
    cfg.target_noise = 0.3;
    cfg.source_classes = {1};
    cfg.target_classes = {1};
    cfg.batch_size = 4;
    const synth::Scenario scenario(cfg);
    Rng rng(11);

    // collect >= 1000 class-1 pixels per domain straight from planted boxes
    std::vector<RowVector> src, tgt;
    while (src.size() < 1000 || tgt.size() < 1000) {
        const synth::ScenarioBatch batch = scenario.generate(rng);
        for (const synth::SourceImage& img : batch.source)
            for (const synth::BoxAnnotation& box : img.boxes)
                for (int y = box.y0; y <= box.y1; ++y)
                    for (int x = box.x0; x <= box.x1; ++x)
                        src.push_back(img.map.features.row(img.map.index(x, y)));
        for (const synth::TargetImage& img : batch.target)
            for (int p = 0; p < img.map.pixels(); ++p)
                if (img.scores.scores.row(p).maxCoeff() > 0.5)
                    tgt.push_back(img.map.features.row(p));
    }

    // two-sample z test per dimension, Bonferroni at alpha = 0.01
    const int d = cfg.embed_dim;
    const double n1 = static_cast<double>(src.size()), n2 = static_cast<double>(tgt.size());
    for (int k = 0; k < d; ++k) {
        double m1 = 0, m2 = 0;
        for (const auto& v : src) m1 += v(k);
        for (const auto& v : tgt) m2 += v(k);
        m1 /= n1;
        m2 /= n2;
        double s1 = 0, s2 = 0;
        for (const auto& v : src) s1 += (v(k) - m1) * (v(k) - m1);
        for (const auto& v : tgt) s2 += (v(k) - m2) * (v(k) - m2);
        s1 /= n1 - 1;
        s2 /= n2 - 1;
        const double z = std::abs(m1 - m2) / std::sqrt(s1 / n1 + s2 / n2);
        CHECK(z < 3.58);  // two-sided alpha = 0.01 / 8 dims
    }
}

TEST_CASE("source sampling: the 2x2 single-box hand case") {
    synth::FeatureMap map;
    map.width = 6;
    map.height = 6;
    map.features = Matrix::Zero(36, 3);
    std::vector<synth::BoxAnnotation> boxes{{2, 2, 3, 3, 1}};  // 4 pixels, class 1
    Rng rng(1);
    const synth::NodeSample s = synth::sample_source_nodes(map, boxes, 100, 1, rng);
    int fg = 0, bg = 0;
    for (int l : s.labels) (l == 1 ? fg : bg)++;
    CHECK(fg == 4);
    CHECK(bg == 2);  // ratio 1/(C+1) = 1/2 of the 4 foreground nodes
    CHECK_FALSE(s.pseudo);
}

TEST_CASE("source sampling: boxes covering the whole map leave no background") {
    synth::FeatureMap map;
    map.width = 4;
    map.height = 4;
    map.features = Matrix::Zero(16, 3);
    std::vector<synth::BoxAnnotation> boxes{{0, 0, 3, 3, 2}};
    Rng rng(2);
    const synth::NodeSample s = synth::sample_source_nodes(map, boxes, 100, 3, rng);
    for (int l : s.labels) CHECK(l == 2);
}

TEST_CASE("source sampling: labels agree with the planted box category") {
    // class-coded features make the planted category recoverable per pixel
    synth::FeatureMap map;
    map.width = 10;
    map.height = 10;
    map.features = Matrix::Zero(100, 2);
    std::vector<synth::BoxAnnotation> boxes{{0, 0, 3, 3, 1}, {5, 5, 9, 9, 3}};
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
            double code = 0.0;
            for (const auto& b : boxes)
                if (b.contains(x, y)) code = b.category;
            map.features(map.index(x, y), 0) = code;
        }
    Rng rng(3);
    const synth::NodeSample s = synth::sample_source_nodes(map, boxes, 40, 3, rng);
    for (int i = 0; i < s.size(); ++i)
        CHECK(s.labels[static_cast<std::size_t>(i)] == static_cast<int>(s.features(i, 0)));
}

TEST_CASE("source sampling respects the node budget and stays spatially uniform") {
    synth::FeatureMap map;
    map.width = 12;
    map.height = 12;
    map.features = Matrix::Zero(144, 2);
    for (int p = 0; p < 144; ++p) {
        map.features(p, 0) = static_cast<double>(p % 12);  // x coordinate
        map.features(p, 1) = static_cast<double>(p / 12);  // y coordinate
    }
    std::vector<synth::BoxAnnotation> boxes{{1, 1, 10, 10, 1}};  // 100-pixel box

    Rng rng(4);
    long counts[2][2] = {{0, 0}, {0, 0}};
    long total = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const synth::NodeSample s = synth::sample_source_nodes(map, boxes, 10, 1, rng);
        CHECK(s.size() <= 10);
        for (int i = 0; i < s.size(); ++i) {
            if (s.labels[static_cast<std::size_t>(i)] != 1) continue;
            const int x = static_cast<int>(s.features(i, 0));
            const int y = static_cast<int>(s.features(i, 1));
            ++counts[y <= 5 ? 0 : 1][x <= 5 ? 0 : 1];
            ++total;
        }
    }
    // chi-square over the four quadrants, 3 dof, alpha = 0.01 -> 11.345
    const double expected = static_cast<double>(total) / 4.0;
    double chi2 = 0.0;
    for (auto& row : counts)
        for (long c : row) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 11.345);
}

TEST_CASE("target sampling honors both thresholds and the dead zone") {
    synth::FeatureMap map;
    map.width = 3;
    map.height = 1;
    map.features = Matrix::Zero(3, 2);
    synth::ScoreMap scores;
    scores.scores.resize(3, 2);
    scores.scores << 0.7, 0.1,   // foreground, argmax class 1
                     0.3, 0.2,   // dead zone: never sampled
                     0.04, 0.01; // background pool only
    map.features << 10, 0, 20, 0, 30, 0;

    Rng rng(5);
    const synth::NodeSample s =
        synth::sample_target_nodes(map, scores, 100, 2, 0.5, 0.05, rng);
    REQUIRE(s.size() >= 1);
    CHECK(s.pseudo);
    bool saw_fg = false;
    for (int i = 0; i < s.size(); ++i) {
        CHECK(s.features(i, 0) != 20);  // dead-zone pixel excluded
        if (s.features(i, 0) == 10) {
            CHECK(s.labels[static_cast<std::size_t>(i)] == 1);
            saw_fg = true;
        }
        if (s.features(i, 0) == 30) CHECK(s.labels[static_cast<std::size_t>(i)] == 0);
    }
    CHECK(saw_fg);

    CHECK_THROWS_AS(
        (void)synth::sample_target_nodes(map, scores, 100, 2, 0.05, 0.5, rng),
        config_error);
}

TEST_CASE("target pseudo labels equal the score argmax") {
    synth::ScenarioConfig cfg = small_config();
    const synth::Scenario scenario(cfg);
    Rng rng(6);
    const synth::ScenarioBatch batch = scenario.generate(rng);
    const synth::TargetImage& img = batch.target.front();
    Rng srng(7);
    const synth::NodeSample s =
        synth::sample_target_nodes(img.map, img.scores, 50, cfg.classes, 0.5, 0.05, srng);
    // recover each sampled pixel by matching features, then check the argmax
    for (int i = 0; i < s.size(); ++i) {
        if (s.labels[static_cast<std::size_t>(i)] == 0) continue;
        for (int p = 0; p < img.map.pixels(); ++p) {
            if ((img.map.features.row(p) - s.features.row(i)).norm() > 0) continue;
            Eigen::Index best = 0;
            img.scores.scores.row(p).maxCoeff(&best);
            CHECK(s.labels[static_cast<std::size_t>(i)] == static_cast<int>(best) + 1);
            break;
        }
    }
}

TEST_CASE("v2g projection: zero maps, identity composition, and the oracle") {
    // all-zero weights and biases produce all-zero embeddings
    synth::V2GParams zero;
    zero.fc1 = {Matrix::Zero(2, 2), Matrix::Zero(1, 2)};
    zero.ln = LayerNorm::init(2);
    zero.fc2 = {Matrix::Zero(2, 2), Matrix::Zero(1, 2)};
    Matrix raw(3, 2);
    raw << 1, 2, 3, 4, 5, 6;
    CHECK(synth::v2g_project(raw, zero).cwiseAbs().maxCoeff() == 0.0);

    // identity Fc maps: y = ReLU(layer_normalize(x))
    synth::V2GParams ident;
    ident.fc1 = {Matrix::Identity(2, 2), Matrix::Zero(1, 2)};
    ident.ln = LayerNorm::init(2);
    ident.fc2 = {Matrix::Identity(2, 2), Matrix::Zero(1, 2)};
    Matrix one_row(1, 2);
    one_row << 1, 3;
    const Matrix out = synth::v2g_project(one_row, ident);
    CHECK(out(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(1.0).epsilon(1e-4));

    // random instance against an independently composed oracle
    Rng rng(8);
    synth::V2GParams p = synth::V2GParams::init(3, 5, 4, rng);
    const Matrix x = random_matrix(6, 3, rng);
    const Matrix got = synth::v2g_project(x, p);
    for (int i = 0; i < 6; ++i) {
        RowVector h = x.row(i) * p.fc1.w + p.fc1.b.row(0);
        const Vector hn = graph::layer_normalize(h.transpose(), p.ln.gain.row(0).transpose(),
                                                 p.ln.shift.row(0).transpose());
        RowVector r = hn.transpose().cwiseMax(0.0);
        RowVector y = r * p.fc2.w + p.fc2.b.row(0);
        CHECK((got.row(i) - y).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("scenario export writes a readable tensor container") {
    const synth::Scenario scenario(small_config());
    Rng rng(9);
    const synth::ScenarioBatch batch = scenario.generate(rng);
    const std::string path = "scenario_export_test.bin";
    synth::export_scenario(path, batch);
    const io::TensorArchive a = io::TensorArchive::load(path);
    CHECK(a.has("source0/features"));
    CHECK(a.has("target0/scores"));
    CHECK(a.get("source0/features") == batch.source[0].map.features);
    CHECK(a.get("batch_sizes")(0, 0) == doctest::Approx(2.0));
    std::filesystem::remove(path);
}

TEST_CASE("empty presence mask is rejected") {
    synth::ScenarioConfig cfg = small_config();
    cfg.source_classes = {};
    CHECK_THROWS_AS((void)synth::Scenario(cfg), config_error);
}
