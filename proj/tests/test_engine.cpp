#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "fd_check.hpp"
#include "sigma/engine.hpp"

using namespace sigma;
using testutil::random_matrix;

namespace {

RunConfig tiny_config(std::uint64_t seed = 7) {
    RunConfig cfg;
    cfg.scenario.classes = 3;
    cfg.scenario.embed_dim = 8;
    cfg.scenario.map_width = 8;
    cfg.scenario.map_height = 8;
    cfg.scenario.boxes_per_image = 2;
    cfg.scenario.batch_size = 1;
    cfg.scenario.min_box = 2;
    cfg.scenario.max_box = 3;
    cfg.scenario.source_classes = {1, 2, 3};
    cfg.scenario.target_classes = {1, 2, 3};
    cfg.max_nodes_per_map = 6;
    cfg.eval_batches = 2;
    cfg.seed = seed;
    cfg.scenario.seed = seed;
    return cfg;
}

bool params_equal(const engine::TrainState& a, const engine::TrainState& b) {
    for (std::size_t i = 0; i < a.registry.slots().size(); ++i)
        if (*a.registry.slots()[i].storage != *b.registry.slots()[i].storage) return false;
    return a.bank_source.seeds == b.bank_source.seeds &&
           a.bank_target.seeds == b.bank_target.seeds && a.rng == b.rng && a.step == b.step;
}

}  // namespace

TEST_CASE("node alignment loss is (Ns+Nt) ln 2 at maximal uncertainty") {
    Rng rng(50);
    // zero-initialized head gives p = 1/2 on every node
    const engine::DiscriminatorParams d = engine::DiscriminatorParams::init(4, rng, 16);
    ad::Tape t;
    engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                 {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                 {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                 {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                 {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                 {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                 {t.constant(d.head.w), t.constant(d.head.b)}};
    const Matrix src = random_matrix(3, 4, rng);
    const Matrix tgt = random_matrix(2, 4, rng);
    bool one_sided = true;
    ad::Var loss = engine::node_alignment_loss(t, t.constant(src), {0, 0, 0}, t.constant(tgt),
                                               {0, 0}, dv, &one_sided);
    CHECK_FALSE(one_sided);
    CHECK(t.scalar_value(loss) == doctest::Approx(5.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("node alignment loss vanishes for a high-margin discriminator") {
    // craft a head that reads a single input feature with a +-50 margin
    engine::DiscriminatorParams d;
    d.fc1 = {Matrix::Zero(2, 4), Matrix::Zero(1, 4)};
    d.fc1.w(0, 0) = 1.0;
    d.ln1 = LayerNorm::init(4);
    d.fc2 = {Matrix::Identity(4, 4), Matrix::Zero(1, 4)};
    d.ln2 = LayerNorm::init(4);
    d.fc3 = {Matrix::Identity(4, 4), Matrix::Zero(1, 4)};
    d.ln3 = LayerNorm::init(4);
    // after LN+ReLU the first feature's sign survives as two distinct
    // activation patterns; a +-50 head contrast gives a huge margin
    d.head = {Matrix::Zero(4, 1), Matrix::Zero(1, 1)};
    d.head.w(0, 0) = 50.0;
    d.head.w(1, 0) = -50.0;

    ad::Tape t;
    engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                 {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                 {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                 {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                 {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                 {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                 {t.constant(d.head.w), t.constant(d.head.b)}};
    Matrix src(2, 2), tgt(2, 2);
    src << 5, 0, 7, 0;   // strongly positive first feature -> p ~ 1
    tgt << -5, 0, -6, 0; // strongly negative -> p ~ 0
    ad::Var loss =
        engine::node_alignment_loss(t, t.constant(src), {0, 0}, t.constant(tgt), {0, 0}, dv);
    CHECK(t.scalar_value(loss) < 1e-8);
}

TEST_CASE("node alignment loss matches a hand-evaluated BCE over logits") {
    Rng rng(51);
    engine::DiscriminatorParams d = engine::DiscriminatorParams::init(3, rng, 8);
    d.head = Linear::init(8, 1, rng);  // non-zero head for non-trivial logits
    ad::Tape t;
    engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                 {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                 {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                 {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                 {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                 {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                 {t.constant(d.head.w), t.constant(d.head.b)}};
    const Matrix src = random_matrix(2, 3, rng);
    const Matrix tgt = random_matrix(2, 3, rng);

    const Matrix zs = t.value(engine::discriminator_logits(t, t.constant(src), dv));
    const Matrix zt = t.value(engine::discriminator_logits(t, t.constant(tgt), dv));
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) {
        expect += -std::log(1.0 / (1.0 + std::exp(-zs(i, 0))));
        expect += -std::log(1.0 - 1.0 / (1.0 + std::exp(-zt(i, 0))));
    }
    ad::Var loss =
        engine::node_alignment_loss(t, t.constant(src), {0, 0}, t.constant(tgt), {0, 0}, dv);
    CHECK(t.scalar_value(loss) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("node alignment loss re-filters hallucinated nodes defensively") {
    Rng rng(52);
    const engine::DiscriminatorParams d = engine::DiscriminatorParams::init(3, rng, 8);
    ad::Tape t;
    engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                 {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                 {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                 {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                 {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                 {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                 {t.constant(d.head.w), t.constant(d.head.b)}};
    const Matrix src = random_matrix(3, 3, rng);
    const Matrix tgt = random_matrix(2, 3, rng);

    ad::Var full = engine::node_alignment_loss(t, t.constant(src), {0, 1, 0}, t.constant(tgt),
                                               {0, 0}, dv);
    Matrix filtered(2, 3);
    filtered.row(0) = src.row(0);
    filtered.row(1) = src.row(2);
    ad::Var expect = engine::node_alignment_loss(t, t.constant(filtered), {0, 0},
                                                 t.constant(tgt), {0, 0}, dv);
    CHECK(t.scalar_value(full) == doctest::Approx(t.scalar_value(expect)).epsilon(1e-12));

    // one side entirely hallucinated: flagged, loss over the other side only
    bool one_sided = false;
    (void)engine::node_alignment_loss(t, t.constant(src), {1, 1, 1}, t.constant(tgt), {0, 0},
                                      dv, &one_sided);
    CHECK(one_sided);
}

TEST_CASE("gradient reversal flips the embedding-side gradient of the alignment loss") {
    Rng rng(53);
    engine::DiscriminatorParams d = engine::DiscriminatorParams::init(3, rng, 8);
    d.head = Linear::init(8, 1, rng);
    const Matrix src = random_matrix(2, 3, rng);
    const Matrix tgt = random_matrix(2, 3, rng);

    auto loss_value = [&](const Matrix& s) {
        ad::Tape t;
        engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                     {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                     {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                     {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                     {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                     {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                     {t.constant(d.head.w), t.constant(d.head.b)}};
        return t.scalar_value(engine::node_alignment_loss(t, t.constant(s), {0, 0},
                                                          t.constant(tgt), {0, 0}, dv));
    };

    ad::Tape t;
    engine::DiscriminatorVars dv{{t.constant(d.fc1.w), t.constant(d.fc1.b)},
                                 {t.constant(d.fc2.w), t.constant(d.fc2.b)},
                                 {t.constant(d.fc3.w), t.constant(d.fc3.b)},
                                 {t.constant(d.ln1.gain), t.constant(d.ln1.shift)},
                                 {t.constant(d.ln2.gain), t.constant(d.ln2.shift)},
                                 {t.constant(d.ln3.gain), t.constant(d.ln3.shift)},
                                 {t.constant(d.head.w), t.constant(d.head.b)}};
    ad::Var vs = t.leaf(src, true);
    ad::Var loss = engine::node_alignment_loss(t, vs, {0, 0}, t.constant(tgt), {0, 0}, dv);
    t.backward(loss);
    const Matrix analytic = t.grad(vs);

    const double h = 1e-5;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            Matrix up = src, down = src;
            up(i, j) += h;
            down(i, j) -= h;
            const double fd = (loss_value(up) - loss_value(down)) / (2.0 * h);
            CHECK(testutil::rel_err(analytic(i, j), -fd) < 1e-4);
        }
}

TEST_CASE("composite loss arithmetic") {
    ad::Tape t;
    auto scalar = [&](double v) {
        Matrix m(1, 1);
        m(0, 0) = v;
        return t.leaf(m, false);
    };
    CHECK(t.scalar_value(engine::composite_loss(t, scalar(1), scalar(2), scalar(3),
                                                {0.1, 0.1})) == doctest::Approx(3.3));
    CHECK(t.scalar_value(engine::composite_loss(t, scalar(0), scalar(0), scalar(0),
                                                {0.1, 0.1})) == doctest::Approx(0.0));
    // the lambda1 = 0.2 / lambda2 = 0.1 sensitivity-grid configuration
    CHECK(t.scalar_value(engine::composite_loss(t, scalar(1), scalar(2), scalar(3),
                                                {0.2, 0.1})) == doctest::Approx(3.4));
}

TEST_CASE("train steps from the same seed are bit-identical") {
    const RunConfig cfg = tiny_config(11);
    engine::TrainState a(cfg), b(cfg);
    for (int s = 0; s < 5; ++s) {
        const auto batch_a = a.scenario.generate(a.rng, a.step);
        const auto batch_b = b.scenario.generate(b.rng, b.step);
        const auto rec_a = engine::train_step(a, batch_a);
        const auto rec_b = engine::train_step(b, batch_b);
        CHECK(rec_a.to_json_line() == rec_b.to_json_line());
    }
    CHECK(params_equal(a, b));
}

TEST_CASE("a step decreases the composite loss on its own batch in >= 95 of 100 trials") {
    int decreased = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const RunConfig cfg = tiny_config(1000 + static_cast<std::uint64_t>(trial));
        engine::TrainState state(cfg);
        const auto batch = state.scenario.generate(state.rng, 0);
        const Rng step_rng = state.rng;  // rng entering the forward
        const auto rec = engine::train_step(state, batch);
        REQUIRE_FALSE(rec.aborted);

        ad::Tape t;
        Rng replay = step_rng;
        const auto f = engine::forward_pipeline(t, state.params, state.registry,
                                                state.bank_source, state.bank_target, batch,
                                                cfg, replay, true);
        if (t.scalar_value(f.loss_total) < rec.loss_total) ++decreased;
    }
    CHECK(decreased >= 95);
}

TEST_CASE("an empty target batch takes the halved-source placeholder path") {
    const RunConfig cfg = tiny_config(13);
    engine::TrainState state(cfg);
    auto batch = state.scenario.generate(state.rng, 0);
    // zero features score sigmoid(-k/2) under every class template: all
    // pixels fall below tau_bg, and the background ratio of zero foreground
    // nodes is zero, so the target side comes back empty
    for (auto& img : batch.target) {
        img.map.features.setZero();
        img.scores = state.scenario.score_map(img.map);
        CHECK(img.scores.scores.maxCoeff() < cfg.tau_bg);
    }
    const auto rec = engine::train_step(state, batch);
    CHECK_FALSE(rec.aborted);
    CHECK(rec.placeholder_used);
    CHECK(rec.nodes_target >= 1);
    CHECK(rec.loss_total != 0.0);
}

TEST_CASE("a non-finite loss aborts the step and leaves the state untouched") {
    const RunConfig cfg = tiny_config(17);
    engine::TrainState poisoned(cfg), reference(cfg);
    // +inf head bias makes the source-side BCE evaluate inf - inf = NaN,
    // while inf still compares equal for the state comparison below
    poisoned.params.disc.head.b(0, 0) = std::numeric_limits<double>::infinity();
    reference.params.disc.head.b(0, 0) = std::numeric_limits<double>::infinity();

    const auto batch = poisoned.scenario.generate(poisoned.rng, 0);
    (void)reference.scenario.generate(reference.rng, 0);
    const auto rec = engine::train_step(poisoned, batch);
    CHECK(rec.aborted);
    CHECK(params_equal(poisoned, reference));  // rng restored, nothing stepped
}

TEST_CASE("memory banks change only through the returned gradient-free updates") {
    const RunConfig cfg = tiny_config(19);
    engine::TrainState stepped(cfg), manual(cfg);

    const auto batch = stepped.scenario.generate(stepped.rng, stepped.step);
    const auto rec = engine::train_step(stepped, batch);
    REQUIRE_FALSE(rec.aborted);

    const auto batch_m = manual.scenario.generate(manual.rng, manual.step);
    ad::Tape t;
    const auto f = engine::forward_pipeline(t, manual.params, manual.registry,
                                            manual.bank_source, manual.bank_target, batch_m,
                                            cfg, manual.rng, true);
    for (const auto& u : f.bank_updates) {
        auto& bank =
            u.domain == graph::Domain::source ? manual.bank_source : manual.bank_target;
        completion::update_memory_bank(bank, u.category, u.nodes, u.hallucinated);
    }
    CHECK(stepped.bank_source.seeds == manual.bank_source.seeds);
    CHECK(stepped.bank_target.seeds == manual.bank_target.seeds);
}

TEST_CASE("finite difference check passes on a small instance") {
    RunConfig cfg = tiny_config(23);
    engine::TrainState state(cfg);
    const auto report = engine::finite_difference_check(state);
    for (const auto& g : report.groups) {
        INFO(g.name, " max_rel_err=", g.max_rel_err);
        CHECK(g.pass);
    }
    CHECK(report.grl_sign_ok);
    CHECK(report.bank_gradient_free);
    CHECK(report.pass);
}

TEST_CASE("the corrupt-gradient hook fails the named group") {
    RunConfig cfg = tiny_config(29);
    cfg.gradcheck_corrupt_group = "cgi.w_q";
    engine::TrainState state(cfg);
    const auto report = engine::finite_difference_check(state);
    CHECK_FALSE(report.pass);
    CHECK(report.first_failed == "cgi.w_q");
}

TEST_CASE("metrics records round-trip losslessly through the JSON line format") {
    engine::MetricsRecord rec;
    rec.step = 41;
    rec.loss_te = 0.12345678901234567;
    rec.loss_fs = 1e-17;
    rec.loss_qc = -3.25;
    rec.loss_mat = 2.0 / 3.0;
    rec.loss_node = 1.5;
    rec.loss_na = 200.125;
    rec.loss_total = 203.9;
    rec.te_excluded_rows = 3;
    rec.halluc_source = 8;
    rec.halluc_target = 0;
    rec.nodes_source = 40;
    rec.nodes_target = 37;
    rec.placeholder_used = true;

    engine::EvalMetrics eval;
    eval.matching_accuracy = 0.9375;
    eval.centroid_gap_mean = 1.0 / 7.0;
    eval.centroid_gap_per_class = {{1, 0.25}, {3, 0.5}};
    eval.discriminator_accuracy = 0.5;
    eval.te_excluded_rows = 2;
    eval.ds_residual_rows = 1e-15;
    eval.ds_residual_cols = 2e-3;
    rec.eval = eval;

    const std::string line = rec.to_json_line();
    const engine::MetricsRecord back = engine::MetricsRecord::from_json_line(line);
    CHECK(back.to_json_line() == line);
    CHECK(back.loss_te == rec.loss_te);
    CHECK(back.loss_fs == rec.loss_fs);
    CHECK(back.eval->centroid_gap_per_class.at(3) == 0.5);

    engine::MetricsRecord no_eval;
    no_eval.step = 2;
    CHECK(engine::MetricsRecord::from_json_line(no_eval.to_json_line()).to_json_line() ==
          no_eval.to_json_line());
}

TEST_CASE("checkpoints restore training bit-exactly") {
    const RunConfig cfg = tiny_config(31);
    engine::TrainState a(cfg);
    for (int s = 0; s < 3; ++s) {
        const auto batch = a.scenario.generate(a.rng, a.step);
        (void)engine::train_step(a, batch);
    }
    const std::string path = "checkpoint_test.bin";
    engine::save_checkpoint(a, path);

    engine::TrainState b(cfg);
    engine::load_checkpoint(b, path);
    CHECK(params_equal(a, b));

    for (int s = 0; s < 2; ++s) {
        const auto batch_a = a.scenario.generate(a.rng, a.step);
        const auto batch_b = b.scenario.generate(b.rng, b.step);
        CHECK(engine::train_step(a, batch_a).to_json_line() ==
              engine::train_step(b, batch_b).to_json_line());
    }
    std::filesystem::remove(path);
}

TEST_CASE("untrained matching accuracy sits at the label-frequency chance level") {
    RunConfig cfg = tiny_config(37);
    cfg.scenario.shift_scale = 0.0;
    cfg.scenario.boxes_per_image = 3;
    engine::TrainState state(cfg);

    int hits = 0, total = 0;
    std::map<int, int> tgt_freq;
    int tgt_total = 0;
    Rng rng(99);
    for (int b = 0; b < 10; ++b) {
        const auto batch = state.scenario.generate(rng, static_cast<std::uint64_t>(b));
        ad::Tape t;
        const auto f = engine::forward_pipeline(t, state.params, state.registry,
                                                state.bank_source, state.bank_target, batch,
                                                cfg, rng, false);
        if (f.skipped) continue;
        const Matrix& aff = t.value(f.affinity_normalized);
        for (Eigen::Index i = 0; i < aff.rows(); ++i) {
            Eigen::Index j = 0;
            aff.row(i).maxCoeff(&j);
            if (f.meta_source.labels[static_cast<std::size_t>(i)] ==
                f.meta_target.labels[static_cast<std::size_t>(j)])
                ++hits;
            ++total;
        }
        for (int l : f.meta_target.labels) {
            ++tgt_freq[l];
            ++tgt_total;
        }
    }
    // chance for an uninformed argmax: sum of matched-label probabilities;
    // approximate source label mix by the target mix (symmetric scenario)
    double chance = 0.0;
    for (const auto& [label, count] : tgt_freq) {
        const double f = static_cast<double>(count) / tgt_total;
        chance += f * f;
    }
    const double accuracy = static_cast<double>(hits) / total;
    const double sigma = std::sqrt(chance * (1.0 - chance) / total);
    CHECK(accuracy > chance - 6.0 * sigma);
    CHECK(accuracy < chance + 6.0 * sigma);
}
