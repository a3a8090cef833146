#include "sigma/engine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sigma/io.hpp"

namespace sigma::engine {

using nlohmann::json;

DiscriminatorParams DiscriminatorParams::init(int dim, Rng& rng, int width) {
    DiscriminatorParams d;
    d.fc1 = Linear::init(dim, width, rng);
    d.ln1 = LayerNorm::init(width);
    d.fc2 = Linear::init(width, width, rng);
    d.ln2 = LayerNorm::init(width);
    d.fc3 = Linear::init(width, width, rng);
    d.ln3 = LayerNorm::init(width);
    d.head = Linear::init(width, 1, rng);
    d.head.w.setZero();  // start at p = 1/2: the adversarial game opens balanced
    return d;
}

ModelParams ModelParams::init(int dim, int classes, Rng& rng) {
    ModelParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(dim));
    p.w_e.resize(dim, dim);
    p.w_gcn.resize(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) {
            p.w_e(i, j) = s * rng.normal();
            p.w_gcn(i, j) = s * rng.normal();
        }
    p.gcn_ln = LayerNorm::init(dim);
    p.v2g = synth::V2GParams::init(dim, 64, dim, rng);
    p.cgi = matching::CgiParams::init(dim, rng);
    p.affinity = matching::AffinityParams::init(dim, dim, 64, rng);
    p.classifier = matching::ClassifierParams::init(dim, 64, classes, rng);
    p.halluc_proj = Linear::init(dim, dim, rng);
    p.disc = DiscriminatorParams::init(dim, rng);
    return p;
}

void ModelParams::register_all(ParamRegistry& reg) {
    reg.add("graph.w_e", &w_e);
    reg.add("graph.w_gcn", &w_gcn);
    reg.add("graph.ln.gain", &gcn_ln.gain);
    reg.add("graph.ln.shift", &gcn_ln.shift);
    reg.add("v2g.fc1.w", &v2g.fc1.w);
    reg.add("v2g.fc1.b", &v2g.fc1.b);
    reg.add("v2g.ln.gain", &v2g.ln.gain);
    reg.add("v2g.ln.shift", &v2g.ln.shift);
    reg.add("v2g.fc2.w", &v2g.fc2.w);
    reg.add("v2g.fc2.b", &v2g.fc2.b);
    reg.add("cgi.w_q", &cgi.w_q);
    reg.add("cgi.w_k", &cgi.w_k);
    reg.add("cgi.w_v", &cgi.w_v);
    reg.add("cgi.w_p", &cgi.w_p);
    reg.add("cgi.ln.gain", &cgi.ln.gain);
    reg.add("cgi.ln.shift", &cgi.ln.shift);
    reg.add("affinity.f_p.w", &affinity.f_p.w);
    reg.add("affinity.f_p.b", &affinity.f_p.b);
    reg.add("affinity.mlp1.w", &affinity.mlp1.w);
    reg.add("affinity.mlp1.b", &affinity.mlp1.b);
    reg.add("affinity.mlp2.w", &affinity.mlp2.w);
    reg.add("affinity.mlp2.b", &affinity.mlp2.b);
    reg.add("classifier.fc1.w", &classifier.fc1.w);
    reg.add("classifier.fc1.b", &classifier.fc1.b);
    reg.add("classifier.fc2.w", &classifier.fc2.w);
    reg.add("classifier.fc2.b", &classifier.fc2.b);
    reg.add("halluc.p.w", &halluc_proj.w);
    reg.add("halluc.p.b", &halluc_proj.b);
    reg.add("disc.fc1.w", &disc.fc1.w);
    reg.add("disc.fc1.b", &disc.fc1.b);
    reg.add("disc.ln1.gain", &disc.ln1.gain);
    reg.add("disc.ln1.shift", &disc.ln1.shift);
    reg.add("disc.fc2.w", &disc.fc2.w);
    reg.add("disc.fc2.b", &disc.fc2.b);
    reg.add("disc.ln2.gain", &disc.ln2.gain);
    reg.add("disc.ln2.shift", &disc.ln2.shift);
    reg.add("disc.fc3.w", &disc.fc3.w);
    reg.add("disc.fc3.b", &disc.fc3.b);
    reg.add("disc.ln3.gain", &disc.ln3.gain);
    reg.add("disc.ln3.shift", &disc.ln3.shift);
    reg.add("disc.head.w", &disc.head.w);
    reg.add("disc.head.b", &disc.head.b);
}

namespace {

ModelVars make_vars(const ParamRegistry& reg) {
    ModelVars v;
    v.w_e = reg.var("graph.w_e");
    v.w_gcn = reg.var("graph.w_gcn");
    v.gcn_ln = {reg.var("graph.ln.gain"), reg.var("graph.ln.shift")};
    v.v2g.fc1 = {reg.var("v2g.fc1.w"), reg.var("v2g.fc1.b")};
    v.v2g.ln = {reg.var("v2g.ln.gain"), reg.var("v2g.ln.shift")};
    v.v2g.fc2 = {reg.var("v2g.fc2.w"), reg.var("v2g.fc2.b")};
    v.cgi.w_q = reg.var("cgi.w_q");
    v.cgi.w_k = reg.var("cgi.w_k");
    v.cgi.w_v = reg.var("cgi.w_v");
    v.cgi.w_p = reg.var("cgi.w_p");
    v.cgi.ln = {reg.var("cgi.ln.gain"), reg.var("cgi.ln.shift")};
    v.affinity.f_p = {reg.var("affinity.f_p.w"), reg.var("affinity.f_p.b")};
    v.affinity.mlp1 = {reg.var("affinity.mlp1.w"), reg.var("affinity.mlp1.b")};
    v.affinity.mlp2 = {reg.var("affinity.mlp2.w"), reg.var("affinity.mlp2.b")};
    v.classifier.fc1 = {reg.var("classifier.fc1.w"), reg.var("classifier.fc1.b")};
    v.classifier.fc2 = {reg.var("classifier.fc2.w"), reg.var("classifier.fc2.b")};
    v.halluc_proj = {reg.var("halluc.p.w"), reg.var("halluc.p.b")};
    v.disc.fc1 = {reg.var("disc.fc1.w"), reg.var("disc.fc1.b")};
    v.disc.ln1 = {reg.var("disc.ln1.gain"), reg.var("disc.ln1.shift")};
    v.disc.fc2 = {reg.var("disc.fc2.w"), reg.var("disc.fc2.b")};
    v.disc.ln2 = {reg.var("disc.ln2.gain"), reg.var("disc.ln2.shift")};
    v.disc.fc3 = {reg.var("disc.fc3.w"), reg.var("disc.fc3.b")};
    v.disc.ln3 = {reg.var("disc.ln3.gain"), reg.var("disc.ln3.shift")};
    v.disc.head = {reg.var("disc.head.w"), reg.var("disc.head.b")};
    return v;
}

std::vector<int> nonhalluc_rows(const std::vector<char>& halluc, int n) {
    std::vector<int> rows;
    for (int i = 0; i < n; ++i)
        if (static_cast<std::size_t>(i) >= halluc.size() || !halluc[static_cast<std::size_t>(i)])
            rows.push_back(i);
    return rows;
}

}  // namespace

ad::Var discriminator_logits(ad::Tape& t, ad::Var nodes, const DiscriminatorVars& disc) {
    ad::Var h = t.relu(apply_layer_norm(t, apply_linear(t, nodes, disc.fc1), disc.ln1));
    h = t.relu(apply_layer_norm(t, apply_linear(t, h, disc.fc2), disc.ln2));
    h = t.relu(apply_layer_norm(t, apply_linear(t, h, disc.fc3), disc.ln3));
    return apply_linear(t, h, disc.head);
}

ad::Var node_alignment_loss(ad::Tape& t, ad::Var src_nodes, const std::vector<char>& src_halluc,
                            ad::Var tgt_nodes, const std::vector<char>& tgt_halluc,
                            const DiscriminatorVars& disc, bool* one_sided) {
    const std::vector<int> src_rows =
        nonhalluc_rows(src_halluc, static_cast<int>(t.value(src_nodes).rows()));
    const std::vector<int> tgt_rows =
        nonhalluc_rows(tgt_halluc, static_cast<int>(t.value(tgt_nodes).rows()));
    if (one_sided) *one_sided = src_rows.empty() || tgt_rows.empty();

    ad::Var loss = t.scalar(0.0);
    if (!src_rows.empty()) {
        ad::Var z = discriminator_logits(
            t, t.grad_reverse(t.select_rows(src_nodes, src_rows)), disc);
        loss = t.add(loss, t.bce_with_logits_sum(
                               z, Matrix::Ones(static_cast<Eigen::Index>(src_rows.size()), 1)));
    }
    if (!tgt_rows.empty()) {
        ad::Var z = discriminator_logits(
            t, t.grad_reverse(t.select_rows(tgt_nodes, tgt_rows)), disc);
        loss = t.add(loss, t.bce_with_logits_sum(
                               z, Matrix::Zero(static_cast<Eigen::Index>(tgt_rows.size()), 1)));
    }
    return loss;
}

ad::Var composite_loss(ad::Tape& t, ad::Var node_loss, ad::Var mat_loss, ad::Var na_loss,
                       const LossWeights& w) {
    if (w.lambda1 < 0.0 || w.lambda2 < 0.0)
        throw shape_error("composite_loss: loss weights must be nonnegative");
    return t.add(t.add(t.scale(node_loss, w.lambda1), t.scale(mat_loss, w.lambda2)), na_loss);
}

TrainState::TrainState(const RunConfig& cfg)
    : config(cfg), scenario(cfg.scenario), rng(cfg.seed) {
    Rng init_rng(cfg.seed ^ 0x1a2b3c4d5e6fULL);
    params = ModelParams::init(cfg.scenario.embed_dim, cfg.scenario.classes, init_rng);
    bank_source =
        completion::MemoryBank::init(cfg.scenario.classes, cfg.scenario.embed_dim, init_rng);
    bank_target =
        completion::MemoryBank::init(cfg.scenario.classes, cfg.scenario.embed_dim, init_rng);
    params.register_all(registry);
}

ForwardResult forward_pipeline(ad::Tape& t, const ModelParams& params, ParamRegistry& registry,
                               const completion::MemoryBank& bank_s,
                               const completion::MemoryBank& bank_t,
                               const synth::ScenarioBatch& batch, const RunConfig& cfg, Rng& rng,
                               bool training, bool input_leaves) {
    (void)params;
    registry.lift(t);
    const ModelVars mv = make_vars(registry);
    const int classes = cfg.scenario.classes;

    ForwardResult out;

    // --- sample the two domains ---
    std::vector<synth::NodeSample> src_samples, tgt_samples;
    for (const synth::SourceImage& img : batch.source)
        src_samples.push_back(synth::sample_source_nodes(img.map, img.boxes,
                                                         cfg.max_nodes_per_map, classes, rng));
    for (const synth::TargetImage& img : batch.target)
        tgt_samples.push_back(synth::sample_target_nodes(
            img.map, img.scores, cfg.max_nodes_per_map, classes, cfg.tau_fg, cfg.tau_bg, rng));

    auto stack = [](const std::vector<synth::NodeSample>& samples, Matrix& feats,
                    std::vector<int>& labels) {
        int total = 0;
        for (const auto& s : samples) total += s.size();
        if (total == 0) return;
        feats.resize(total, samples.front().features.cols());
        int at = 0;
        for (const auto& s : samples) {
            feats.middleRows(at, s.size()) = s.features;
            labels.insert(labels.end(), s.labels.begin(), s.labels.end());
            at += s.size();
        }
    };
    Matrix src_feats, tgt_feats;
    std::vector<int> src_labels, tgt_labels;
    stack(src_samples, src_feats, src_labels);
    stack(tgt_samples, tgt_feats, tgt_labels);

    if (src_labels.empty()) {
        out.skipped = true;
        out.loss_total = t.scalar(0.0);
        return out;
    }

    // --- V2G projection into the graphical space ---
    ad::Var src_raw_feat = input_leaves ? t.leaf(src_feats, true) : t.constant(src_feats);
    out.raw_source = synth::v2g_project(t, src_raw_feat, mv.v2g);
    out.meta_source.labels = src_labels;
    out.meta_source.domain = graph::Domain::source;
    out.meta_source.hallucinated.assign(src_labels.size(), 0);
    out.meta_source.pseudo.assign(src_labels.size(), 0);

    if (tgt_labels.empty()) {
        // no target nodes: the first half of the source nodes stands in,
        // labels retained
        const int k = (static_cast<int>(src_labels.size()) + 1) / 2;
        std::vector<int> rows(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) rows[static_cast<std::size_t>(i)] = i;
        out.raw_target = t.select_rows(out.raw_source, rows);
        tgt_labels.assign(src_labels.begin(), src_labels.begin() + k);
        out.placeholder_used = true;
        out.meta_target.pseudo.assign(tgt_labels.size(), 0);
    } else {
        ad::Var tgt_raw_feat = input_leaves ? t.leaf(tgt_feats, true) : t.constant(tgt_feats);
        out.raw_target = synth::v2g_project(t, tgt_raw_feat, mv.v2g);
        out.meta_target.pseudo.assign(tgt_labels.size(), 1);
    }
    out.meta_target.labels = tgt_labels;
    out.meta_target.domain = graph::Domain::target;
    out.meta_target.hallucinated.assign(tgt_labels.size(), 0);

    // --- node alignment on pre-completion nodes (P1) ---
    out.loss_na = node_alignment_loss(t, out.raw_source, out.meta_source.hallucinated,
                                      out.raw_target, out.meta_target.hallucinated, mv.disc);

    // --- domain-guided node completion ---
    ad::Var v_s = out.raw_source;
    ad::Var v_t = out.raw_target;
    graph::NodeMeta meta_s = out.meta_source;
    graph::NodeMeta meta_t = out.meta_target;
    if (cfg.completion_enabled) {
        const completion::CategoryInventory inv =
            completion::missing_category_sets(src_labels, tgt_labels, classes);
        std::vector<ad::Var> src_parts{v_s};
        for (int cat : inv.missing_source) {
            const int count = completion::hallucination_count(tgt_labels, classes);
            completion::HallucinationBatch h = completion::hallucinate_nodes(
                t, cat, bank_s, out.raw_target, tgt_labels, out.meta_target.hallucinated, count,
                mv.halluc_proj, rng);
            src_parts.push_back(h.nodes);
            for (int i = 0; i < count; ++i) {
                meta_s.labels.push_back(cat);
                meta_s.hallucinated.push_back(1);
                meta_s.pseudo.push_back(0);
            }
            out.halluc_source += count;
        }
        if (src_parts.size() > 1) v_s = t.concat_rows(src_parts);

        std::vector<ad::Var> tgt_parts{v_t};
        for (int cat : inv.missing_target) {
            const int count = completion::hallucination_count(src_labels, classes);
            completion::HallucinationBatch h = completion::hallucinate_nodes(
                t, cat, bank_t, out.raw_source, src_labels, out.meta_source.hallucinated, count,
                mv.halluc_proj, rng);
            tgt_parts.push_back(h.nodes);
            for (int i = 0; i < count; ++i) {
                meta_t.labels.push_back(cat);
                meta_t.hallucinated.push_back(1);
                meta_t.pseudo.push_back(0);
            }
            out.halluc_target += count;
        }
        if (tgt_parts.size() > 1) v_t = t.concat_rows(tgt_parts);
    }

    // --- graphs and single-layer convolution ---
    ad::Var adj_s = graph::build_adjacency(t, v_s, mv.w_e, cfg.edge_drop, rng, training);
    ad::Var adj_t = graph::build_adjacency(t, v_t, mv.w_e, cfg.edge_drop, rng, training);
    ad::Var enh_s = graph::gcn_forward(t, v_s, adj_s, mv.w_gcn, mv.gcn_ln);
    ad::Var enh_t = graph::gcn_forward(t, v_t, adj_t, mv.w_gcn, mv.gcn_ln);

    // --- pending memory-bank updates (gradient-free: detached values) ---
    auto collect_updates = [&](graph::Domain domain, ad::Var enhanced,
                               const graph::NodeMeta& meta) {
        const Matrix& values = t.value(enhanced);
        for (int cat = 1; cat <= classes; ++cat) {
            std::vector<int> rows;
            for (std::size_t i = 0; i < meta.labels.size(); ++i)
                if (meta.labels[i] == cat && !meta.hallucinated[i])
                    rows.push_back(static_cast<int>(i));
            if (rows.empty()) continue;
            ForwardResult::BankUpdate u;
            u.domain = domain;
            u.category = cat;
            u.nodes.resize(static_cast<Eigen::Index>(rows.size()), values.cols());
            for (std::size_t i = 0; i < rows.size(); ++i)
                u.nodes.row(static_cast<Eigen::Index>(i)) = values.row(rows[i]);
            u.hallucinated.assign(rows.size(), 0);
            out.bank_updates.push_back(std::move(u));
        }
    };
    collect_updates(graph::Domain::source, enh_s, meta_s);
    collect_updates(graph::Domain::target, enh_t, meta_t);

    // --- cross graph interaction and the auxiliary node classifier ---
    auto [cgi_s, cgi_t] = matching::cross_graph_interaction(t, enh_s, enh_t, mv.cgi);
    out.cgi_source = cgi_s;
    out.cgi_target = cgi_t;
    std::vector<int> all_labels = meta_s.labels;
    all_labels.insert(all_labels.end(), meta_t.labels.begin(), meta_t.labels.end());
    out.loss_node =
        matching::node_classification_loss(t, t.concat_rows({cgi_s, cgi_t}), all_labels,
                                           mv.classifier);

    // --- semantic-aware affinity, Sinkhorn, matching loss ---
    ad::Var aff_raw = matching::node_affinity(t, cgi_s, cgi_t, mv.affinity);
    ad::Var aff_in = t.value(aff_raw).size() >= 2 ? matching::instance_normalize(t, aff_raw)
                                                  : aff_raw;
    out.affinity_normalized = matching::sinkhorn_normalize(t, aff_in, cfg.sinkhorn_iterations);
    const Matrix targets = matching::build_match_targets(meta_s.labels, meta_t.labels,
                                                         cfg.include_background_matches);
    out.mat = matching::matching_loss(t, out.affinity_normalized, targets, adj_s, adj_t,
                                      cfg.qc_mode);

    out.loss_total = composite_loss(t, out.loss_node, out.mat.total, out.loss_na,
                                    {cfg.lambda1, cfg.lambda2});
    out.meta_source = std::move(meta_s);
    out.meta_target = std::move(meta_t);
    return out;
}

MetricsRecord train_step(TrainState& state, const synth::ScenarioBatch& batch) {
    const Rng rng_backup = state.rng;
    MetricsRecord rec;
    rec.step = state.step;

    ad::Tape t;
    ForwardResult f = forward_pipeline(t, state.params, state.registry, state.bank_source,
                                       state.bank_target, batch, state.config, state.rng,
                                       /*training=*/true);
    if (f.skipped) {
        state.rng = rng_backup;
        rec.aborted = true;
        return rec;
    }

    const double total = t.scalar_value(f.loss_total);
    if (!std::isfinite(total)) {
        state.rng = rng_backup;
        rec.aborted = true;
        return rec;
    }

    rec.loss_total = total;
    rec.loss_node = t.scalar_value(f.loss_node);
    rec.loss_na = t.scalar_value(f.loss_na);
    rec.loss_te = t.scalar_value(f.mat.te);
    rec.loss_fs = t.scalar_value(f.mat.fs);
    rec.loss_qc = t.scalar_value(f.mat.qc);
    rec.loss_mat = t.scalar_value(f.mat.total);
    rec.te_excluded_rows = f.mat.te_excluded_rows;
    rec.halluc_source = f.halluc_source;
    rec.halluc_target = f.halluc_target;
    rec.nodes_source = static_cast<int>(f.meta_source.labels.size());
    rec.nodes_target = static_cast<int>(f.meta_target.labels.size());
    rec.placeholder_used = f.placeholder_used;

    t.backward(f.loss_total);

    const double lr = state.config.learning_rate;
    const double mu = state.config.momentum;
    const double wd = state.config.weight_decay;
    for (ParamSlot& slot : state.registry.slots()) {
        const Matrix& grad = t.grad(slot.var);
        slot.momentum = mu * slot.momentum + grad + wd * (*slot.storage);
        *slot.storage -= lr * slot.momentum;
        if (!all_finite(*slot.storage))
            throw numeric_error("train_step: parameter group " + slot.name +
                                " became non-finite");
    }

    for (const ForwardResult::BankUpdate& u : f.bank_updates) {
        completion::MemoryBank& bank =
            u.domain == graph::Domain::source ? state.bank_source : state.bank_target;
        completion::update_memory_bank(bank, u.category, u.nodes, u.hallucinated);
    }

    ++state.step;
    return rec;
}

EvalMetrics evaluate_metrics(TrainState& state) {
    EvalMetrics m;
    Rng eval_rng(state.config.seed ^ 0x9e3779b97f4a7c15ULL);
    int match_hits = 0, match_total = 0;
    int disc_hits = 0, disc_total = 0;
    std::map<int, std::pair<RowVector, int>> cent_s, cent_t;
    const int dim = state.config.scenario.embed_dim;

    for (int b = 0; b < state.config.eval_batches; ++b) {
        const synth::ScenarioBatch batch = state.scenario.generate(eval_rng, static_cast<std::uint64_t>(b));
        ad::Tape t;
        ForwardResult f = forward_pipeline(t, state.params, state.registry, state.bank_source,
                                           state.bank_target, batch, state.config, eval_rng,
                                           /*training=*/false);
        if (f.skipped) continue;

        // (a) matching accuracy through the Sinkhorn row argmax
        const Matrix& aff = t.value(f.affinity_normalized);
        for (Eigen::Index i = 0; i < aff.rows(); ++i) {
            Eigen::Index j = 0;
            aff.row(i).maxCoeff(&j);
            if (f.meta_source.labels[static_cast<std::size_t>(i)] ==
                f.meta_target.labels[static_cast<std::size_t>(j)])
                ++match_hits;
            ++match_total;
        }

        // (e) doubly-stochastic residual; rectangular columns drift toward
        // Ns/Nt, so the column residual is measured against that value
        const double col_target =
            static_cast<double>(aff.rows()) / static_cast<double>(aff.cols());
        m.ds_residual_rows = std::max(
            m.ds_residual_rows, (aff.rowwise().sum().array() - 1.0).abs().maxCoeff());
        m.ds_residual_cols = std::max(
            m.ds_residual_cols, (aff.colwise().sum().array() - col_target).abs().maxCoeff());

        // (b) per-class centroid distance on post-CGI embeddings; hallucinated
        // nodes are synthetic draws, not part of the real class-conditional
        // feature distribution the adaptation aligns, so they stay out
        auto accumulate = [&](const Matrix& emb, const graph::NodeMeta& meta,
                              std::map<int, std::pair<RowVector, int>>& dest) {
            for (std::size_t i = 0; i < meta.labels.size(); ++i) {
                if (meta.labels[i] < 1 || meta.hallucinated[i]) continue;
                auto it = dest.find(meta.labels[i]);
                if (it == dest.end())
                    it = dest.emplace(meta.labels[i], std::make_pair(RowVector::Zero(dim), 0))
                             .first;
                it->second.first += emb.row(static_cast<Eigen::Index>(i));
                it->second.second += 1;
            }
        };
        accumulate(t.value(f.cgi_source), f.meta_source, cent_s);
        accumulate(t.value(f.cgi_target), f.meta_target, cent_t);

        // (c) discriminator accuracy on held-out, existing nodes
        const ModelVars mv = make_vars(state.registry);
        auto score = [&](ad::Var nodes, const std::vector<char>& halluc, bool is_source) {
            const std::vector<int> rows =
                nonhalluc_rows(halluc, static_cast<int>(t.value(nodes).rows()));
            if (rows.empty()) return;
            ad::Var z = discriminator_logits(t, t.select_rows(nodes, rows), mv.disc);
            const Matrix& zv = t.value(z);
            for (Eigen::Index i = 0; i < zv.rows(); ++i) {
                const bool said_source = zv(i, 0) > 0.0;
                if (said_source == is_source) ++disc_hits;
                ++disc_total;
            }
        };
        score(f.raw_source, f.meta_source.hallucinated, true);
        if (!f.placeholder_used) score(f.raw_target, f.meta_target.hallucinated, false);

        // (d)
        m.te_excluded_rows += f.mat.te_excluded_rows;
    }

    m.matching_accuracy = match_total > 0 ? static_cast<double>(match_hits) / match_total : 0.0;
    m.discriminator_accuracy = disc_total > 0 ? static_cast<double>(disc_hits) / disc_total : 0.0;
    double gap_sum = 0.0;
    int gap_count = 0;
    for (const auto& [cat, acc_s] : cent_s) {
        const auto it = cent_t.find(cat);
        if (it == cent_t.end()) continue;
        const RowVector cs = acc_s.first / acc_s.second;
        const RowVector ct = it->second.first / it->second.second;
        const double gap = (cs - ct).norm();
        m.centroid_gap_per_class[cat] = gap;
        gap_sum += gap;
        ++gap_count;
    }
    m.centroid_gap_mean = gap_count > 0 ? gap_sum / gap_count : 0.0;
    return m;
}

// ---------------------------------------------------------------------------
// gradient checking

namespace {

double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

}  // namespace

GradientCheckReport finite_difference_check(TrainState& state, double h) {
    GradientCheckReport report;
    const RunConfig& cfg = state.config;

    Rng batch_rng = state.rng;
    const synth::ScenarioBatch batch = state.scenario.generate(batch_rng, state.step);
    const Rng fwd_seed = batch_rng;

    auto loss_value = [&]() {
        ad::Tape t;
        Rng r = fwd_seed;
        ForwardResult f = forward_pipeline(t, state.params, state.registry, state.bank_source,
                                           state.bank_target, batch, cfg, r, /*training=*/true);
        if (f.skipped) throw config_error("finite_difference_check: instance has no nodes");
        return t.scalar_value(f.loss_total);
    };

    // analytic pass
    ad::Tape t;
    Rng r = fwd_seed;
    ForwardResult f = forward_pipeline(t, state.params, state.registry, state.bank_source,
                                       state.bank_target, batch, cfg, r, /*training=*/true);
    if (f.skipped) throw config_error("finite_difference_check: instance has no nodes");
    if (static_cast<int>(f.meta_source.labels.size()) > 12 ||
        static_cast<int>(f.meta_target.labels.size()) > 12)
        throw config_error("finite_difference_check: instance exceeds 12 nodes per side");
    t.backward(f.loss_total);

    std::vector<Matrix> analytic;
    for (ParamSlot& slot : state.registry.slots()) analytic.push_back(t.grad(slot.var));

    Rng pick(0xfdc0ffeeULL);
    bool all_pass = true;
    for (std::size_t gi = 0; gi < state.registry.slots().size(); ++gi) {
        ParamSlot& slot = state.registry.slots()[gi];
        GroupCheck gc;
        gc.name = slot.name;
        const Eigen::Index n = slot.storage->size();
        const int probes = std::min<int>(cfg.gradcheck_entries, static_cast<int>(n));
        std::vector<Eigen::Index> idx;
        for (int k = 0; k < probes; ++k)
            idx.push_back(static_cast<Eigen::Index>(
                pick.uniform_index(static_cast<std::uint64_t>(n))));
        for (const Eigen::Index linear : idx) {
            const Eigen::Index i = linear % slot.storage->rows();
            const Eigen::Index j = linear / slot.storage->rows();
            const double saved = (*slot.storage)(i, j);
            (*slot.storage)(i, j) = saved + h;
            const double up = loss_value();
            (*slot.storage)(i, j) = saved - h;
            const double down = loss_value();
            (*slot.storage)(i, j) = saved;
            const double fd = (up - down) / (2.0 * h);
            double a = analytic[gi](i, j);
            if (!cfg.gradcheck_corrupt_group.empty() && slot.name == cfg.gradcheck_corrupt_group)
                a += 0.5;  // test hook: deliberately poisoned gradient
            gc.max_rel_err = std::max(gc.max_rel_err, rel_err(a, fd));
            ++gc.compared;
        }
        gc.pass = gc.max_rel_err < report.threshold;
        if (!gc.pass) {
            all_pass = false;
            if (report.first_failed.empty()) report.first_failed = gc.name;
        }
        report.groups.push_back(std::move(gc));
    }

    // gradient-reversal sign: the analytic embedding-side gradient of L_NA
    // must equal the negated finite-difference gradient
    {
        const int dim = cfg.scenario.embed_dim;
        Rng gen(0x6e6f6465ULL);
        Matrix xs(3, dim), xt(2, dim);
        for (Eigen::Index i = 0; i < xs.rows(); ++i)
            for (int d = 0; d < dim; ++d) xs(i, d) = gen.normal();
        for (Eigen::Index i = 0; i < xt.rows(); ++i)
            for (int d = 0; d < dim; ++d) xt(i, d) = gen.normal();
        const std::vector<char> no_halluc_s(3, 0), no_halluc_t(2, 0);

        auto na_value = [&](const Matrix& a, const Matrix& b) {
            ad::Tape t2;
            state.registry.lift(t2);
            const ModelVars mv = make_vars(state.registry);
            ad::Var va = t2.constant(a), vb = t2.constant(b);
            return t2.scalar_value(
                node_alignment_loss(t2, va, no_halluc_s, vb, no_halluc_t, mv.disc));
        };

        ad::Tape t2;
        state.registry.lift(t2);
        const ModelVars mv = make_vars(state.registry);
        ad::Var vs = t2.leaf(xs, true), vt = t2.leaf(xt, true);
        ad::Var na = node_alignment_loss(t2, vs, no_halluc_s, vt, no_halluc_t, mv.disc);
        t2.backward(na);
        const Matrix ga = t2.grad(vs);

        report.grl_sign_ok = true;
        for (int k = 0; k < std::min(6, dim * 3); ++k) {
            const Eigen::Index i = static_cast<Eigen::Index>(pick.uniform_index(3));
            const Eigen::Index j =
                static_cast<Eigen::Index>(pick.uniform_index(static_cast<std::uint64_t>(dim)));
            Matrix xp = xs, xm = xs;
            xp(i, j) += h;
            xm(i, j) -= h;
            const double fd = (na_value(xp, xt) - na_value(xm, xt)) / (2.0 * h);
            const double err = rel_err(ga(i, j), -fd);
            report.grl_max_rel_err = std::max(report.grl_max_rel_err, err);
            if (err >= report.threshold) report.grl_sign_ok = false;
        }
        if (!report.grl_sign_ok) {
            all_pass = false;
            if (report.first_failed.empty()) report.first_failed = "grl_sign";
        }
    }

    // memory bank: never a tape leaf, so no gradient can reach it
    report.bank_gradient_free = true;

    report.pass = all_pass;
    return report;
}

// ---------------------------------------------------------------------------
// metrics serialization

namespace {

json eval_to_json(const EvalMetrics& m) {
    json per_class = json::object();
    for (const auto& [cat, gap] : m.centroid_gap_per_class)
        per_class[std::to_string(cat)] = gap;
    return json{{"matching_accuracy", m.matching_accuracy},
                {"centroid_gap_mean", m.centroid_gap_mean},
                {"centroid_gap_per_class", per_class},
                {"discriminator_accuracy", m.discriminator_accuracy},
                {"te_excluded_rows", m.te_excluded_rows},
                {"ds_residual_rows", m.ds_residual_rows},
                {"ds_residual_cols", m.ds_residual_cols}};
}

EvalMetrics eval_from_json(const json& j) {
    EvalMetrics m;
    m.matching_accuracy = j.at("matching_accuracy").get<double>();
    m.centroid_gap_mean = j.at("centroid_gap_mean").get<double>();
    for (const auto& [key, value] : j.at("centroid_gap_per_class").items())
        m.centroid_gap_per_class[std::stoi(key)] = value.get<double>();
    m.discriminator_accuracy = j.at("discriminator_accuracy").get<double>();
    m.te_excluded_rows = j.at("te_excluded_rows").get<int>();
    m.ds_residual_rows = j.at("ds_residual_rows").get<double>();
    m.ds_residual_cols = j.at("ds_residual_cols").get<double>();
    return m;
}

}  // namespace

std::string MetricsRecord::to_json_line() const {
    json j{{"step", step},
           {"loss",
            {{"te", loss_te},
             {"fs", loss_fs},
             {"qc", loss_qc},
             {"mat", loss_mat},
             {"node", loss_node},
             {"na", loss_na},
             {"total", loss_total}}},
           {"te_excluded_rows", te_excluded_rows},
           {"halluc", {{"source", halluc_source}, {"target", halluc_target}}},
           {"nodes", {{"source", nodes_source}, {"target", nodes_target}}},
           {"placeholder_used", placeholder_used},
           {"aborted", aborted}};
    j["eval"] = eval.has_value() ? eval_to_json(*eval) : json(nullptr);
    return j.dump();
}

MetricsRecord MetricsRecord::from_json_line(const std::string& line) {
    const json j = json::parse(line);
    MetricsRecord r;
    r.step = j.at("step").get<std::uint64_t>();
    const json& l = j.at("loss");
    r.loss_te = l.at("te").get<double>();
    r.loss_fs = l.at("fs").get<double>();
    r.loss_qc = l.at("qc").get<double>();
    r.loss_mat = l.at("mat").get<double>();
    r.loss_node = l.at("node").get<double>();
    r.loss_na = l.at("na").get<double>();
    r.loss_total = l.at("total").get<double>();
    r.te_excluded_rows = j.at("te_excluded_rows").get<int>();
    r.halluc_source = j.at("halluc").at("source").get<int>();
    r.halluc_target = j.at("halluc").at("target").get<int>();
    r.nodes_source = j.at("nodes").at("source").get<int>();
    r.nodes_target = j.at("nodes").at("target").get<int>();
    r.placeholder_used = j.at("placeholder_used").get<bool>();
    r.aborted = j.at("aborted").get<bool>();
    if (!j.at("eval").is_null()) r.eval = eval_from_json(j.at("eval"));
    return r;
}

std::string GradientCheckReport::to_json() const {
    json groups_json = json::array();
    for (const GroupCheck& g : groups)
        groups_json.push_back(json{{"name", g.name},
                                   {"max_rel_err", g.max_rel_err},
                                   {"compared", g.compared},
                                   {"pass", g.pass}});
    return json{{"threshold", threshold},
                {"groups", groups_json},
                {"grl_sign_ok", grl_sign_ok},
                {"grl_max_rel_err", grl_max_rel_err},
                {"bank_gradient_free", bank_gradient_free},
                {"pass", pass},
                {"first_failed", first_failed}}
        .dump(2);
}

// ---------------------------------------------------------------------------
// checkpointing

void save_checkpoint(const TrainState& state, const std::string& path) {
    io::TensorArchive a;
    Matrix version(1, 1);
    version(0, 0) = 1.0;
    a.put("meta/version", version);
    Matrix step(1, 1);
    step(0, 0) = static_cast<double>(state.step);
    a.put("meta/step", step);

    const std::string rng_text = state.rng.serialize();
    Matrix rng_bytes(1, static_cast<Eigen::Index>(rng_text.size()));
    for (std::size_t i = 0; i < rng_text.size(); ++i)
        rng_bytes(0, static_cast<Eigen::Index>(i)) =
            static_cast<double>(static_cast<unsigned char>(rng_text[i]));
    a.put("meta/rng", rng_bytes);

    for (const ParamSlot& slot : state.registry.slots()) {
        a.put("param/" + slot.name, *slot.storage);
        a.put("momentum/" + slot.name, slot.momentum);
    }
    a.put("bank/source", state.bank_source.seeds);
    a.put("bank/target", state.bank_target.seeds);
    Matrix init_s(1, static_cast<Eigen::Index>(state.bank_source.initialized.size()));
    Matrix init_t(1, static_cast<Eigen::Index>(state.bank_target.initialized.size()));
    for (std::size_t i = 0; i < state.bank_source.initialized.size(); ++i)
        init_s(0, static_cast<Eigen::Index>(i)) = state.bank_source.initialized[i] ? 1.0 : 0.0;
    for (std::size_t i = 0; i < state.bank_target.initialized.size(); ++i)
        init_t(0, static_cast<Eigen::Index>(i)) = state.bank_target.initialized[i] ? 1.0 : 0.0;
    a.put("bank/source_initialized", init_s);
    a.put("bank/target_initialized", init_t);
    a.save(path);
}

void load_checkpoint(TrainState& state, const std::string& path) {
    const io::TensorArchive a = io::TensorArchive::load(path);
    if (a.get("meta/version")(0, 0) != 1.0)
        throw std::runtime_error("checkpoint: unsupported version");
    state.step = static_cast<std::uint64_t>(a.get("meta/step")(0, 0));

    const Matrix& rng_bytes = a.get("meta/rng");
    std::string rng_text(static_cast<std::size_t>(rng_bytes.cols()), '\0');
    for (Eigen::Index i = 0; i < rng_bytes.cols(); ++i)
        rng_text[static_cast<std::size_t>(i)] =
            static_cast<char>(static_cast<unsigned char>(rng_bytes(0, i)));
    state.rng.deserialize(rng_text);

    for (ParamSlot& slot : state.registry.slots()) {
        const Matrix& p = a.get("param/" + slot.name);
        if (p.rows() != slot.storage->rows() || p.cols() != slot.storage->cols())
            throw shape_error("checkpoint: shape mismatch for " + slot.name);
        *slot.storage = p;
        slot.momentum = a.get("momentum/" + slot.name);
    }
    state.bank_source.seeds = a.get("bank/source");
    state.bank_target.seeds = a.get("bank/target");
    const Matrix& init_s = a.get("bank/source_initialized");
    const Matrix& init_t = a.get("bank/target_initialized");
    state.bank_source.initialized.assign(static_cast<std::size_t>(init_s.cols()), 0);
    state.bank_target.initialized.assign(static_cast<std::size_t>(init_t.cols()), 0);
    for (Eigen::Index i = 0; i < init_s.cols(); ++i)
        state.bank_source.initialized[static_cast<std::size_t>(i)] = init_s(0, i) != 0.0;
    for (Eigen::Index i = 0; i < init_t.cols(); ++i)
        state.bank_target.initialized[static_cast<std::size_t>(i)] = init_t(0, i) != 0.0;
}

}  // namespace sigma::engine
