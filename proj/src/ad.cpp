#include "sigma/ad.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sigma::ad {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw shape_error(msg);
}

}  // namespace

void Tape::check(Var v, const char* where) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
        throw shape_error(std::string(where) + ": invalid tape handle");
}

Var Tape::push(Matrix value, bool requires_grad, std::function<void()> backfn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backfn = std::move(backfn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Matrix& Tape::g(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_touched) {
        n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
        n.grad_touched = true;
    }
    return n.grad;
}

Var Tape::leaf(Matrix value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::scalar(double value) {
    Matrix m(1, 1);
    m(0, 0) = value;
    return constant(std::move(m));
}

const Matrix& Tape::value(Var v) const {
    check(v, "value");
    return nodes_[static_cast<std::size_t>(v.id)].value;
}

double Tape::scalar_value(Var v) const {
    const Matrix& m = value(v);
    require(m.rows() == 1 && m.cols() == 1, "scalar_value: var is not 1x1");
    return m(0, 0);
}

const Matrix& Tape::grad(Var v) {
    check(v, "grad");
    return g(v.id);
}

bool Tape::requires_grad(Var v) const {
    check(v, "requires_grad");
    return req(v);
}

void Tape::backward(Var root) {
    check(root, "backward");
    const Matrix& rv = val(root.id);
    require(rv.rows() == 1 && rv.cols() == 1, "backward: root must be a 1x1 scalar");
    g(root.id)(0, 0) += 1.0;
    for (std::int32_t i = root.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad_touched && n.backfn) n.backfn();
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) {
        n.grad.resize(0, 0);
        n.grad_touched = false;
    }
}

// ---------------------------------------------------------------------------
// elementwise / scalar

Var Tape::add(Var a, Var b) {
    check(a, "add"); check(b, "add");
    require(val(a.id).rows() == val(b.id).rows() && val(a.id).cols() == val(b.id).cols(),
            "add: operand shapes differ");
    Matrix out = val(a.id) + val(b.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(b), [this, a, b, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go;
        if (req(b)) g(b.id) += go;
    });
}

Var Tape::sub(Var a, Var b) {
    check(a, "sub"); check(b, "sub");
    require(val(a.id).rows() == val(b.id).rows() && val(a.id).cols() == val(b.id).cols(),
            "sub: operand shapes differ");
    Matrix out = val(a.id) - val(b.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(b), [this, a, b, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go;
        if (req(b)) g(b.id) -= go;
    });
}

Var Tape::neg(Var a) { return scale(a, -1.0); }

Var Tape::mul(Var a, Var b) {
    check(a, "mul"); check(b, "mul");
    require(val(a.id).rows() == val(b.id).rows() && val(a.id).cols() == val(b.id).cols(),
            "mul: operand shapes differ");
    Matrix out = val(a.id).cwiseProduct(val(b.id));
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(b), [this, a, b, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go.cwiseProduct(val(b.id));
        if (req(b)) g(b.id) += go.cwiseProduct(val(a.id));
    });
}

Var Tape::scale(Var a, double s) {
    check(a, "scale");
    Matrix out = s * val(a.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, s, r]() {
        if (req(a)) g(a.id) += s * g(r.id);
    });
}

Var Tape::add_const(Var a, double c) {
    check(a, "add_const");
    Matrix out = val(a.id).array() + c;
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) += g(r.id);
    });
}

Var Tape::mul_mask(Var a, const Matrix& mask) {
    check(a, "mul_mask");
    require(val(a.id).rows() == mask.rows() && val(a.id).cols() == mask.cols(),
            "mul_mask: mask shape differs");
    Matrix out = val(a.id).cwiseProduct(mask);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, mask, r]() {
        if (req(a)) g(a.id) += g(r.id).cwiseProduct(mask);
    });
}

Var Tape::relu(Var a) {
    check(a, "relu");
    Matrix out = val(a.id).cwiseMax(0.0);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& x = val(a.id);
        g(a.id) += g(r.id).cwiseProduct((x.array() > 0.0).cast<double>().matrix());
    });
}

Var Tape::sigmoid(Var a) {
    check(a, "sigmoid");
    Matrix out = (1.0 / (1.0 + (-val(a.id).array()).exp())).matrix();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& y = val(r.id);
        g(a.id) += g(r.id).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
    });
}

Var Tape::exp(Var a) {
    check(a, "exp");
    Matrix out = val(a.id).array().exp().matrix();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) += g(r.id).cwiseProduct(val(r.id));
    });
}

Var Tape::log(Var a) {
    check(a, "log");
    Matrix out = val(a.id).array().log().matrix();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) += g(r.id).cwiseQuotient(val(a.id));
    });
}

Var Tape::sqrt(Var a) {
    check(a, "sqrt");
    Matrix out = val(a.id).array().sqrt().matrix();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& x = val(a.id);
        const Matrix& y = val(r.id);
        const Matrix& go = g(r.id);
        Matrix& ga = g(a.id);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.cols(); ++j)
                if (x(i, j) != 0.0) ga(i, j) += go(i, j) * 0.5 / y(i, j);
    });
}

Var Tape::square(Var a) {
    check(a, "square");
    Matrix out = val(a.id).array().square().matrix();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) += 2.0 * g(r.id).cwiseProduct(val(a.id));
    });
}

// ---------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b) {
    check(a, "matmul"); check(b, "matmul");
    require(val(a.id).cols() == val(b.id).rows(), "matmul: inner dimensions differ");
    Matrix out = val(a.id) * val(b.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(b), [this, a, b, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go * val(b.id).transpose();
        if (req(b)) g(b.id) += val(a.id).transpose() * go;
    });
}

Var Tape::transpose(Var a) {
    check(a, "transpose");
    Matrix out = val(a.id).transpose();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) += g(r.id).transpose();
    });
}

Var Tape::add_row_broadcast(Var a, Var row) {
    check(a, "add_row_broadcast"); check(row, "add_row_broadcast");
    require(val(row.id).rows() == 1 && val(row.id).cols() == val(a.id).cols(),
            "add_row_broadcast: row must be 1xD matching a's columns");
    Matrix out = val(a.id).rowwise() + val(row.id).row(0);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(row), [this, a, row, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go;
        if (req(row)) g(row.id) += go.colwise().sum();
    });
}

// ---------------------------------------------------------------------------
// reductions and broadcasts

Var Tape::row_sums(Var a) {
    check(a, "row_sums");
    Matrix out = val(a.id).rowwise().sum();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& go = g(r.id);  // Nx1
        g(a.id).colwise() += go.col(0);
    });
}

Var Tape::col_sums(Var a) {
    check(a, "col_sums");
    Matrix out = val(a.id).colwise().sum();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& go = g(r.id);  // 1xM
        g(a.id).rowwise() += go.row(0);
    });
}

Var Tape::div_row_broadcast(Var a, Var rden) {
    check(a, "div_row_broadcast"); check(rden, "div_row_broadcast");
    require(val(rden.id).cols() == 1 && val(rden.id).rows() == val(a.id).rows(),
            "div_row_broadcast: denominator must be Nx1");
    Matrix out = val(a.id).array().colwise() / val(rden.id).col(0).array();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(rden), [this, a, rden, r]() {
        const Matrix& go = g(r.id);
        const Matrix& y = val(r.id);
        const Matrix& d = val(rden.id);
        if (req(a)) g(a.id) += (go.array().colwise() / d.col(0).array()).matrix();
        if (req(rden))
            g(rden.id).col(0) -=
                (go.cwiseProduct(y).rowwise().sum().array() / d.col(0).array()).matrix();
    });
}

Var Tape::div_col_broadcast(Var a, Var cden) {
    check(a, "div_col_broadcast"); check(cden, "div_col_broadcast");
    require(val(cden.id).rows() == 1 && val(cden.id).cols() == val(a.id).cols(),
            "div_col_broadcast: denominator must be 1xM");
    Matrix out = val(a.id).array().rowwise() / val(cden.id).row(0).array();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(cden), [this, a, cden, r]() {
        const Matrix& go = g(r.id);
        const Matrix& y = val(r.id);
        const Matrix& d = val(cden.id);
        if (req(a)) g(a.id) += (go.array().rowwise() / d.row(0).array()).matrix();
        if (req(cden))
            g(cden.id).row(0) -=
                (go.cwiseProduct(y).colwise().sum().array() / d.row(0).array()).matrix();
    });
}

Var Tape::sum(Var a) {
    check(a, "sum");
    Matrix out(1, 1);
    out(0, 0) = val(a.id).sum();
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id).array() += g(r.id)(0, 0);
    });
}

Var Tape::mean(Var a) {
    check(a, "mean");
    const double n = static_cast<double>(val(a.id).size());
    require(n > 0, "mean: empty matrix");
    Matrix out(1, 1);
    out(0, 0) = val(a.id).sum() / n;
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, n, r]() {
        if (req(a)) g(a.id).array() += g(r.id)(0, 0) / n;
    });
}

Var Tape::sub_scalar(Var a, Var s) {
    check(a, "sub_scalar"); check(s, "sub_scalar");
    require(val(s.id).rows() == 1 && val(s.id).cols() == 1, "sub_scalar: s must be 1x1");
    Matrix out = val(a.id).array() - val(s.id)(0, 0);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(s), [this, a, s, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go;
        if (req(s)) g(s.id)(0, 0) -= go.sum();
    });
}

Var Tape::div_scalar(Var a, Var s) {
    check(a, "div_scalar"); check(s, "div_scalar");
    require(val(s.id).rows() == 1 && val(s.id).cols() == 1, "div_scalar: s must be 1x1");
    const double sv = val(s.id)(0, 0);
    Matrix out = val(a.id) / sv;
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(s), [this, a, s, r]() {
        const Matrix& go = g(r.id);
        const double d = val(s.id)(0, 0);
        if (req(a)) g(a.id) += go / d;
        if (req(s)) g(s.id)(0, 0) -= go.cwiseProduct(val(r.id)).sum() / d;
    });
}

// ---------------------------------------------------------------------------
// normalization

Var Tape::row_softmax(Var a) {
    check(a, "row_softmax");
    const Matrix& x = val(a.id);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        Eigen::ArrayXd e = (x.row(i).transpose().array() - m).exp();
        out.row(i) = (e / e.sum()).matrix().transpose();
    }
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (!req(a)) return;
        const Matrix& y = val(r.id);
        const Matrix& go = g(r.id);
        Matrix& ga = g(a.id);
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            const double dot = go.row(i).cwiseProduct(y.row(i)).sum();
            ga.row(i) += y.row(i).cwiseProduct((go.row(i).array() - dot).matrix());
        }
    });
}

Var Tape::layer_norm_rows(Var x, Var gain, Var shift, double eps) {
    check(x, "layer_norm_rows"); check(gain, "layer_norm_rows"); check(shift, "layer_norm_rows");
    const Matrix& xv = val(x.id);
    const Eigen::Index d = xv.cols();
    require(d >= 2, "layer_norm_rows: feature dimension must be >= 2");
    require(val(gain.id).rows() == 1 && val(gain.id).cols() == d, "layer_norm_rows: gain must be 1xD");
    require(val(shift.id).rows() == 1 && val(shift.id).cols() == d, "layer_norm_rows: shift must be 1xD");

    Matrix xhat(xv.rows(), d);
    Vector inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double m = xv.row(i).mean();
        const double var = (xv.row(i).array() - m).square().sum() / static_cast<double>(d);
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = ((xv.row(i).array() - m) * inv_std(i)).matrix();
    }
    Matrix out = (xhat.array().rowwise() * val(gain.id).row(0).array()).matrix();
    out.rowwise() += val(shift.id).row(0);

    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(x) || req(gain) || req(shift),
                [this, x, gain, shift, r, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
        const Matrix& go = g(r.id);
        const Eigen::Index n = go.rows(), d = go.cols();
        if (req(shift)) g(shift.id) += go.colwise().sum();
        if (req(gain)) g(gain.id) += go.cwiseProduct(xhat).colwise().sum();
        if (req(x)) {
            Matrix& gx = g(x.id);
            const auto& gv = val(gain.id);
            for (Eigen::Index i = 0; i < n; ++i) {
                Eigen::RowVectorXd dxhat = go.row(i).cwiseProduct(gv.row(0));
                const double mean_dxhat = dxhat.mean();
                const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).mean();
                gx.row(i) += inv_std(i) *
                             (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat)
                                 .matrix();
            }
            (void)d;
        }
    });
}

// ---------------------------------------------------------------------------
// structure

Var Tape::select_rows(Var a, std::vector<int> idx) {
    check(a, "select_rows");
    const Matrix& x = val(a.id);
    Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        require(idx[k] >= 0 && idx[k] < x.rows(), "select_rows: index out of range");
        out.row(static_cast<Eigen::Index>(k)) = x.row(idx[k]);
    }
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r, idx = std::move(idx)]() {
        if (!req(a)) return;
        const Matrix& go = g(r.id);
        Matrix& ga = g(a.id);
        for (std::size_t k = 0; k < idx.size(); ++k)
            ga.row(idx[k]) += go.row(static_cast<Eigen::Index>(k));
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts[0].id).cols();
    bool any_req = false;
    for (Var p : parts) {
        check(p, "concat_rows");
        require(val(p.id).cols() == cols, "concat_rows: column counts differ");
        rows += val(p.id).rows();
        any_req = any_req || req(p);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
        out.middleRows(at, val(p.id).rows()) = val(p.id);
        at += val(p.id).rows();
    }
    Var r{static_cast<std::int32_t>(nodes_.size())};
    std::vector<Var> ps = parts;
    return push(std::move(out), any_req, [this, r, ps = std::move(ps)]() {
        const Matrix& go = g(r.id);
        Eigen::Index at = 0;
        for (Var p : ps) {
            const Eigen::Index n = val(p.id).rows();
            if (req(p)) g(p.id) += go.middleRows(at, n);
            at += n;
        }
    });
}

Var Tape::concat_cols(Var a, Var b) {
    check(a, "concat_cols"); check(b, "concat_cols");
    require(val(a.id).rows() == val(b.id).rows(), "concat_cols: row counts differ");
    Matrix out(val(a.id).rows(), val(a.id).cols() + val(b.id).cols());
    out.leftCols(val(a.id).cols()) = val(a.id);
    out.rightCols(val(b.id).cols()) = val(b.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a) || req(b), [this, a, b, r]() {
        const Matrix& go = g(r.id);
        if (req(a)) g(a.id) += go.leftCols(val(a.id).cols());
        if (req(b)) g(b.id) += go.rightCols(val(b.id).cols());
    });
}

Var Tape::reshape(Var a, int rows, int cols) {
    check(a, "reshape");
    const Matrix& x = val(a.id);
    require(static_cast<Eigen::Index>(rows) * cols == x.size(), "reshape: element count differs");
    Matrix out(rows, cols);
    // row-major reinterpretation independent of Eigen's storage order
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j, ++k)
            out(k / cols, k % cols) = x(i, j);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r, cols]() {
        if (!req(a)) return;
        const Matrix& go = g(r.id);
        Matrix& ga = g(a.id);
        Eigen::Index k = 0;
        for (Eigen::Index i = 0; i < ga.rows(); ++i)
            for (Eigen::Index j = 0; j < ga.cols(); ++j, ++k)
                ga(i, j) += go(k / cols, k % cols);
    });
}

Var Tape::gather(Var a, std::vector<std::pair<int, int>> entries) {
    check(a, "gather");
    const Matrix& x = val(a.id);
    Matrix out(static_cast<Eigen::Index>(entries.size()), 1);
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto [i, j] = entries[k];
        require(i >= 0 && i < x.rows() && j >= 0 && j < x.cols(), "gather: index out of range");
        out(static_cast<Eigen::Index>(k), 0) = x(i, j);
    }
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r, entries = std::move(entries)]() {
        if (!req(a)) return;
        const Matrix& go = g(r.id);
        Matrix& ga = g(a.id);
        for (std::size_t k = 0; k < entries.size(); ++k)
            ga(entries[k].first, entries[k].second) += go(static_cast<Eigen::Index>(k), 0);
    });
}

// ---------------------------------------------------------------------------
// gradient plumbing

Var Tape::grad_reverse(Var a) {
    check(a, "grad_reverse");
    Matrix out = val(a.id);
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(a), [this, a, r]() {
        if (req(a)) g(a.id) -= g(r.id);
    });
}

Var Tape::detach(Var a) {
    check(a, "detach");
    return constant(val(a.id));
}

// ---------------------------------------------------------------------------
// fused losses

Var Tape::bce_with_logits_sum(Var logits, const Matrix& targets) {
    check(logits, "bce_with_logits_sum");
    const Matrix& z = val(logits.id);
    require(z.rows() == targets.rows() && z.cols() == targets.cols(),
            "bce_with_logits_sum: target shape differs");
    // sum_ij [ max(z,0) - z*y + log(1 + exp(-|z|)) ]
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            const double zz = z(i, j);
            total += std::max(zz, 0.0) - zz * targets(i, j) + std::log1p(std::exp(-std::abs(zz)));
        }
    Matrix out(1, 1);
    out(0, 0) = total;
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(logits), [this, logits, targets, r]() {
        if (!req(logits)) return;
        const double go = g(r.id)(0, 0);
        const Matrix& z = val(logits.id);
        Matrix sig = (1.0 / (1.0 + (-z.array()).exp())).matrix();
        g(logits.id) += go * (sig - targets);
    });
}

Var Tape::softmax_ce_mean(Var logits, const std::vector<int>& labels) {
    check(logits, "softmax_ce_mean");
    const Matrix& z = val(logits.id);
    require(static_cast<std::size_t>(z.rows()) == labels.size(),
            "softmax_ce_mean: one label per row required");
    const double n = static_cast<double>(z.rows());
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        require(labels[static_cast<std::size_t>(i)] >= 0 &&
                labels[static_cast<std::size_t>(i)] < z.cols(),
                "softmax_ce_mean: label out of range");
        const double m = z.row(i).maxCoeff();
        const double lse = m + std::log((z.row(i).array() - m).exp().sum());
        total += lse - z(i, labels[static_cast<std::size_t>(i)]);
    }
    Matrix out(1, 1);
    out(0, 0) = total / n;
    Var r{static_cast<std::int32_t>(nodes_.size())};
    return push(std::move(out), req(logits), [this, logits, labels, n, r]() {
        if (!req(logits)) return;
        const double go = g(r.id)(0, 0);
        const Matrix& z = val(logits.id);
        Matrix& gz = g(logits.id);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const double m = z.row(i).maxCoeff();
            Eigen::ArrayXd e = (z.row(i).transpose().array() - m).exp();
            Eigen::VectorXd p = (e / e.sum()).matrix();
            gz.row(i) += (go / n) * p.transpose();
            gz(i, labels[static_cast<std::size_t>(i)]) -= go / n;
        }
    });
}

}  // namespace sigma::ad
