#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "sigma/common.hpp"

namespace sigma::ad {

/// Handle into a Tape. Cheap to copy; only meaningful with its owning tape.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Eager reverse-mode tape over dense matrices. Every operation computes its
/// value immediately and records a closure that accumulates exact adjoints.
/// Scalars are 1x1 matrices. One tape per loss evaluation; not thread-shared.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix value, bool requires_grad = true);
    Var constant(Matrix value);
    Var scalar(double value);  // 1x1 constant

    const Matrix& value(Var v) const;
    double scalar_value(Var v) const;  // value of a 1x1 var
    const Matrix& grad(Var v);         // zero-sized until touched; allocates on demand
    bool requires_grad(Var v) const;

    /// Seeds d(root)/d(root)=1 and sweeps the tape in reverse. root must be 1x1.
    void backward(Var root);
    void zero_grad();
    std::size_t size() const { return nodes_.size(); }

    // elementwise / scalar
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var neg(Var a);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, double c);
    Var mul_mask(Var a, const Matrix& mask);
    Var relu(Var a);
    Var sigmoid(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);  // adjoint defined 0 where the input is exactly 0
    Var square(Var a);

    // linear algebra
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add_row_broadcast(Var a, Var row);  // NxD + 1xD

    // reductions and broadcasts
    Var row_sums(Var a);  // Nx1
    Var col_sums(Var a);  // 1xM
    Var div_row_broadcast(Var a, Var r);  // a(i,j) / r(i,0)
    Var div_col_broadcast(Var a, Var c);  // a(i,j) / c(0,j)
    Var sum(Var a);
    Var mean(Var a);
    Var sub_scalar(Var a, Var s);
    Var div_scalar(Var a, Var s);

    // normalization
    Var row_softmax(Var a);
    Var layer_norm_rows(Var x, Var gain, Var shift, double eps = 1e-5);

    // structure
    Var select_rows(Var a, std::vector<int> idx);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(Var a, Var b);
    Var reshape(Var a, int rows, int cols);  // row-major reinterpretation
    Var gather(Var a, std::vector<std::pair<int, int>> entries);  // kx1

    // gradient plumbing
    Var grad_reverse(Var a);  // identity forward, negated adjoint
    Var detach(Var a);

    // fused losses
    Var bce_with_logits_sum(Var logits, const Matrix& targets);
    Var softmax_ce_mean(Var logits, const std::vector<int>& labels);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool grad_touched = false;
        std::function<void()> backfn;
    };

    // deque: references returned by value() stay valid as the tape grows
    std::deque<Node> nodes_;

    Var push(Matrix value, bool requires_grad, std::function<void()> backfn);
    Matrix& g(std::int32_t id);  // accumulation target, allocated on first touch
    const Matrix& val(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool req(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
    void check(Var v, const char* where) const;
};

}  // namespace sigma::ad
