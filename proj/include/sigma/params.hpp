#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sigma/ad.hpp"
#include "sigma/common.hpp"
#include "sigma/rng.hpp"

namespace sigma {

/// Fully-connected map: y = x * w + b. Weights are (in x out), bias 1 x out.
struct Linear {
    Matrix w;
    Matrix b;  // 1 x out; empty when the map has no bias (pure matrix product)

    static Linear init(int in, int out, Rng& rng, bool bias = true) {
        Linear l;
        l.w.resize(in, out);
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        for (int i = 0; i < in; ++i)
            for (int j = 0; j < out; ++j) l.w(i, j) = s * rng.normal();
        if (bias) l.b = Matrix::Zero(1, out);
        return l;
    }
    bool has_bias() const { return b.size() > 0; }
};

/// Layer-norm gain/shift over a D-wide feature axis.
struct LayerNorm {
    Matrix gain;   // 1 x D
    Matrix shift;  // 1 x D

    static LayerNorm init(int d) {
        LayerNorm ln;
        ln.gain = Matrix::Ones(1, d);
        ln.shift = Matrix::Zero(1, d);
        return ln;
    }
};

/// Tape handles for a lifted Linear.
struct LinearVars {
    ad::Var w;
    ad::Var b;  // invalid when no bias
};

/// Tape handles for a lifted LayerNorm.
struct LayerNormVars {
    ad::Var gain;
    ad::Var shift;
};

/// One learnable tensor: its storage, tape handle for the current step, and
/// SGD momentum buffer. Collected into a flat registry for the optimizer and
/// the finite-difference checker.
struct ParamSlot {
    std::string name;
    Matrix* storage = nullptr;
    Matrix momentum;
    ad::Var var;
};

class ParamRegistry {
public:
    void add(const std::string& name, Matrix* storage) {
        ParamSlot s;
        s.name = name;
        s.storage = storage;
        s.momentum = Matrix::Zero(storage->rows(), storage->cols());
        slots_.push_back(std::move(s));
    }

    std::vector<ParamSlot>& slots() { return slots_; }
    const std::vector<ParamSlot>& slots() const { return slots_; }

    /// Creates a fresh leaf per parameter on the given tape.
    void lift(ad::Tape& tape) {
        for (ParamSlot& s : slots_) s.var = tape.leaf(*s.storage, true);
    }

    ad::Var var(const std::string& name) const {
        for (const ParamSlot& s : slots_)
            if (s.name == name) return s.var;
        throw shape_error("unknown parameter group: " + name);
    }

private:
    std::vector<ParamSlot> slots_;
};

/// y = x*w (+ b if present)
inline ad::Var apply_linear(ad::Tape& t, ad::Var x, const LinearVars& l) {
    ad::Var y = t.matmul(x, l.w);
    if (l.b.valid()) y = t.add_row_broadcast(y, l.b);
    return y;
}

inline ad::Var apply_layer_norm(ad::Tape& t, ad::Var x, const LayerNormVars& ln,
                                double eps = 1e-5) {
    return t.layer_norm_rows(x, ln.gain, ln.shift, eps);
}

}  // namespace sigma
