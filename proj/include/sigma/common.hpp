#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace sigma {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Shape/dimension violations (mismatched operands, invalid sizes).
struct shape_error : std::invalid_argument {
    explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

/// Non-finite values where finite input is contractual.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid run configuration (unknown key, bad value, impossible scenario).
struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Reads SIGMA_MATCH_THREADS (0 = auto) and applies it as the Eigen thread cap.
/// The engine itself is sequential per step; this caps any library parallelism.
int configured_thread_cap();
void apply_thread_cap();

}  // namespace sigma
