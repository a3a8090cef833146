#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "sigma/common.hpp"

namespace sigma::io {

/// Binary tensor record: u64 rank, then rank u64 dims, then the payload as
/// row-major float64. Matrices are rank-2 (rows, cols).
void write_tensor(std::ostream& os, const Matrix& m);
Matrix read_tensor(std::istream& is);

void write_tensor_file(const std::string& path, const Matrix& m);
Matrix read_tensor_file(const std::string& path);

/// Named collection of tensors with a versioned header, used for checkpoints
/// and scenario exports. Layout: magic "SGT1", u64 record count, then per
/// record a u64 name length, the name bytes, and one tensor record.
struct NamedTensor {
    std::string name;
    Matrix tensor;
};

class TensorArchive {
public:
    void put(const std::string& name, Matrix m) { records_.push_back({name, std::move(m)}); }
    const Matrix& get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<NamedTensor>& records() const { return records_; }

    void save(const std::string& path) const;
    static TensorArchive load(const std::string& path);

private:
    std::vector<NamedTensor> records_;
};

}  // namespace sigma::io
