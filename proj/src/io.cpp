#include "sigma/io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sigma::io {

namespace {

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("tensor container: truncated header");
    return v;
}

constexpr char kMagic[4] = {'S', 'G', 'T', '1'};

}  // namespace

void write_tensor(std::ostream& os, const Matrix& m) {
    write_u64(os, 2);
    write_u64(os, static_cast<std::uint64_t>(m.rows()));
    write_u64(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            os.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
}

Matrix read_tensor(std::istream& is) {
    const std::uint64_t rank = read_u64(is);
    if (rank != 2) throw std::runtime_error("tensor container: only rank-2 records supported");
    const auto rows = static_cast<Eigen::Index>(read_u64(is));
    const auto cols = static_cast<Eigen::Index>(read_u64(is));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            double v = 0.0;
            is.read(reinterpret_cast<char*>(&v), sizeof(v));
            if (!is) throw std::runtime_error("tensor container: truncated payload");
            m(i, j) = v;
        }
    return m;
}

void write_tensor_file(const std::string& path, const Matrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    write_tensor(os, m);
}

Matrix read_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    return read_tensor(is);
}

const Matrix& TensorArchive::get(const std::string& name) const {
    for (const NamedTensor& r : records_)
        if (r.name == name) return r.tensor;
    throw std::runtime_error("tensor archive: no record named " + name);
}

bool TensorArchive::has(const std::string& name) const {
    for (const NamedTensor& r : records_)
        if (r.name == name) return true;
    return false;
}

void TensorArchive::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_u64(os, records_.size());
    for (const NamedTensor& r : records_) {
        write_u64(os, r.name.size());
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        write_tensor(os, r.tensor);
    }
}

TensorArchive TensorArchive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    char magic[4];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("tensor archive: bad magic in " + path);
    const std::uint64_t count = read_u64(is);
    TensorArchive a;
    for (std::uint64_t k = 0; k < count; ++k) {
        const std::uint64_t len = read_u64(is);
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        if (!is) throw std::runtime_error("tensor archive: truncated name");
        a.put(name, read_tensor(is));
    }
    return a;
}

}  // namespace sigma::io
