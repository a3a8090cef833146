#include "sigma/common.hpp"

#include <Eigen/Core>
#include <cstdlib>
#include <string>

namespace sigma {

int configured_thread_cap() {
    const char* raw = std::getenv("SIGMA_MATCH_THREADS");
    if (raw == nullptr || *raw == '\0') return 0;
    try {
        const int n = std::stoi(raw);
        return n < 0 ? 0 : n;
    } catch (const std::exception&) {
        return 0;
    }
}

void apply_thread_cap() {
    const int cap = configured_thread_cap();
    if (cap > 0) Eigen::setNbThreads(cap);
    // cap == 0: auto, leave Eigen's default
}

}  // namespace sigma
