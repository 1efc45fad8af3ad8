#include "asc/parallel.hpp"

#include <cstdlib>
#include <string>

namespace asc {

std::size_t default_workers() {
    if (const char* env = std::getenv("ASC_WORKERS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace asc
