#include "tiekd/threads.hpp"

#include <cstdlib>
#include <string>

namespace tiekd {

int thread_budget() {
    const char* env = std::getenv("TIEKD_THREADS");
    if (env == nullptr) return 1;
    try {
        const int n = std::stoi(env);
        if (n < 1) return 1;
        return n > 256 ? 256 : n;
    } catch (...) {
        return 1;
    }
}

}  // namespace tiekd
