#include "tiekd/losses.hpp"

#include <cstdio>

namespace tiekd {

SeqKdMode SeqKdMode::parse(const std::string& text) {
    if (text == "all") return all();
    if (text == "top1_only") return top1_only();
    if (text == "nontop1_only") return nontop1_only();
    if (text == "all_plus_word_top1") return all_plus_word_top1();
    if (text.rfind("top1_fixed_fraction:", 0) == 0) {
        double fraction;
        unsigned long long seed = 0;
        const int matched = std::sscanf(text.c_str(), "top1_fixed_fraction:%lf:%llu", &fraction, &seed);
        if (matched < 1) throw std::invalid_argument("SeqKdMode: bad fixed-fraction spec '" + text + "'");
        return top1_fixed_fraction(fraction, seed);
    }
    throw std::invalid_argument("SeqKdMode: unknown mode '" + text + "'");
}

std::string SeqKdMode::to_string() const {
    switch (kind) {
        case kAll: return "all";
        case kTop1Only: return "top1_only";
        case kNonTop1Only: return "nontop1_only";
        case kAllPlusWordTop1: return "all_plus_word_top1";
        case kTop1FixedFraction: {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "top1_fixed_fraction:%g:%llu", fraction,
                          static_cast<unsigned long long>(seed));
            return buf;
        }
    }
    return "all";
}

}  // namespace tiekd
