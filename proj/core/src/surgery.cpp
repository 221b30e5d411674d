#include "tiekd/surgery.hpp"

#include <cstdio>
#include <stdexcept>

namespace tiekd {

SurgeryMode SurgeryMode::topk_truncate(int k) {
    if (k < 1) throw std::invalid_argument("SurgeryMode: topk truncation needs k >= 1, got " + std::to_string(k));
    SurgeryMode m;
    m.kind = kTopkTruncate;
    m.k = k;
    return m;
}

SurgeryMode SurgeryMode::bucket(double lo, double hi) {
    if (!(lo < hi)) throw std::invalid_argument("SurgeryMode: bucket needs lo < hi");
    if (lo < 0.0 || hi > 1.0) throw std::invalid_argument("SurgeryMode: bucket bounds must lie in [0,1]");
    SurgeryMode m;
    m.kind = kBucket;
    m.lo = lo;
    m.hi = hi;
    return m;
}

SurgeryMode SurgeryMode::parse(const std::string& text) {
    if (text == "vanilla") return vanilla();
    if (text == "no_correlation") return no_correlation();
    if (text == "no_top1") return no_top1();
    if (text == "no_kd") return no_kd();
    if (text.rfind("topk:", 0) == 0) {
        try {
            return topk_truncate(std::stoi(text.substr(5)));
        } catch (const std::invalid_argument&) {
            throw std::invalid_argument("SurgeryMode: bad topk spec '" + text + "'");
        }
    }
    if (text.rfind("bucket:", 0) == 0) {
        double lo, hi;
        if (std::sscanf(text.c_str(), "bucket:%lf:%lf", &lo, &hi) != 2)
            throw std::invalid_argument("SurgeryMode: bad bucket spec '" + text + "'");
        return bucket(lo, hi);
    }
    throw std::invalid_argument("SurgeryMode: unknown mode '" + text + "'");
}

std::string SurgeryMode::to_string() const {
    switch (kind) {
        case kVanilla: return "vanilla";
        case kNoCorrelation: return "no_correlation";
        case kNoTop1: return "no_top1";
        case kNoKd: return "no_kd";
        case kTopkTruncate: return "topk:" + std::to_string(k);
        case kBucket: {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "bucket:%g:%g", lo, hi);
            return buf;
        }
    }
    return "vanilla";
}

}  // namespace tiekd
