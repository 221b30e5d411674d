#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "tiekd/theory.hpp"

using namespace tiekd;

TEST_SUITE("theory") {

TEST_CASE("all four identities pass at 1e-9 over 1000 samples") {
    for (const auto& report : run_all_theory_checks(1000, 1e-9, 12345)) {
        INFO(report.name, " discrepancy ", report.max_discrepancy);
        CHECK(report.pass);
        CHECK(report.max_discrepancy < 1e-12);
        CHECK(std::isfinite(report.max_discrepancy));
    }
}

TEST_CASE("kl/ce equivalence: p=q edge and one-hot edge") {
    // p = q: KL is 0 and CE equals the entropy.
    std::vector<double> q = {0.5, 0.3, 0.2};
    double kl = 0, ce = 0, h = 0;
    for (size_t k = 0; k < q.size(); ++k) {
        kl += q[k] * std::log(q[k] / q[k]);
        ce -= q[k] * std::log(q[k]);
        h -= q[k] * std::log(q[k]);
    }
    CHECK(kl == 0.0);
    CHECK(ce == h);
    // one-hot q: CE = -log p(gold), H = 0.
    std::vector<double> onehot = {0.0, 1.0, 0.0};
    std::vector<double> p = {0.2, 0.5, 0.3};
    double ce2 = 0, h2 = 0;
    for (size_t k = 0; k < onehot.size(); ++k) {
        if (onehot[k] > 0) {
            ce2 -= onehot[k] * std::log(p[k]);
            h2 -= onehot[k] * std::log(onehot[k]);
        }
    }
    CHECK(ce2 == doctest::Approx(-std::log(0.5)));
    CHECK(h2 == 0.0);
}

TEST_CASE("top1 decomposition reports the remainder share") {
    auto report = check_top1_decomposition(500, 1e-9, 7);
    CHECK(report.pass);
    const double share = report.extra.at("mean_remainder_over_ce");
    CHECK(share > 0.0);
    CHECK(share < 1.0);
}

TEST_CASE("remainder share shrinks as the teacher sharpens") {
    // Sweep teacher sharpness: q = softmax(logit * s); remainder/CE falls
    // monotonically with s against a fixed student.
    std::vector<double> base = {2.0, 1.0, 0.5, 0.2, 0.1};
    std::vector<double> p = {0.3, 0.25, 0.2, 0.15, 0.1};
    double prev = 1e9;
    for (double sharpness : {0.5, 1.0, 2.0, 4.0, 8.0}) {
        std::vector<double> q(base.size());
        double sum = 0;
        for (size_t i = 0; i < base.size(); ++i) {
            q[i] = std::exp(base[i] * sharpness);
            sum += q[i];
        }
        for (auto& x : q) x /= sum;
        double ce = 0, remainder = 0;
        for (size_t k = 0; k < q.size(); ++k) {
            ce -= q[k] * std::log(p[k]);
            if (k != 0) remainder -= q[k] * std::log(p[k]);
        }
        const double share = remainder / ce;
        CHECK(share < prev);
        prev = share;
    }
}

TEST_CASE("unified objective: frozen hand value for the three-position case") {
    // -(0.9 ln 0.8 + 0.5 ln 0.6 + 0.7 ln 0.5), pre-normalization sum.
    const double value = -(0.9 * std::log(0.8) + 0.5 * std::log(0.6) + 0.7 * std::log(0.5));
    CHECK(value == doctest::Approx(0.9414450344577457).epsilon(1e-13));
}

TEST_CASE("unified objective: all-false flags zero the sequence-level form") {
    std::vector<uint8_t> flags = {0, 0, 0};
    double l_uni = 0.0;
    for (uint8_t f : flags) l_uni -= f * std::log(0.5);
    CHECK(l_uni == 0.0);
}

TEST_CASE("uniform regularization: q(top1)=1 makes both losses equal, penalty nonnegative") {
    const int v = 10;
    std::vector<double> p(v, 0.1);
    const double q_top1 = 1.0;
    const double u = (1.0 - q_top1) / (v - 1);
    CHECK(u == 0.0);
    double penalty = 0;
    for (int k = 1; k < v; ++k) penalty -= u * std::log(p[k]);
    CHECK(penalty == 0.0);
    // any u > 0 gives a nonnegative penalty since log p <= 0
    const double u2 = 0.05;
    double penalty2 = 0;
    for (int k = 1; k < v; ++k) penalty2 -= u2 * std::log(p[k]);
    CHECK(penalty2 >= 0.0);
}

}  // TEST_SUITE
