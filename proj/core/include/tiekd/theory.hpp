#pragma once

// Executable numeric oracles for the KD identities this project relies on:
// KL/CE equivalence, the top-1/remainder split of the KD cross entropy, the
// unified top-1 objective shared by word- and sequence-level KD, and the
// uniform-regularization effect of renormalizing kept-top-1 targets.
// Everything runs in f64 over seeded random distributions plus live
// micro-model outputs.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace tiekd {

struct IdentityReport {
    std::string name;
    double max_discrepancy = 0.0;
    int64_t samples = 0;
    double tolerance = 0.0;
    bool pass = false;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const;
};

// KL(q||p) == CE(q,p) - H(q) on every sample.
IdentityReport check_kl_ce_equivalence(int samples, double tol, uint64_t seed);

// CE(q,p) == q(t1) * (-log p(t1)) + R(t1) exactly; `extra` reports the mean
// of |R| / CE, the relative size of the term the top-1 approximation drops.
IdentityReport check_top1_decomposition(int samples, double tol, uint64_t seed);

// The unified objective -sum_j f(j) log p(t1_j | context):
//   f = q(t1)        reproduces the kept-top-1 word-KD loss,
//   f = 1{y_j = t1}  reproduces seq_kd_loss in mode top1_only.
// Both equalities are evaluated against the live loss pipeline on micro-model
// batches.
IdentityReport compare_unified_objective(int micro_batches, double tol, uint64_t seed);

// Renormalizing a kept-top-1 target by spreading u = (1-q(t1))/(|V|-1) over
// the other tokens adds exactly u * sum_{k != t1} (-log p(k)) to the CE-form
// loss.
IdentityReport check_uniform_regularization(int samples, double tol, uint64_t seed);

std::vector<IdentityReport> run_all_theory_checks(int samples, double tol, uint64_t seed);

}  // namespace tiekd
