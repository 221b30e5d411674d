#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "tiekd/losses.hpp"

using namespace tiekd;
using tiekd::test::random_distribution;
using tiekd::test::random_tensor;

namespace {

// Logits whose softmax reproduces `probs` exactly enough for oracle work.
template <typename T>
TensorT<T> logits_for(const std::vector<T>& probs, Shape shape) {
    std::vector<T> data(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) data[i] = std::log(probs[i]);
    return TensorT<T>::from_data(std::move(shape), std::move(data));
}

template <typename T>
SoftTargetBatch<T> batch_from(const std::vector<std::vector<T>>& rows) {
    std::vector<T> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return SoftTargetBatch<T>::from_probs(static_cast<int64_t>(rows.size()),
                                          static_cast<int64_t>(rows[0].size()), std::move(flat));
}

// Quadruple-loop reference for the hierarchical ranking loss, written from
// the formula: full sorts for the top-k lists, pairwise family first, top-1
// family second, position-major accumulation, final division by the count.
double hr_reference(const std::vector<std::vector<double>>& p_rows, const std::vector<std::vector<double>>& q_rows,
                    int k) {
    double total = 0.0;
    for (size_t r = 0; r < p_rows.size(); ++r) {
        const auto& p = p_rows[r];
        const auto& q = q_rows[r];
        const int v = static_cast<int>(p.size());
        std::vector<int> t_top, s_top;
        {
            std::vector<int> ids(v);
            std::iota(ids.begin(), ids.end(), 0);
            auto by = [](const std::vector<double>& row) {
                return [&row](int a, int b) { return row[a] != row[b] ? row[a] > row[b] : a < b; };
            };
            std::vector<int> qs = ids, ps = ids;
            std::sort(qs.begin(), qs.end(), by(q));
            std::sort(ps.begin(), ps.end(), by(p));
            t_top.assign(qs.begin(), qs.begin() + k);
            s_top.assign(ps.begin(), ps.begin() + k);
        }
        for (int u = 0; u < k; ++u)
            for (int s = 0; s < k; ++s) {
                const double indicator = q[t_top[u]] > q[s_top[s]] ? 1.0 : 0.0;
                total += std::max(0.0, indicator * (p[s_top[s]] - p[t_top[u]]));
            }
        for (int u = 0; u < k; ++u) total += std::max(0.0, p[t_top[u]] - p[t_top[0]]);
    }
    return total / static_cast<double>(p_rows.size());
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("ce: perfect one-hot prediction, eps=0, gives zero loss") {
    auto logits = logits_for<double>({1.0 - 2e-12, 1e-12, 1e-12}, {1, 1, 3});
    auto report = ce_label_smoothed(logits, {0}, 0.0, {1});
    CHECK(report.value == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ce: frozen hand value for p=(0.5,0.3,0.2), gold 0, eps 0.1") {
    auto logits = logits_for<double>({0.5, 0.3, 0.2}, {1, 1, 3});
    auto report = ce_label_smoothed(logits, {0}, 0.1, {1});
    CHECK(report.value == doctest::Approx(0.7407177257479501).epsilon(1e-10));
}

TEST_CASE("ce: gradient matches finite differences") {
    Rng rng(23);
    for (int i = 0; i < 10; ++i) {
        auto point = random_tensor<double>(rng, {2, 3, 7}, 1.5);
        std::vector<int> gold = {4, 1, 6, 0, 2, 5};
        std::vector<uint8_t> mask = {1, 1, 1, 1, 1, 0};
        auto report = grad_check(
            [&](const TensorD& x) { return ce_label_smoothed(x, gold, 0.1, mask).loss; }, point, 1e-5);
        CHECK(report.max_rel_error < 1e-5);
    }
}

TEST_CASE("ce: all-PAD batch and bad eps are rejected") {
    auto logits = TensorD::zeros({1, 2, 3});
    CHECK_THROWS_AS(ce_label_smoothed(logits, {0, 0}, 0.1, {0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(ce_label_smoothed(logits, {0, 0}, 1.0, {1, 1}), std::invalid_argument);
}

TEST_CASE("kd_ce: q == p gives the teacher entropy") {
    std::vector<double> q = {0.7, 0.2, 0.1};
    auto report = kd_cross_entropy(logits_for<double>(q, {1, 1, 3}), batch_from<double>({q}), {1});
    CHECK(report.value == doctest::Approx(0.8018185525433372).epsilon(1e-10));
}

TEST_CASE("kd_ce: uniform student against q=(0.7,0.2,0.1) costs ln 3") {
    std::vector<double> q = {0.7, 0.2, 0.1};
    std::vector<double> p = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    auto report = kd_cross_entropy(logits_for<double>(p, {1, 1, 3}), batch_from<double>({q}), {1});
    CHECK(report.value == doctest::Approx(1.0986122886681098).epsilon(1e-10));
    // KL part = CE - H(q)
    CHECK(report.value - 0.8018185525433372 == doctest::Approx(0.29679373612477256).epsilon(1e-8));
}

TEST_CASE("kd_ce: unnormalized kept-top-1 target is a single-term loss") {
    auto targets = batch_from<double>({{0.7, 0.2, 0.1}});
    std::vector<int> gold = {0};
    std::vector<uint8_t> mask = {1};
    targets.apply(SurgeryMode::no_correlation(), gold, mask, 0.0);
    auto report = kd_cross_entropy(logits_for<double>({0.5, 0.25, 0.25}, {1, 1, 3}), targets, mask);
    CHECK(report.value == doctest::Approx(0.48520302639196167).epsilon(1e-10));
}

TEST_CASE("kd_ce: negative target entries are rejected") {
    SoftTargetBatch<double> bad = batch_from<double>({{0.5, 0.5, 0.0}});
    bad.probs[2] = -0.1;
    CHECK_THROWS_AS(kd_cross_entropy(TensorD::zeros({1, 1, 3}), bad, {1}), std::invalid_argument);
}

TEST_CASE("kd_ce: gradient matches finite differences") {
    Rng rng(29);
    for (int i = 0; i < 10; ++i) {
        auto point = random_tensor<double>(rng, {1, 4, 6}, 1.5);
        std::vector<std::vector<double>> rows;
        for (int r = 0; r < 4; ++r) rows.push_back(random_distribution<double>(rng, 6));
        auto targets = batch_from<double>(rows);
        std::vector<uint8_t> mask = {1, 1, 1, 1};
        auto report =
            grad_check([&](const TensorD& x) { return kd_cross_entropy(x, targets, mask).loss; }, point, 1e-5);
        CHECK(report.max_rel_error < 1e-5);
    }
}

TEST_CASE("property: kd_ce(q,p) - kd_ce(q,q) = KL(q||p) >= 0 for normalized q") {
    Rng rng(31);
    for (int i = 0; i < 300; ++i) {
        auto q = random_distribution<double>(rng, 12);
        auto p = random_distribution<double>(rng, 12);
        auto ce_qp = kd_cross_entropy(logits_for<double>(p, {1, 1, 12}), batch_from<double>({q}), {1}).value;
        auto ce_qq = kd_cross_entropy(logits_for<double>(q, {1, 1, 12}), batch_from<double>({q}), {1}).value;
        double kl = 0;
        for (int k = 0; k < 12; ++k) kl += q[k] * std::log(q[k] / p[k]);
        CHECK(std::abs((ce_qp - ce_qq) - kl) < 1e-9);
        CHECK(ce_qp - ce_qq >= -1e-12);
    }
}

TEST_CASE("hr: worked example q=(.7,.2,.1), p=(.5,.1,.4), k=2 gives 0.3") {
    std::vector<double> q = {0.7, 0.2, 0.1};
    std::vector<double> p = {0.5, 0.1, 0.4};
    auto report = hierarchical_ranking(TensorD::from_data({1, 1, 3}, p), batch_from<double>({q}), 2, {1});
    CHECK(report.value == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("hr: p == q vanishes") {
    Rng rng(37);
    for (int i = 0; i < 100; ++i) {
        auto q = random_distribution<double>(rng, 10);
        auto report = hierarchical_ranking(TensorD::from_data({1, 1, 10}, q), batch_from<double>({q}), 4, {1});
        CHECK(report.value == 0.0);
    }
}

TEST_CASE("hr: exact match with the quadruple-loop reference on 1000 random triples") {
    Rng rng(41);
    for (int i = 0; i < 1000; ++i) {
        const int v = 5 + static_cast<int>(rng.uniform_int(12));
        const int k = 1 + static_cast<int>(rng.uniform_int(v));
        const int rows = 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<std::vector<double>> p_rows, q_rows;
        for (int r = 0; r < rows; ++r) {
            p_rows.push_back(random_distribution<double>(rng, v));
            q_rows.push_back(random_distribution<double>(rng, v));
        }
        std::vector<double> p_flat;
        for (const auto& r : p_rows) p_flat.insert(p_flat.end(), r.begin(), r.end());
        auto report = hierarchical_ranking(TensorD::from_data({1, rows, v}, p_flat), batch_from<double>(q_rows), k,
                                           std::vector<uint8_t>(rows, 1));
        CHECK(report.value == hr_reference(p_rows, q_rows, k));
    }
}

TEST_CASE("hr: nonnegative, and zero when orderings agree on the union") {
    Rng rng(43);
    for (int i = 0; i < 500; ++i) {
        auto q = random_distribution<double>(rng, 9);
        auto p = random_distribution<double>(rng, 9);
        const int k = 1 + static_cast<int>(rng.uniform_int(9));
        auto report = hierarchical_ranking(TensorD::from_data({1, 1, 9}, p), batch_from<double>({q}), k, {1});
        CHECK(report.value >= 0.0);

        // A student that ranks exactly like the teacher (same order, different
        // values) has zero loss.
        auto order = full_ranking(q.data(), 9);
        std::vector<double> aligned(9);
        std::vector<double> sorted_p = p;
        std::sort(sorted_p.begin(), sorted_p.end(), std::greater<>());
        for (int r = 0; r < 9; ++r) aligned[order[r]] = sorted_p[r];
        auto zero = hierarchical_ranking(TensorD::from_data({1, 1, 9}, aligned), batch_from<double>({q}), k, {1});
        CHECK(zero.value == 0.0);
    }
}

TEST_CASE("hr: gradient matches finite differences at kink-free points") {
    Rng rng(47);
    int checked = 0;
    while (checked < 10) {
        const int v = 8;
        auto logits_point = random_tensor<double>(rng, {1, 2, v}, 1.2);
        std::vector<std::vector<double>> q_rows = {random_distribution<double>(rng, v),
                                                   random_distribution<double>(rng, v)};
        auto targets = batch_from<double>(q_rows);
        std::vector<uint8_t> mask = {1, 1};

        // Reject points with any hinge argument near the kink.
        bool kink_free = true;
        {
            NoGradGuard ng;
            auto probs = softmax_lastdim(logits_point);
            for (int64_t r = 0; r < 2 && kink_free; ++r) {
                const double* p = probs.data().data() + r * v;
                const double* q = q_rows[r].data();
                auto t_top = topk_desc(q, v, 3);
                auto s_top = topk_desc(p, v, 3);
                for (int u : t_top) {
                    for (int s : s_top)
                        if (q[u] > q[s] && std::abs(p[s] - p[u]) < 1e-3) kink_free = false;
                    if (u != t_top[0] && std::abs(p[u] - p[t_top[0]]) < 1e-3) kink_free = false;
                }
            }
        }
        if (!kink_free) continue;
        // Hold the top-k index sets fixed while differentiating: recompute
        // the loss from softmax but freeze ranking churn by keeping h small.
        auto report = grad_check(
            [&](const TensorD& x) { return hierarchical_ranking(softmax_lastdim(x), targets, 3, mask).loss; },
            logits_point, 1e-6);
        CHECK(report.max_rel_error < 1e-5);
        ++checked;
    }
}

TEST_CASE("word_kd: alpha=0 reduces exactly to label-smoothed CE") {
    Rng rng(53);
    auto logits = random_tensor<double>(rng, {1, 3, 8}, 1.3);
    std::vector<int> gold = {4, 5, 6};
    std::vector<uint8_t> mask = {1, 1, 1};
    std::vector<std::vector<double>> q_rows;
    for (int r = 0; r < 3; ++r) q_rows.push_back(random_distribution<double>(rng, 8));
    KDWeights w;
    w.alpha = 0.0;
    auto kd = word_kd_loss(logits, gold, batch_from<double>(q_rows), w, false, mask);
    auto ce = ce_label_smoothed(logits, gold, 0.1, mask);
    CHECK(kd.value == doctest::Approx(ce.value).epsilon(1e-12));
    CHECK(kd.loss.item() == doctest::Approx(ce.loss.item()).epsilon(1e-12));
}

TEST_CASE("word_kd: alpha=1 with q=p zeroes the KL and HR parts") {
    std::vector<double> q = {0.6, 0.25, 0.1, 0.05};
    auto logits = logits_for<double>(q, {1, 1, 4});
    KDWeights w;
    w.alpha = 1.0;
    w.k = 2;
    auto report = word_kd_loss(logits, {0}, batch_from<double>({q}), w, true, {1});
    CHECK(report.components.at("l_kl") == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(report.components.at("l_hr") == 0.0);
}

TEST_CASE("word_kd: component arithmetic (1-a)Lce + a(Lkl + Lhr)") {
    Rng rng(59);
    auto logits = random_tensor<double>(rng, {1, 2, 6}, 1.1);
    std::vector<int> gold = {4, 5};
    std::vector<uint8_t> mask = {1, 1};
    std::vector<std::vector<double>> q_rows = {random_distribution<double>(rng, 6),
                                               random_distribution<double>(rng, 6)};
    KDWeights w;
    w.alpha = 0.5;
    auto report = word_kd_loss(logits, gold, batch_from<double>(q_rows), w, true, mask);
    const double recomposed = 0.5 * report.components.at("l_ce") +
                              0.5 * (report.components.at("l_kl") + report.components.at("l_hr"));
    CHECK(report.value == doctest::Approx(recomposed).epsilon(1e-12));
    CHECK_THROWS_AS(([&] {
                        KDWeights bad;
                        bad.alpha = 1.5;
                        word_kd_loss(logits, gold, batch_from<double>(q_rows), bad, false, mask);
                    }()),
                    std::invalid_argument);
}

TEST_CASE("property: word_kd is affine in alpha with slope Lkd - Lce") {
    Rng rng(61);
    auto logits = random_tensor<double>(rng, {1, 3, 7}, 1.2);
    std::vector<int> gold = {4, 5, 6};
    std::vector<uint8_t> mask = {1, 1, 1};
    std::vector<std::vector<double>> q_rows;
    for (int r = 0; r < 3; ++r) q_rows.push_back(random_distribution<double>(rng, 7));
    auto value_at = [&](double alpha) {
        KDWeights w;
        w.alpha = alpha;
        return word_kd_loss(logits, gold, batch_from<double>(q_rows), w, true, mask).value;
    };
    const double v0 = value_at(0.0), v05 = value_at(0.5), v1 = value_at(1.0);
    CHECK(v05 == doctest::Approx((v0 + v1) / 2).epsilon(1e-9));
}

TEST_CASE("property: duplicating the batch leaves per-token values unchanged") {
    Rng rng(67);
    auto logits_row = random_tensor<double>(rng, {1, 2, 6}, 1.0);
    std::vector<double> doubled = logits_row.data();
    doubled.insert(doubled.end(), logits_row.data().begin(), logits_row.data().end());
    auto logits2 = TensorD::from_data({2, 2, 6}, doubled);
    std::vector<int> gold = {4, 5};
    std::vector<int> gold2 = {4, 5, 4, 5};
    std::vector<uint8_t> mask = {1, 1}, mask2 = {1, 1, 1, 1};
    std::vector<std::vector<double>> q_rows = {random_distribution<double>(rng, 6),
                                               random_distribution<double>(rng, 6)};
    auto q1 = batch_from<double>(q_rows);
    auto q2 = batch_from<double>({q_rows[0], q_rows[1], q_rows[0], q_rows[1]});

    CHECK(ce_label_smoothed(logits_row, gold, 0.1, mask).value ==
          doctest::Approx(ce_label_smoothed(logits2, gold2, 0.1, mask2).value).epsilon(1e-6));
    CHECK(kd_cross_entropy(logits_row, q1, mask).value ==
          doctest::Approx(kd_cross_entropy(logits2, q2, mask2).value).epsilon(1e-6));
    KDWeights w;
    CHECK(word_kd_loss(logits_row, gold, q1, w, true, mask).value ==
          doctest::Approx(word_kd_loss(logits2, gold2, q2, w, true, mask2).value).epsilon(1e-6));
}

TEST_CASE("seq_kd: mode all is the plain NLL of the distilled tokens") {
    Rng rng(71);
    auto logits = random_tensor<double>(rng, {1, 4, 6}, 1.0);
    std::vector<int> gold = {4, 5, 4, 2};
    std::vector<uint8_t> flags = {1, 0, 1, 1};
    std::vector<uint8_t> mask = {1, 1, 1, 1};
    std::vector<int64_t> sent = {0, 0, 0, 0};
    std::vector<int> steps = {0, 1, 2, 3};
    auto report = seq_kd_loss(logits, gold, flags, SeqKdMode::all(), mask, sent, steps);
    NoGradGuard ng;
    auto logp = log_softmax_lastdim(logits);
    double expected = 0;
    for (int r = 0; r < 4; ++r) expected -= logp.data()[r * 6 + gold[r]];
    CHECK(report.value == doctest::Approx(expected / 4).epsilon(1e-12));
}

TEST_CASE("seq_kd: all-true flags make top1_only equal all") {
    Rng rng(73);
    auto logits = random_tensor<double>(rng, {1, 3, 5}, 1.0);
    std::vector<int> gold = {4, 2, 3};
    std::vector<uint8_t> flags = {1, 1, 1};
    std::vector<uint8_t> mask = {1, 1, 1};
    std::vector<int64_t> sent = {0, 0, 0};
    std::vector<int> steps = {0, 1, 2};
    CHECK(seq_kd_loss(logits, gold, flags, SeqKdMode::all(), mask, sent, steps).value ==
          seq_kd_loss(logits, gold, flags, SeqKdMode::top1_only(), mask, sent, steps).value);
}

TEST_CASE("seq_kd: zero-selection batches are rejected") {
    auto logits = TensorD::zeros({1, 2, 5});
    std::vector<uint8_t> flags = {1, 1};
    CHECK_THROWS_AS(
        seq_kd_loss(logits, {4, 4}, flags, SeqKdMode::nontop1_only(), {1, 1}, {0, 0}, {0, 1}),
        std::invalid_argument);
}

TEST_CASE("seq_kd: fixed-fraction selection hits the target rate on 10k positions") {
    const int64_t n = 10000;
    auto logits = TensorD::zeros({1, n, 4});
    std::vector<int> gold(n, 2);
    std::vector<uint8_t> flags(n, 1);
    std::vector<uint8_t> mask(n, 1);
    std::vector<int64_t> sent(n);
    std::vector<int> steps(n, 0);
    for (int64_t i = 0; i < n; ++i) sent[i] = i;
    const double r = 0.3;
    auto report = seq_kd_loss(logits, gold, flags, SeqKdMode::top1_fixed_fraction(r, 7), mask, sent, steps);
    const double selected = report.components.at("selected_fraction");
    CHECK(std::abs(selected - r) < 0.02);
    // fixed subset: same seed selects the same positions again
    auto again = seq_kd_loss(logits, gold, flags, SeqKdMode::top1_fixed_fraction(r, 7), mask, sent, steps);
    CHECK(again.components.at("selected_fraction") == selected);
}

TEST_CASE("seq_kd: all_plus_word_top1 adds the kept-top-1 term on non-top-1 positions") {
    Rng rng(79);
    auto logits = random_tensor<double>(rng, {1, 3, 6}, 1.0);
    std::vector<int> gold = {4, 5, 3};
    std::vector<uint8_t> flags = {1, 0, 1};
    std::vector<uint8_t> mask = {1, 1, 1};
    std::vector<int64_t> sent = {0, 0, 0};
    std::vector<int> steps = {0, 1, 2};
    std::vector<int> t1_ids = {4, 2, 3};
    std::vector<double> t1_probs = {0.8, 0.6, 0.9};
    auto report = seq_kd_loss(logits, gold, flags, SeqKdMode::all_plus_word_top1(), mask, sent, steps, 0.0, &t1_ids,
                              &t1_probs);
    auto base = seq_kd_loss(logits, gold, flags, SeqKdMode::all(), mask, sent, steps);
    NoGradGuard ng;
    auto logp = log_softmax_lastdim(logits);
    const double extra = -0.6 * logp.data()[1 * 6 + 2] / 3.0;  // only position 1 has flag=0
    CHECK(report.value == doctest::Approx(base.value + extra).epsilon(1e-9));
    CHECK(report.components.at("l_word_top1") == doctest::Approx(extra).epsilon(1e-9));
    CHECK_THROWS_AS(
        seq_kd_loss(logits, gold, flags, SeqKdMode::all_plus_word_top1(), mask, sent, steps, 0.0),
        std::invalid_argument);
}

TEST_CASE("seq_kd mode strings parse") {
    CHECK(SeqKdMode::parse("all").kind == SeqKdMode::kAll);
    CHECK(SeqKdMode::parse("top1_only").kind == SeqKdMode::kTop1Only);
    auto f = SeqKdMode::parse("top1_fixed_fraction:0.25:11");
    CHECK(f.fraction == doctest::Approx(0.25));
    CHECK(f.seed == 11);
    CHECK(SeqKdMode::parse(f.to_string()).fraction == doctest::Approx(0.25));
    CHECK_THROWS_AS(SeqKdMode::parse("bogus"), std::invalid_argument);
}

}  // TEST_SUITE
