#include <gtest/gtest.h>

#include <cmath>

#include "act/losses.hpp"
#include "support/gradcheck.hpp"

using namespace act;
using namespace act::testing;

namespace {

// Frozen from tests/oracles/derive_constants.py.
constexpr double kLsceTwoZeroZero = 0.3728780995552178382;     // logits [2,0,0], label 0, alpha 0.1
constexpr double kEntropy73 = 0.61084430229298431724;         // r = [.7,.3], eps 1e-5
constexpr double kRce73vsOneHot = 3.4538706395260682927;      // p = [.7,.3], q = [1,0], eps 1e-5
constexpr double kNegLogOnePlusEps = -9.9999500003333308334e-6;  // -ln(1 + 1e-5)

Tensor logits_for(std::initializer_list<double> probs) {
    std::vector<double> v;
    for (double p : probs) v.push_back(std::log(p));
    return Tensor::matrix(1, v.size(), v);
}

double enumerate_gamma(const std::vector<double>& p1, const std::vector<double>& p2) {
    double total = 0.0, diag = 0.0;
    for (std::size_t m = 0; m < p1.size(); ++m)
        for (std::size_t n = 0; n < p2.size(); ++n) {
            const double a = p1[m] * p2[n];
            total += a;
            if (m == n) diag += a;
        }
    return total - diag;
}

ObjectiveInputs random_inputs(Rng& rng, std::size_t n, std::size_t k) {
    return {random_matrix(rng, n, k, 2.0), random_matrix(rng, n, k, 2.0), random_labels(rng, n, k),
            random_simplex_rows(rng, n, k), random_simplex_rows(rng, n, k)};
}

}  // namespace

TEST(Lsce, MatchesOracle) {
    EXPECT_NEAR(lsce(Tensor::matrix(1, 3, {2, 0, 0}), {0}, 0.1).item(), kLsceTwoZeroZero, 1e-14);
}

TEST(Lsce, ZeroSmoothingIsCrossEntropy) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(8);
        const auto x = random_matrix(rng, n, k, 3.0, false);
        const auto y = random_labels(rng, n, k);
        const auto lp = log_softmax_rows(x);
        double ce = 0.0;
        for (std::size_t i = 0; i < n; ++i) ce -= lp.at(i, y[i]) / static_cast<double>(n);
        EXPECT_NEAR(lsce(x, y, 0.0).item(), ce, 1e-12);
    }
}

TEST(Lsce, UniformLogitsGiveLogK) {
    for (std::size_t k = 2; k <= 10; ++k) {
        const auto x = Tensor::zeros({4, k});
        EXPECT_NEAR(lsce(x, {0, 1, 0, 1}, 0.1).item(), std::log(static_cast<double>(k)), 1e-12);
    }
}

TEST(Lsce, RejectsBadLabelsAndAlpha) {
    const auto x = Tensor::zeros({2, 3});
    EXPECT_THROW(lsce(x, {0, 3}, 0.1), ContractViolation);
    EXPECT_THROW(lsce(x, {0}, 0.1), ContractViolation);
    EXPECT_THROW(lsce(x, {0, 1}, 1.0), ContractViolation);
}

TEST(CondEntropy, MatchesOracle) {
    EXPECT_NEAR(cond_entropy(logits_for({0.7, 0.3}), 1e-5).item(), kEntropy73, 1e-14);
}

TEST(CondEntropy, OneHotRowIsNearZero) {
    // softmax of [0, -1000] is exactly [1, 0]: -(1 ln(1 + eps)) = -ln(1 + eps)
    EXPECT_NEAR(cond_entropy(Tensor::matrix(1, 2, {0, -1000}), 1e-5).item(), kNegLogOnePlusEps, 1e-15);
}

TEST(CondEntropy, UniformRows) {
    for (std::size_t k = 2; k <= 10; ++k) {
        const double kk = static_cast<double>(k);
        const double expected = -kk * (1.0 / kk) * std::log(1.0 / kk + 1e-5);
        EXPECT_NEAR(cond_entropy(Tensor::zeros({3, k}), 1e-5).item(), expected, 1e-6);
    }
}

TEST(Rce, MatchesOracleAndRejectsNonSimplex) {
    const auto q = Tensor::matrix(1, 2, {1.0, 0.0});
    EXPECT_NEAR(rce(logits_for({0.7, 0.3}), q, 1e-5).item(), kRce73vsOneHot, 1e-13);
    EXPECT_THROW(rce(logits_for({0.7, 0.3}), Tensor::matrix(1, 2, {0.7, 0.7}), 1e-5), ContractViolation);
    EXPECT_THROW(rce(logits_for({0.7, 0.3}), Tensor::matrix(1, 3, {1, 0, 0}), 1e-5), ContractViolation);
}

TEST(Rce, NoGradientReachesSourceProbabilities) {
    auto q = Tensor::matrix(1, 2, {0.4, 0.6}, true);
    auto x = Tensor::matrix(1, 2, {0.1, 0.2}, true);
    backward(rce(x, q, 1e-5));
    EXPECT_TRUE(x.has_grad());
    EXPECT_FALSE(q.has_grad());
}

TEST(Cdd, PairMatchesOracle) {
    const std::vector<double> p1{0.6, 0.4}, p2{0.3, 0.7};
    EXPECT_NEAR(cdd_pair(p1, p2), 0.54, 1e-15);
}

TEST(Cdd, ClosedFormEqualsEnumerationOnRandomPairs) {
    Rng rng(17);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t k = 2 + rng.below(9);
        const auto p1 = random_simplex(rng, k), p2 = random_simplex(rng, k);
        const double g = cdd_pair(p1, p2);
        EXPECT_NEAR(g, enumerate_gamma(p1, p2), 1e-12);
        EXPECT_GE(g, 0.0);
        EXPECT_LE(g, 1.0);
    }
}

TEST(Cdd, OneHotExtremes) {
    const std::vector<double> a{0, 1, 0}, b{0, 0, 1};
    EXPECT_EQ(cdd_pair(a, a), 0.0);
    EXPECT_EQ(cdd_pair(a, b), 1.0);
}

TEST(Cdd, BatchIsMeanOfPairs) {
    Rng rng(4);
    const auto l1 = random_matrix(rng, 5, 4, 1.0, false), l2 = random_matrix(rng, 5, 4, 1.0, false);
    const auto p1 = softmax_rows(l1), p2 = softmax_rows(l2);
    double expected = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
        expected += cdd_pair(p1.data().subspan(i * 4, 4), p2.data().subspan(i * 4, 4)) / 5.0;
    EXPECT_NEAR(cdd_batch(l1, l2).item(), expected, 1e-14);
}

TEST(Cdd, BatchIsSymmetricAndRowPermutationInvariant) {
    Rng rng(8);
    const auto l1 = random_matrix(rng, 4, 3, 1.0, false), l2 = random_matrix(rng, 4, 3, 1.0, false);
    EXPECT_NEAR(cdd_batch(l1, l2).item(), cdd_batch(l2, l1).item(), 1e-15);
    auto permute = [](const Tensor& t) {
        std::vector<double> v;
        for (std::size_t r : {2, 0, 3, 1})
            for (std::size_t c = 0; c < 3; ++c) v.push_back(t.at(r, c));
        return Tensor::matrix(4, 3, v);
    };
    EXPECT_NEAR(cdd_batch(permute(l1), permute(l2)).item(), cdd_batch(l1, l2).item(), 1e-14);
}

TEST(Gradients, EachLossMatchesFiniteDifferences) {
    Rng rng(2024);
    for (int t = 0; t < 10; ++t) {
        const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(4);
        const auto in = random_inputs(rng, n, k);
        const LossWeights w;
        const SmoothingParams s;
        const std::pair<const char*, std::function<Tensor(const std::vector<Tensor>&)>> cases[] = {
            {"lsce", [&](const auto& v) { return lsce(v[0], in.labels, 0.1); }},
            {"cond_entropy", [&](const auto& v) { return cond_entropy(v[0], 1e-5); }},
            {"rce", [&](const auto& v) { return rce(v[0], in.source_probs1, 1e-5); }},
            {"cdd_batch", [&](const auto& v) { return cdd_batch(v[0], v[1]); }},
            {"step1", [&](const auto& v) {
                 return step1_objective({v[0], v[1], in.labels, in.source_probs1, in.source_probs2}, w, s);
             }},
            {"step2", [&](const auto& v) {
                 return step2_objective({v[0], v[1], in.labels, in.source_probs1, in.source_probs2}, w, s);
             }},
        };
        for (const auto& [name, f] : cases) {
            std::vector<Tensor> fresh{in.logits1.clone(), in.logits2.clone()};
            const auto r = check_gradients(f, fresh);
            EXPECT_LT(r.max_rel_error, 1e-4) << name << " n=" << n << " k=" << k << " at " << r.worst;
        }
    }
}

TEST(Objective, TotalsCombineTermsWithWeights) {
    Rng rng(6);
    const auto in = random_inputs(rng, 6, 4);
    const LossWeights w{0.7, 0.2, 0.4, 1.3};
    const SmoothingParams s;
    const auto t = objective_terms(in, w, s);
    const double step1 = 0.7 * (t.lsce1.item() + t.lsce2.item()) + 0.2 * (t.entropy1.item() + t.entropy2.item()) +
                         0.4 * (t.rce1.item() + t.rce2.item());
    EXPECT_NEAR(t.step1.item(), step1, 1e-13);
    EXPECT_NEAR(t.step2.item(), step1 - 1.3 * t.cdd.item(), 1e-13);
    EXPECT_NEAR(objective_terms(in, w, s, CddSign::flipped).step2.item(), step1 + 1.3 * t.cdd.item(), 1e-13);
    EXPECT_NEAR(step1_objective(in, w, s).item(), t.step1.item(), 0.0);
}

TEST(Objective, ZeroWeightsRemoveTheirTerms) {
    Rng rng(7);
    const auto in = random_inputs(rng, 3, 3);
    const SmoothingParams s;
    const auto t = objective_terms(in, {1.0, 0.0, 0.0, 0.0}, s);
    EXPECT_NEAR(t.step1.item(), t.lsce1.item() + t.lsce2.item(), 1e-15);
    EXPECT_NEAR(t.step2.item(), t.step1.item(), 1e-15);
}

TEST(Objective, PermutingBatchRowsLeavesLossesUnchanged) {
    Rng rng(12);
    const auto in = random_inputs(rng, 4, 3);
    const std::vector<std::size_t> perm{3, 1, 0, 2};
    auto rows = [&](const Tensor& t) {
        std::vector<double> v;
        for (auto r : perm)
            for (std::size_t c = 0; c < t.cols(); ++c) v.push_back(t.at(r, c));
        return Tensor::matrix(t.rows(), t.cols(), v);
    };
    std::vector<std::size_t> labels;
    for (auto r : perm) labels.push_back(in.labels[r]);
    const ObjectiveInputs permuted{rows(in.logits1), rows(in.logits2), labels, rows(in.source_probs1),
                                   rows(in.source_probs2)};
    const LossWeights w;
    const SmoothingParams s;
    EXPECT_NEAR(step2_objective(in, w, s).item(), step2_objective(permuted, w, s).item(), 1e-13);
}

TEST(Params, ValidationRejectsOutOfRange) {
    EXPECT_THROW((LossWeights{1.0, -0.1, 0.3, 1.0}.validate()), ContractViolation);
    EXPECT_THROW((SmoothingParams{0.1, 0.0}.validate()), ContractViolation);
    EXPECT_THROW((SmoothingParams{1.0, 1e-5}.validate()), ContractViolation);
}
