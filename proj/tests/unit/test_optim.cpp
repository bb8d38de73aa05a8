#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "act/optim.hpp"
#include "support/gradcheck.hpp"

using namespace act;

namespace {

constexpr double kSgdTwoSteps = -0.29;
constexpr double kAdamSteps[3] = {0.90000000099999999, 0.80041222971233739111, 0.70158627450441421423};
constexpr double kSamQuadratic = 0.89000000000001;
constexpr double kElevenPow = 0.16556002607617017259;  // 11^-0.75

// f(w) = w^2 / 2 summed over elements
Tensor half_square(const Tensor& w) { return scalar_mul(sum(mul(w, w)), 0.5); }

std::vector<ParamGroup> single(const Tensor& w) { return {ParamGroup{{w}, 1.0, std::nullopt}}; }

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Sgd, MomentumMatchesOracle) {
    auto w = Tensor::scalar(0.0, true);
    auto groups = single(w);
    Sgd sgd({0.1, 0.9, 0.0});
    for (int i = 0; i < 2; ++i) {
        zero_grad(groups);
        backward(w * 1.0);  // g = 1
        sgd.step(groups);
    }
    EXPECT_NEAR(w.item(), kSgdTwoSteps, 1e-15);
}

TEST(Sgd, WeightDecayAddsToGradient) {
    auto w = Tensor::scalar(2.0, true);
    auto groups = single(w);
    Sgd sgd({0.5, 0.0, 0.1});
    backward(w * 0.0);
    sgd.step(groups);
    EXPECT_DOUBLE_EQ(w.item(), 2.0 - 0.5 * 0.2);
}

TEST(Adam, QuadraticMatchesOracle) {
    auto w = Tensor::scalar(1.0, true);
    auto groups = single(w);
    Adam adam({0.1, 0.9, 0.999, 1e-8});
    for (double expected : kAdamSteps) {
        zero_grad(groups);
        backward(half_square(w));
        adam.step(groups);
        EXPECT_NEAR(w.item(), expected, 1e-15);
    }
}

TEST(Adam, StateIsPerParameter) {
    // Stepping a second parameter must not advance the first one's bias correction.
    auto a = Tensor::scalar(1.0, true), b = Tensor::scalar(1.0, true);
    Adam adam({0.1, 0.9, 0.999, 1e-8});
    std::vector<ParamGroup> only_b{ParamGroup{{b}, 1.0, std::nullopt}};
    for (int i = 0; i < 3; ++i) {
        zero_grad(only_b);
        backward(half_square(b));
        adam.step(only_b);
    }
    auto groups = single(a);
    backward(half_square(a));
    adam.step(groups);
    EXPECT_NEAR(a.item(), kAdamSteps[0], 1e-15);
}

TEST(Adam, GroupLearningRates) {
    auto a = Tensor::scalar(1.0, true), b = Tensor::scalar(1.0, true), c = Tensor::scalar(1.0, true);
    std::vector<ParamGroup> groups{{{a}, 1.0, std::nullopt}, {{b}, 0.5, std::nullopt}, {{c}, 1.0, 0.3}};
    Adam adam({0.1, 0.9, 0.999, 1e-8});
    backward(half_square(a) + half_square(b) + half_square(c));
    adam.step(groups);
    // First Adam step moves by lr * g / (|g| + eps') ~ lr.
    EXPECT_NEAR(1.0 - a.item(), 0.1, 1e-7);
    EXPECT_NEAR(1.0 - b.item(), 0.05, 1e-7);
    EXPECT_NEAR(1.0 - c.item(), 0.3, 1e-7);
}

TEST(Optimizers, MissingGradientIsAContractViolation) {
    auto w = Tensor::scalar(1.0, true);
    auto groups = single(w);
    EXPECT_THROW(Adam({}).step(groups), ContractViolation);
    EXPECT_THROW(Sgd({}).step(groups), ContractViolation);
}

TEST(Optimizers, ConfigValidation) {
    EXPECT_THROW(Adam({0.0}), ContractViolation);
    EXPECT_THROW(Adam({1e-3, 1.0}), ContractViolation);
    EXPECT_THROW(Sgd({0.1, 1.0, 0.0}), ContractViolation);
    EXPECT_THROW((Sam<Adam>(-0.1, Adam({}))), ContractViolation);
}

TEST(Sam, QuadraticMatchesOracle) {
    auto w = Tensor::scalar(1.0, true);
    auto groups = single(w);
    Sam<Sgd> sam(0.1, Sgd({0.1, 0.0, 0.0}));
    const double loss = sam.step(groups, [&] { return half_square(w); });
    EXPECT_NEAR(w.item(), kSamQuadratic, 1e-12);
    EXPECT_DOUBLE_EQ(loss, 0.5);
    EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
}

TEST(Sam, PerturbationUsesTheGlobalNorm) {
    auto a = Tensor::scalar(3.0, true), b = Tensor::scalar(4.0, true);
    std::vector<ParamGroup> groups{{{a}, 1.0, std::nullopt}, {{b}, 1.0, std::nullopt}};
    Sam<Sgd> sam(0.5, Sgd({0.1, 0.0, 0.0}));
    sam.adversarial_gradient(groups, [&] { return half_square(a) + half_square(b); });
    // ||g|| = 5, so the perturbed point is (3 + 0.3, 4 + 0.4); gradient of w^2/2 is w.
    EXPECT_NEAR(a.grad()[0], 3.3, 1e-12);
    EXPECT_NEAR(b.grad()[0], 4.4, 1e-12);
    EXPECT_DOUBLE_EQ(a.item(), 3.0);
    EXPECT_DOUBLE_EQ(b.item(), 4.0);
}

TEST(Sam, RhoZeroIsBitwiseTheBaseOptimizer) {
    Rng rng(1);
    const auto x = act::testing::random_matrix(rng, 6, 3, 1.0, false);
    auto w1 = act::testing::random_matrix(rng, 3, 2);
    auto w2 = w1.clone();
    auto loss_of = [&](const Tensor& w) { return sum(mul(softmax_rows(matmul(x, w)), matmul(x, w))); };
    auto g1 = single(w1), g2 = single(w2);
    Adam plain({0.01});
    Sam<Adam> sam(0.0, Adam({0.01}));
    for (int i = 0; i < 100; ++i) {
        zero_grad(g1);
        backward(loss_of(w1));
        plain.step(g1);
        sam.step(g2, [&] { return loss_of(w2); });
    }
    EXPECT_TRUE(bitwise_equal(w1.data(), w2.data()));
}

TEST(Sam, WeightsRestoredWhenTheSecondEvaluationThrows) {
    auto w = Tensor::vector({1.0, -2.0}, true);
    auto groups = single(w);
    Sam<Adam> sam(0.2, Adam({}));
    int calls = 0;
    auto closure = [&] {
        if (++calls == 2) throw std::runtime_error("boom");
        return half_square(w);
    };
    EXPECT_THROW(sam.step(groups, closure), std::runtime_error);
    EXPECT_DOUBLE_EQ(w[0], 1.0);
    EXPECT_DOUBLE_EQ(w[1], -2.0);
}

TEST(Sam, DoesNotTouchParametersOutsideTheGroups) {
    auto w = Tensor::scalar(1.0, true), frozen = Tensor::scalar(5.0, true);
    auto groups = single(w);
    Sam<Adam> sam(0.1, Adam({}));
    sam.step(groups, [&] { return half_square(w) + half_square(frozen); });
    EXPECT_DOUBLE_EQ(frozen.item(), 5.0);
    EXPECT_NE(w.item(), 1.0);
}

TEST(LrSchedule, EndpointsAndMonotonicity) {
    const LrSchedule s{0.01};
    EXPECT_EQ(s.lr_at(0.0), 0.01);
    EXPECT_NEAR(s.lr_at(1.0) / 0.01, kElevenPow, 1e-12);
    double prev = s.lr_at(0.0);
    for (int i = 1; i <= 100; ++i) {
        const double v = s.lr_at(i / 100.0);
        EXPECT_LT(v, prev);
        prev = v;
    }
    EXPECT_THROW(s.lr_at(-0.01), ContractViolation);
    EXPECT_THROW(s.lr_at(1.01), ContractViolation);
}
