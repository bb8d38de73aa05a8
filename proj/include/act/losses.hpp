#pragma once

// Adaptation objectives: label-smoothing cross-entropy, conditional entropy,
// reverse cross-entropy against frozen source predictions, and classifier
// determinacy disparity (CDD) between the two heads. All batch terms are means
// over rows so the weights do not depend on batch size.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "act/error.hpp"
#include "act/tensor.hpp"

namespace act {

struct LossWeights {
    double lambda_lsce = 1.0;
    double lambda_e = 0.3;
    double lambda_rce = 0.3;
    double lambda_cdd = 1.0;

    void validate() const {
        detail::require(lambda_lsce >= 0 && lambda_e >= 0 && lambda_rce >= 0 && lambda_cdd >= 0,
                        "loss weights must be nonnegative");
    }
    bool operator==(const LossWeights&) const = default;
};

struct SmoothingParams {
    double alpha_smooth = 0.1;  // label smoothing
    double eps_log = 1e-5;      // shift inside logs of probabilities

    void validate() const {
        detail::require(alpha_smooth >= 0.0 && alpha_smooth < 1.0, "alpha_smooth must lie in [0, 1)");
        detail::require(eps_log > 0.0 && eps_log <= 1e-3, "eps_log must lie in (0, 1e-3]");
    }
    bool operator==(const SmoothingParams&) const = default;
};

/// Sign given to the CDD term in the second-step objective.
/// as_printed: minimize (... - lambda_cdd * L_cdd), i.e. the heads maximize disparity.
enum class CddSign { as_printed, flipped };

namespace detail {

inline Tensor smoothed_targets(const std::vector<std::size_t>& labels, std::size_t n, std::size_t k, double alpha) {
    require(labels.size() == n, "lsce: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                                    " rows");
    std::vector<double> q(n * k, alpha / static_cast<double>(k));
    for (std::size_t i = 0; i < n; ++i) {
        require(labels[i] < k, "lsce: label " + std::to_string(labels[i]) + " in row " + std::to_string(i) +
                                   " is outside [0, " + std::to_string(k) + ")");
        q[i * k + labels[i]] += 1.0 - alpha;
    }
    return Tensor::matrix(n, k, std::move(q));
}

inline void require_simplex_rows(std::span<const double> probs, std::size_t k, double tol, const char* op) {
    for (std::size_t r = 0; r * k < probs.size(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double v = probs[r * k + j];
            require(v >= -tol, std::string(op) + ": negative probability in row " + std::to_string(r));
            s += v;
        }
        require(std::abs(s - 1.0) <= tol, std::string(op) + ": row " + std::to_string(r) + " sums to " +
                                              std::to_string(s) + ", not 1");
    }
}

}  // namespace detail

/// Mean over rows of -sum_k q_k ln softmax_k(logits), q the smoothed one-hot label.
inline Tensor lsce(const Tensor& logits, const std::vector<std::size_t>& labels, double alpha_smooth) {
    detail::require(logits.rank() == 2, "lsce: logits must be [n x K]");
    detail::require(alpha_smooth >= 0.0 && alpha_smooth < 1.0, "lsce: alpha_smooth must lie in [0, 1)");
    const auto n = logits.rows(), k = logits.cols();
    const Tensor q = detail::smoothed_targets(labels, n, k, alpha_smooth);
    return scalar_mul(sum(mul(q, log_softmax_rows(logits))), -1.0 / static_cast<double>(n));
}

/// Mean over rows of -sum_j r_j ln(r_j + eps), r = softmax(logits).
inline Tensor cond_entropy(const Tensor& logits, double eps_log) {
    detail::require(logits.rank() == 2, "cond_entropy: logits must be [n x K]");
    const Tensor r = softmax_rows(logits);
    return scalar_mul(sum(mul(r, log_shifted(r, eps_log))), -1.0 / static_cast<double>(logits.rows()));
}

/// Mean over rows of -sum_k p_k ln(q_k + eps), p = softmax(target_logits), q fixed source probabilities.
/// No gradient reaches source_probs.
inline Tensor rce(const Tensor& target_logits, const Tensor& source_probs, double eps_log) {
    detail::require(target_logits.rank() == 2, "rce: target logits must be [n x K]");
    detail::require_same_shape(target_logits, source_probs, "rce");
    detail::require_simplex_rows(source_probs.data(), source_probs.cols(), 1e-6, "rce");
    const Tensor log_q = log_shifted(source_probs.detach(), eps_log);
    const Tensor p = softmax_rows(target_logits);
    return scalar_mul(sum(mul(p, log_q)), -1.0 / static_cast<double>(target_logits.rows()));
}

/// Off-diagonal mass of A = p1 p2^T, computed in closed form as 1 - <p1, p2>.
inline double cdd_pair(std::span<const double> p1, std::span<const double> p2) {
    detail::require(p1.size() == p2.size() && !p1.empty(), "cdd_pair: vectors must have equal nonzero length");
    detail::require_simplex_rows(p1, p1.size(), 1e-6, "cdd_pair");
    detail::require_simplex_rows(p2, p2.size(), 1e-6, "cdd_pair");
    double dot = 0.0;
    for (std::size_t k = 0; k < p1.size(); ++k) dot += p1[k] * p2[k];
    return 1.0 - dot;
}

/// Batch mean of cdd_pair over the row softmaxes of both logit sets.
inline Tensor cdd_batch(const Tensor& logits1, const Tensor& logits2) {
    detail::require(logits1.rank() == 2, "cdd_batch: logits must be [n x K]");
    detail::require_same_shape(logits1, logits2, "cdd_batch");
    const Tensor agree = mul(softmax_rows(logits1), softmax_rows(logits2));
    return add_scalar(scalar_mul(sum(agree), -1.0 / static_cast<double>(logits1.rows())), 1.0);
}

/// Per-branch model outputs for one batch. Branch i pairs target head i with frozen source head i.
struct ObjectiveInputs {
    Tensor logits1;
    Tensor logits2;
    std::vector<std::size_t> labels;
    Tensor source_probs1;
    Tensor source_probs2;
};

/// Every constituent loss, all tape-connected, plus the weighted totals.
struct ObjectiveTerms {
    Tensor lsce1, lsce2;
    Tensor entropy1, entropy2;
    Tensor rce1, rce2;
    Tensor cdd;
    Tensor step1;
    Tensor step2;
};

inline ObjectiveTerms objective_terms(const ObjectiveInputs& in, const LossWeights& w, const SmoothingParams& s,
                                      CddSign sign = CddSign::as_printed) {
    w.validate();
    s.validate();
    ObjectiveTerms t;
    t.lsce1 = lsce(in.logits1, in.labels, s.alpha_smooth);
    t.lsce2 = lsce(in.logits2, in.labels, s.alpha_smooth);
    t.entropy1 = cond_entropy(in.logits1, s.eps_log);
    t.entropy2 = cond_entropy(in.logits2, s.eps_log);
    t.rce1 = rce(in.logits1, in.source_probs1, s.eps_log);
    t.rce2 = rce(in.logits2, in.source_probs2, s.eps_log);
    t.cdd = cdd_batch(in.logits1, in.logits2);
    t.step1 = add(add(scalar_mul(add(t.lsce1, t.lsce2), w.lambda_lsce),
                      scalar_mul(add(t.entropy1, t.entropy2), w.lambda_e)),
                  scalar_mul(add(t.rce1, t.rce2), w.lambda_rce));
    const double cdd_coef = sign == CddSign::as_printed ? -w.lambda_cdd : w.lambda_cdd;
    t.step2 = add(t.step1, scalar_mul(t.cdd, cdd_coef));
    return t;
}

/// lambda_lsce (L1 + L2) + lambda_e (E1 + E2) + lambda_rce (R1 + R2).
inline Tensor step1_objective(const ObjectiveInputs& in, const LossWeights& w, const SmoothingParams& s) {
    return objective_terms(in, w, s).step1;
}

/// step1_objective - lambda_cdd * L_cdd (sign reversed under CddSign::flipped).
inline Tensor step2_objective(const ObjectiveInputs& in, const LossWeights& w, const SmoothingParams& s,
                              CddSign sign = CddSign::as_printed) {
    return objective_terms(in, w, s, sign).step2;
}

}  // namespace act
