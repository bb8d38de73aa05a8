#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "act/error.hpp"
#include "act/tensor.hpp"

namespace act {

struct SgdConfig {
    double lr = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;

    void validate() const {
        detail::require(lr > 0.0, "sgd.lr must be positive");
        detail::require(momentum >= 0.0 && momentum < 1.0, "sgd.momentum must lie in [0, 1)");
        detail::require(weight_decay >= 0.0, "sgd.weight_decay must be nonnegative");
    }
    bool operator==(const SgdConfig&) const = default;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_adam = 1e-8;

    void validate() const {
        detail::require(lr > 0.0, "adam.lr must be positive");
        detail::require(beta1 >= 0.0 && beta1 < 1.0, "adam.beta1 must lie in [0, 1)");
        detail::require(beta2 >= 0.0 && beta2 < 1.0, "adam.beta2 must lie in [0, 1)");
        detail::require(eps_adam > 0.0, "adam.eps_adam must be positive");
    }
    bool operator==(const AdamConfig&) const = default;
};

struct SamConfig {
    double rho = 0.05;
    AdamConfig base;

    void validate() const {
        detail::require(rho >= 0.0, "sam.rho must be nonnegative");
        base.validate();
    }
    bool operator==(const SamConfig&) const = default;
};

/// eta(p) = eta0 * (1 + 10 p)^-0.75 for training progress p in [0, 1].
struct LrSchedule {
    static constexpr double slope = 10.0;
    static constexpr double exponent = -0.75;
    double eta0 = 1e-3;

    double lr_at(double progress) const {
        detail::require(progress >= 0.0 && progress <= 1.0,
                        "lr schedule progress " + std::to_string(progress) + " outside [0, 1]");
        return eta0 * std::pow(1.0 + slope * progress, exponent);
    }
    bool operator==(const LrSchedule&) const = default;
};

/// Parameters sharing one learning rate. An explicit lr wins over the optimizer's
/// (possibly overridden) rate; otherwise that rate is multiplied by lr_scale.
struct ParamGroup {
    std::vector<Tensor> params;
    double lr_scale = 1.0;
    std::optional<double> lr;

    double effective_lr(double base) const { return lr.value_or(base * lr_scale); }
};

namespace detail {

inline void require_grads(std::span<const ParamGroup> groups, const char* who) {
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::size_t i = 0; i < groups[g].params.size(); ++i)
            require(groups[g].params[i].has_grad(), std::string(who) + ": parameter " + std::to_string(i) +
                                                        " of group " + std::to_string(g) + " has no gradient");
}

}  // namespace detail

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
/// v <- momentum v + (g + wd w);  w <- w - lr v
class Sgd {
public:
    explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(std::span<ParamGroup> groups, std::optional<double> lr_override = std::nullopt) {
        detail::require_grads(groups, "sgd_step");
        const double base_lr = lr_override.value_or(cfg_.lr);
        for (auto& group : groups) {
            const double lr = group.effective_lr(base_lr);
            for (auto& p : group.params) {
                auto& v = velocity_[p.id()];
                auto w = p.mutable_data();
                const auto g = p.grad();
                if (v.empty()) v.assign(w.size(), 0.0);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = cfg_.momentum * v[i] + (g[i] + cfg_.weight_decay * w[i]);
                    w[i] -= lr * v[i];
                }
            }
        }
    }

    const SgdConfig& config() const { return cfg_; }

private:
    SgdConfig cfg_;
    std::unordered_map<const void*, std::vector<double>> velocity_;
};

/// Adam with bias-corrected moments. State (and the step counter) is per parameter.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void step(std::span<ParamGroup> groups, std::optional<double> lr_override = std::nullopt) {
        detail::require_grads(groups, "adam_step");
        const double base_lr = lr_override.value_or(cfg_.lr);
        for (auto& group : groups) {
            const double lr = group.effective_lr(base_lr);
            for (auto& p : group.params) {
                auto& s = slots_[p.id()];
                auto w = p.mutable_data();
                const auto g = p.grad();
                if (s.m.empty()) {
                    s.m.assign(w.size(), 0.0);
                    s.v.assign(w.size(), 0.0);
                }
                ++s.t;
                const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
                const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
                for (std::size_t i = 0; i < w.size(); ++i) {
                    s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
                    s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                    const double m_hat = s.m[i] / c1;
                    const double v_hat = s.v[i] / c2;
                    w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps_adam);
                }
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }

private:
    struct Slot {
        std::vector<double> m, v;
        std::uint64_t t = 0;
    };
    AdamConfig cfg_;
    std::unordered_map<const void*, Slot> slots_;
};

inline void zero_grad(std::span<ParamGroup> groups) {
    for (auto& g : groups) zero_grad(g.params);
}

/// Sharpness-aware minimization around any base optimizer with step(groups, lr).
///
/// One step: gradient g at w, move to w + rho g / (||g|| + 1e-12) using the global
/// norm over all groups, take the gradient there, restore w exactly, and let the
/// base optimizer apply the perturbed-point gradient. Gradients are zeroed before
/// each evaluation and after the update.
template <class Base>
class Sam {
public:
    Sam(double rho, Base base) : rho_(rho), base_(std::move(base)) {
        detail::require(rho >= 0.0, "sam.rho must be nonnegative");
    }

    /// Leaves the perturbed-point gradient in every parameter's grad and the
    /// parameters at their original values. Returns the loss at the original point.
    template <class Closure>
    double adversarial_gradient(std::span<ParamGroup> groups, Closure&& closure) {
        zero_grad(groups);
        const Tensor loss = closure();
        backward(loss);
        const double value = loss.item();
        detail::require_grads(groups, "sam_step");

        double sq = 0.0;
        for (auto& g : groups)
            for (auto& p : g.params)
                for (double v : p.grad()) sq += v * v;
        const double scale = rho_ / (std::sqrt(sq) + 1e-12);

        std::vector<std::vector<double>> saved;
        for (auto& g : groups)
            for (auto& p : g.params) {
                saved.emplace_back(p.data().begin(), p.data().end());
                auto w = p.mutable_data();
                const auto grad = p.grad();
                for (std::size_t i = 0; i < w.size(); ++i) w[i] += scale * grad[i];
            }

        struct Restore {
            std::span<ParamGroup> groups;
            std::vector<std::vector<double>>& saved;
            ~Restore() {
                std::size_t k = 0;
                for (auto& g : groups)
                    for (auto& p : g.params) {
                        auto w = p.mutable_data();
                        std::copy(saved[k].begin(), saved[k].end(), w.begin());
                        ++k;
                    }
            }
        } restore{groups, saved};

        zero_grad(groups);
        backward(closure());
        return value;
    }

    template <class Closure>
    double step(std::span<ParamGroup> groups, Closure&& closure, std::optional<double> lr_override = std::nullopt) {
        const double value = adversarial_gradient(groups, std::forward<Closure>(closure));
        base_.step(groups, lr_override);
        zero_grad(groups);
        return value;
    }

    double rho() const { return rho_; }
    Base& base() { return base_; }

private:
    double rho_;
    Base base_;
};

}  // namespace act
