#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "act/act.hpp"
#include "support/gradcheck.hpp"

using namespace act;
using namespace act::testing;

namespace {

// Reference-run pins for the moons30 and longtail_blobs configs (3 data seeds, model seed 7).
constexpr double kMoonsNoAdapt = 0.79059829059829068;
constexpr double kMoonsAdapted = 0.91452991452991461;
constexpr double kLongtailNoAdaptMacro = 0.6333333333333333;
constexpr double kLongtailAdaptedMacro = 0.88070175438596499;
// full, no_cdd, no_rce, weak_only, rho0
constexpr double kAblationMeans[5] = {0.91452991452991461, 0.91367521367521376, 0.91196581196581183,
                                      0.9111111111111112, 0.91025641025641013};
constexpr double kPinTol = 1e-9;

constexpr double kElevenPow = 0.16556002607617017259;  // 11^-0.75
constexpr double kSamQuadratic = 0.89;
const std::vector<std::uint64_t> kDataSeeds{0, 1, 2};

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::size_t jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string config_path(const char* name) { return std::string(ACT_EXAMPLE_CONFIG_DIR) + "/" + name; }

bool pinned(double v, double pin) { return std::abs(v - pin) <= kPinTol; }

Tensor bounded_logits(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<double> v(n * k);
    for (auto& x : v) x = rng.uniform(-3.0, 3.0);
    return Tensor::matrix(n, k, std::move(v), true);
}

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(2024);
    double worst = 0.0;
    std::string where;
    const LossWeights w{1.0, 0.3, 0.3, 1.0};
    const SmoothingParams s{0.1, 1e-5};
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(4);
        auto l1 = bounded_logits(rng, n, k), l2 = bounded_logits(rng, n, k);
        const auto y = random_labels(rng, n, k);
        const auto q1 = random_simplex_rows(rng, n, k), q2 = random_simplex_rows(rng, n, k);
        const std::vector<std::pair<const char*, std::function<Tensor(const std::vector<Tensor>&)>>> cases{
            {"lsce", [&](const std::vector<Tensor>& in) { return lsce(in[0], y, 0.1); }},
            {"cond_entropy", [&](const std::vector<Tensor>& in) { return cond_entropy(in[0], 1e-5); }},
            {"rce", [&](const std::vector<Tensor>& in) { return rce(in[0], q1, 1e-5); }},
            {"cdd_batch", [&](const std::vector<Tensor>& in) { return cdd_batch(in[0], in[1]); }},
            {"step1_objective",
             [&](const std::vector<Tensor>& in) { return step1_objective({in[0], in[1], y, q1, q2}, w, s); }},
            {"step2_objective",
             [&](const std::vector<Tensor>& in) { return step2_objective({in[0], in[1], y, q1, q2}, w, s); }},
        };
        for (const auto& [name, f] : cases) {
            const auto r = check_gradients(f, {l1, l2});
            if (r.max_rel_error > worst) {
                worst = r.max_rel_error;
                where = std::string(name) + " " + r.worst;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst < 1e-4 && secs < 10.0,
            "max_rel_err=" + fmt("%.3g", worst) + (where.empty() ? "" : " (" + where + ")") + " time=" +
                fmt("%.2fs", secs)};
}

Outcome cdd_algebra() {
    Rng rng(11);
    double worst = 0.0;
    bool in_range = true;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t k = 2 + rng.below(9);
        const auto p1 = random_simplex(rng, k), p2 = random_simplex(rng, k);
        double total = 0.0, diag = 0.0;
        for (std::size_t m = 0; m < k; ++m)
            for (std::size_t n = 0; n < k; ++n) {
                total += p1[m] * p2[n];
                if (m == n) diag += p1[m] * p2[n];
            }
        const double g = cdd_pair(p1, p2);
        worst = std::max(worst, std::abs(g - (total - diag)));
        in_range = in_range && g >= 0.0 && g <= 1.0;
    }
    bool extremes = true;
    for (std::size_t k = 2; k <= 10; ++k)
        for (std::size_t a = 0; a < k; ++a) {
            std::vector<double> ea(k, 0.0), eb(k, 0.0);
            ea[a] = 1.0;
            eb[(a + 1) % k] = 1.0;
            extremes = extremes && cdd_pair(ea, ea) == 0.0 && cdd_pair(ea, eb) == 1.0;
        }
    return {worst <= 1e-12 && in_range && extremes,
            "max_abs_err=" + fmt("%.3g", worst) + " range_ok=" + (in_range ? "yes" : "no") +
                " extremes_exact=" + (extremes ? "yes" : "no")};
}

Outcome loss_identities() {
    Rng rng(5);
    double ce_err = 0.0, lnk_err = 0.0, ent_err = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.below(8), k = 2 + rng.below(9);
        const auto x = random_matrix(rng, n, k, 3.0, false);
        const auto y = random_labels(rng, n, k);
        double ce = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double mx = x.at(i, 0);
            for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x.at(i, j));
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) z += std::exp(x.at(i, j) - mx);
            ce += (mx + std::log(z) - x.at(i, y[i])) / static_cast<double>(n);
        }
        ce_err = std::max(ce_err, std::abs(lsce(x, y, 0.0).item() - ce));
    }
    for (std::size_t k = 2; k <= 10; ++k) {
        const auto u = Tensor::zeros({4, k});
        std::vector<std::size_t> y{0, 1, k - 1, 0};
        lnk_err = std::max(lnk_err, std::abs(lsce(u, y, 0.1).item() - std::log(static_cast<double>(k))));
        const double kd = static_cast<double>(k);
        const double expected = -kd * (1.0 / kd) * std::log(1.0 / kd + 1e-5);
        ent_err = std::max(ent_err, std::abs(cond_entropy(u, 1e-5).item() - expected));
    }
    return {ce_err <= 1e-12 && lnk_err <= 1e-12 && ent_err <= 1e-6,
            "ce_err=" + fmt("%.3g", ce_err) + " lnk_err=" + fmt("%.3g", lnk_err) + " entropy_err=" +
                fmt("%.3g", ent_err)};
}

Outcome sam_contract() {
    const auto cfg = load_config(config_path("moons30.json"));
    const auto [source, target] = make_domain_pair(cfg.domain);
    const auto ckpt = pretrain_source(source, cfg.model, cfg.pretrain).checkpoint;
    const auto split = sample_support(target, cfg.n_way, cfg.k_shot, cfg.split_seed);
    auto sam0 = cfg.adapt;
    sam0.total_iterations = 100;
    sam0.sam.rho = 0.0;
    auto plain = sam0;
    plain.use_sam = false;
    const auto a = adapt(ckpt, split, cfg.augment, sam0).first;
    const auto b = adapt(ckpt, split, cfg.augment, plain).first;
    bool identical = true;
    const auto pa = a.target.named_params(), pb = b.target.named_params();
    for (std::size_t i = 0; i < pa.size(); ++i)
        identical = identical && std::memcmp(pa[i].second.data().data(), pb[i].second.data().data(),
                                             pa[i].second.numel() * sizeof(double)) == 0;

    auto w = Tensor::scalar(1.0, true);
    std::vector<ParamGroup> groups{{{w}, 1.0, std::nullopt}};
    Sam<Sgd> sam(0.1, Sgd({0.1, 0.0, 0.0}));
    sam.step(groups, [&] { return scalar_mul(mul(w, w), 0.5); });
    const double err = std::abs(w.item() - kSamQuadratic);
    return {identical && err <= 1e-12,
            std::string("rho0_bitwise=") + (identical ? "yes" : "no") + " quadratic=" + fmt("%.15f", w.item())};
}

Outcome scheduler() {
    const double eta0 = 0.01;
    const LrSchedule s{eta0};
    const bool start = s.lr_at(0.0) == eta0;
    const double err = std::abs(s.lr_at(1.0) / eta0 - kElevenPow);
    return {start && err <= 1e-12,
            std::string("lr_at(0)==eta0: ") + (start ? "yes" : "no") + " end_ratio_err=" + fmt("%.3g", err)};
}

Outcome split_protocol() {
    Rng rng(31337);
    std::size_t ok = 0, errored = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t classes = 2 + rng.below(5);
        LabeledSet t{2, classes, {}, {}, "t"};
        std::vector<std::size_t> counts(classes);
        for (auto& c : counts) c = 1 + rng.below(12);
        for (std::size_t c = 0; c < classes; ++c)
            for (std::size_t i = 0; i < counts[c]; ++i) t.push(std::vector<double>{rng.normal(), rng.normal()}, c);
        const std::size_t smallest = *std::min_element(counts.begin(), counts.end());
        const std::size_t k = 1 + rng.below(smallest + 3);
        if (k > smallest) {
            try {
                sample_support(t, classes, k, trial);
                return {false, "trial " + std::to_string(trial) + ": K above the smallest class did not error"};
            } catch (const ContractViolation&) {
                ++errored;
            }
            continue;
        }
        const auto split = sample_support(t, classes, k, trial);
        std::set<std::size_t> sup(split.support_indices.begin(), split.support_indices.end());
        std::set<std::size_t> tst(split.test_indices.begin(), split.test_indices.end());
        bool good = sup.size() == split.support_indices.size() && tst.size() == split.test_indices.size() &&
                    sup.size() + tst.size() == t.size() && sup.size() == classes * k;
        for (auto i : sup) good = good && !tst.count(i);
        for (auto c : split.support.class_counts()) good = good && c == k;
        if (!good) return {false, "trial " + std::to_string(trial) + " broke an invariant"};
        ++ok;
    }
    return {errored > 0 && ok > 0,
            "valid_trials=" + std::to_string(ok) + " expected_errors=" + std::to_string(errored)};
}

struct MoonsRun {
    SweepReport report;
    double seconds_per_seed = 0.0;
};

const MoonsRun& moons_reference() {
    static const MoonsRun run = [] {
        const auto cfg = load_config(config_path("moons30.json"));
        const auto t0 = std::chrono::steady_clock::now();
        auto r = seed_sweep(cfg.sweep_setup(), kDataSeeds, {cfg.model.init_seed}, 1);
        return MoonsRun{std::move(r), seconds_since(t0) / static_cast<double>(kDataSeeds.size())};
    }();
    return run;
}

Outcome moons_gain() {
    const auto& run = moons_reference();
    const auto& r = run.report;
    if (r.ok_cells != kDataSeeds.size()) return {false, "failed cells: " + std::to_string(r.cells.size() - r.ok_cells)};
    const double gain = r.mean_adapted - r.mean_no_adapt;
    const bool pins = pinned(r.mean_no_adapt, kMoonsNoAdapt) && pinned(r.mean_adapted, kMoonsAdapted);
    return {gain >= 0.10 && r.mean_adapted >= 0.85 && run.seconds_per_seed < 120.0 && pins,
            "no_adapt=" + fmt("%.4f", r.mean_no_adapt) + " adapted=" + fmt("%.4f", r.mean_adapted) +
                " gain=" + fmt("%.4f", gain) + " per_seed=" + fmt("%.1fs", run.seconds_per_seed) +
                " pins=" + (pins ? "match" : "DIFFER")};
}

Outcome longtail_gain() {
    const auto cfg = load_config(config_path("longtail_blobs.json"));
    const auto r = seed_sweep(cfg.sweep_setup(), kDataSeeds, {cfg.model.init_seed}, jobs());
    if (r.ok_cells != kDataSeeds.size()) return {false, "failed cells: " + std::to_string(r.cells.size() - r.ok_cells)};
    double base = 0.0, adapted = 0.0;
    for (const auto& c : r.cells) {
        base += c.no_adapt_macro / static_cast<double>(r.cells.size());
        adapted += c.adapted_macro / static_cast<double>(r.cells.size());
    }
    const bool pins = pinned(base, kLongtailNoAdaptMacro) && pinned(adapted, kLongtailAdaptedMacro);
    return {adapted - base >= 0.10 && pins,
            "no_adapt_macro=" + fmt("%.4f", base) + " adapted_macro=" + fmt("%.4f", adapted) + " gain=" +
                fmt("%.4f", adapted - base) + " pins=" + (pins ? "match" : "DIFFER")};
}

Outcome seed_spread() {
    const auto& r = moons_reference().report;
    if (r.ok_cells != kDataSeeds.size()) return {false, "failed cells"};
    std::string accs;
    for (const auto& c : r.cells) accs += (accs.empty() ? "" : "/") + fmt("%.4f", c.adapted_accuracy);
    return {r.spread <= 0.05, "spread=" + fmt("%.4f", r.spread) + " adapted=" + accs};
}

Outcome ablations() {
    const auto cfg = load_config(config_path("moons30.json"));
    const char* names[5] = {"full", "no_cdd", "no_rce", "weak_only", "rho0"};
    double means[5];
    means[0] = moons_reference().report.mean_adapted;
    for (int a = 1; a < 5; ++a) {
        auto setup = cfg.sweep_setup();
        if (a == 1) setup.adapt.weights.lambda_cdd = 0.0;
        if (a == 2) setup.adapt.weights.lambda_rce = 0.0;
        if (a == 3) setup.adapt.routing = ViewRouting::weak_only;
        if (a == 4) setup.adapt.sam.rho = 0.0;
        const auto r = seed_sweep(setup, kDataSeeds, {cfg.model.init_seed}, jobs());
        if (r.ok_cells != kDataSeeds.size()) return {false, std::string(names[a]) + ": failed cells"};
        means[a] = r.mean_adapted;
    }
    bool within = true, full_max = true, pins = true;
    std::string detail;
    for (int a = 0; a < 5; ++a) {
        detail += std::string(a ? " " : "") + names[a] + "=" + fmt("%.4f", means[a]);
        within = within && means[a] - means[0] <= 0.01;
        full_max = full_max && means[a] <= means[0];
        pins = pins && pinned(means[a], kAblationMeans[a]);
    }
    return {within && full_max && pins, detail + " full_is_max=" + (full_max ? "yes" : "no") + " pins=" +
                                            (pins ? "match" : "DIFFER")};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
        {"gradient suite", gradient_suite},   {"cdd algebra", cdd_algebra},
        {"loss identities", loss_identities}, {"sam contract", sam_contract},
        {"lr scheduler", scheduler},          {"split protocol", split_protocol},
        {"moons adaptation gain", moons_gain}, {"long-tail macro gain", longtail_gain},
        {"seed spread", seed_spread},         {"ablation direction", ablations},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s  %2zu %-22s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
