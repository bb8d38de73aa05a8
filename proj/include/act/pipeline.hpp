#pragma once

// End-to-end procedures: source pretraining, the alternating two-step adaptation
// loop, evaluation, and seed sweeps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "act/data.hpp"
#include "act/error.hpp"
#include "act/losses.hpp"
#include "act/nn.hpp"
#include "act/optim.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

// ---------------------------------------------------------------------------
// Configuration

struct PretrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    SgdConfig sgd{};
    double lr_multiplier_heads = 1.0;
    double alpha_smooth = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(batch_size >= 1, "pretrain.batch_size must be at least 1");
        detail::require(lr_multiplier_heads > 0.0, "pretrain.lr_multiplier_heads must be positive");
        detail::require(alpha_smooth >= 0.0 && alpha_smooth < 1.0, "pretrain.alpha_smooth must lie in [0, 1)");
        sgd.validate();
    }
    bool operator==(const PretrainConfig&) const = default;
};

/// Per-group learning rates. The base rate is sam.base.lr; each group multiplies it and
/// optionally follows the (1 + 10p)^-0.75 decay.
struct ScheduleConfig {
    double extractor_multiplier = 1.0;
    double heads_multiplier = 1.0;
    bool schedule_extractor = true;
    bool schedule_heads = true;

    bool operator==(const ScheduleConfig&) const = default;
};

/// Which augmented view each branch consumes.
enum class ViewRouting {
    weak_strong,  // branch 1 weak, branch 2 strong
    weak_only,    // both branches weak
    both_views,   // both branches see the weak and the strong view stacked
};

enum class EvalHead { c_t1, mean_of_heads };

enum class StepKind { step1, step2 };

struct AdaptConfig {
    std::size_t total_iterations = 2000;
    std::size_t batch_size = 32;  // clamped to the support size
    LossWeights weights{};
    SmoothingParams smoothing{};
    SamConfig sam{};
    bool use_sam = true;  // false: plain Adam steps
    ScheduleConfig schedule{};
    CddSign cdd_sign = CddSign::as_printed;
    std::size_t step1_repeats = 1;  // Step-1 updates per outer iteration
    std::size_t step2_repeats = 1;  // Step-2 updates per outer iteration
    bool fresh_batch_per_step = true;
    ViewRouting routing = ViewRouting::weak_strong;
    EvalHead eval_head = EvalHead::c_t1;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(total_iterations >= 1, "adapt.total_iterations must be at least 1");
        detail::require(batch_size >= 1, "adapt.batch_size must be at least 1");
        detail::require(schedule.extractor_multiplier > 0.0 && schedule.heads_multiplier > 0.0,
                        "adapt.schedule multipliers must be positive");
        weights.validate();
        smoothing.validate();
        sam.validate();
    }
    bool operator==(const AdaptConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Reports

struct IterationRecord {
    std::size_t iteration = 0;
    StepKind step_kind = StepKind::step1;
    double loss_total = 0.0;
    double lsce = 0.0;     // branch 1 + branch 2
    double entropy = 0.0;  // branch 1 + branch 2
    double rce = 0.0;      // branch 1 + branch 2
    double cdd = 0.0;
    double lr = 0.0;  // base rate after scheduling, before group multipliers
};

struct Metrics {
    double overall_accuracy = 0.0;
    std::vector<std::optional<double>> per_class_accuracy;  // nullopt for classes absent from the test set
    double per_class_mean = 0.0;                            // over present classes
    std::vector<std::vector<std::size_t>> confusion;        // [true][predicted]
    std::vector<std::size_t> class_counts;
};

struct Provenance {
    std::map<std::string, std::uint64_t> seeds;
    std::string config_hash;
    std::map<std::string, std::string> checkpoints;
};

struct RunReport {
    std::vector<IterationRecord> trace;
    Metrics adapted;
    Metrics no_adapt;
    std::size_t support_size = 0;
    std::size_t effective_batch_size = 0;
    std::uint64_t source_fingerprint_before = 0;
    std::uint64_t source_fingerprint_after = 0;
    Provenance provenance;

    double overall_accuracy() const { return adapted.overall_accuracy; }
    double no_adapt_accuracy() const { return no_adapt.overall_accuracy; }
};

/// Thrown when an adaptation loss goes non-finite. Holds the parameters from the last completed update.
class AdaptAborted : public DivergenceError {
public:
    AdaptAborted(const std::string& what, std::size_t iteration, ModelBundle last_good, RunReport partial)
        : DivergenceError(what, iteration), last_good(std::move(last_good)), partial(std::move(partial)) {}
    ModelBundle last_good;
    RunReport partial;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Argmax over the chosen head's softmax; ties go to the lowest class index.
inline std::vector<std::size_t> predict(const ModelBundle& model, const Tensor& x, EvalHead head = EvalHead::c_t1) {
    const auto logits = forward_target(model, x.detach());
    const Tensor p1 = softmax_rows(logits.logits1.detach());
    const Tensor p2 = softmax_rows(logits.logits2.detach());
    const std::size_t n = p1.rows(), k = p1.cols();
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_p = -1.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double p = head == EvalHead::c_t1 ? p1.at(i, j) : 0.5 * (p1.at(i, j) + p2.at(i, j));
            if (p > best_p) {
                best_p = p;
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

inline Metrics metrics_from_predictions(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                                        std::size_t num_classes) {
    detail::require(!truth.empty(), "evaluate: empty test set");
    detail::require(truth.size() == pred.size(), "evaluate: prediction count mismatch");
    Metrics m;
    m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    m.class_counts.assign(num_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++m.confusion.at(truth[i]).at(pred[i]);
        ++m.class_counts[truth[i]];
        correct += truth[i] == pred[i];
    }
    m.overall_accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (m.class_counts[c] == 0) {
            m.per_class_accuracy.emplace_back();
            continue;
        }
        const double acc = static_cast<double>(m.confusion[c][c]) / static_cast<double>(m.class_counts[c]);
        m.per_class_accuracy.emplace_back(acc);
        sum += acc;
        ++present;
    }
    m.per_class_mean = sum / static_cast<double>(present);
    return m;
}

inline Metrics evaluate(const ModelBundle& model, const LabeledSet& test, EvalHead head = EvalHead::c_t1) {
    detail::require(test.size() > 0, "evaluate: empty test set");
    detail::require(test.dim == model.spec.input_dim, "evaluate: data has " + std::to_string(test.dim) +
                                                          " features, model expects " +
                                                          std::to_string(model.spec.input_dim));
    detail::require(test.num_classes <= model.spec.num_classes, "evaluate: data has more classes than the model");
    std::vector<std::size_t> all(test.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return metrics_from_predictions(test.labels, predict(model, rows_tensor(test, all), head),
                                    model.spec.num_classes);
}

// ---------------------------------------------------------------------------
// Source pretraining

struct PretrainResult {
    ModelBundle checkpoint;
    std::vector<double> epoch_loss;  // mean minibatch loss per epoch
    double train_accuracy = 0.0;
};

/// Minimizes LSCE of both heads on source batches with SGD + momentum.
inline PretrainResult pretrain_source(const LabeledSet& source, const MlpSpec& spec, const PretrainConfig& cfg) {
    cfg.validate();
    detail::require(source.size() > 0, "pretrain_source: empty source set");
    detail::require(source.dim == spec.input_dim, "pretrain_source: source dimension does not match the model");
    detail::require(source.num_classes <= spec.num_classes, "pretrain_source: more source classes than model outputs");

    PretrainResult result{build(spec), {}, 0.0};
    ModelBundle& model = result.checkpoint;
    Sgd sgd(cfg.sgd);
    std::vector<ParamGroup> groups{
        {extractor_params(model.target), 1.0, std::nullopt},
        {trainable_params(model, ParamScope::classifiers_only), cfg.lr_multiplier_heads, std::nullopt},
    };
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        std::size_t count = 0;
        for (const auto& idx : batches(source, cfg.batch_size, cfg.seed, epoch)) {
            const Tensor x = rows_tensor(source, idx);
            const auto y = labels_of(source, idx);
            const auto out = forward_target(model, x);
            const Tensor loss = add(lsce(out.logits1, y, cfg.alpha_smooth), lsce(out.logits2, y, cfg.alpha_smooth));
            if (!std::isfinite(loss.item()))
                throw DivergenceError("pretrain_source: non-finite loss in epoch " + std::to_string(epoch),
                                      epoch);
            zero_grad(groups);
            backward(loss);
            sgd.step(groups);
            total += loss.item();
            ++count;
        }
        result.epoch_loss.push_back(total / static_cast<double>(count));
    }
    zero_grad(groups);
    model.source = model.target;
    model.source.set_requires_grad(false);
    result.train_accuracy = evaluate(model, source).overall_accuracy;
    return result;
}

// ---------------------------------------------------------------------------
// Adaptation

namespace detail {

/// Endless stream of support batches, reshuffled every epoch.
class BatchCursor {
public:
    BatchCursor(const LabeledSet& set, std::size_t batch_size, std::uint64_t seed)
        : set_(set), batch_size_(batch_size), seed_(seed) {}

    std::vector<std::size_t> next() {
        if (pos_ == current_.size()) {
            current_ = batches(set_, batch_size_, seed_, epoch_++);
            pos_ = 0;
        }
        return current_[pos_++];
    }

private:
    const LabeledSet& set_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::vector<std::vector<std::size_t>> current_;
    std::size_t pos_ = 0;
};

/// Inputs for both branches of one batch after augmentation and routing.
struct RoutedBatch {
    Tensor x1, x2;
    std::vector<std::size_t> labels;
    Tensor source_probs1, source_probs2;
};

inline RoutedBatch route_batch(const ModelBundle& model, const LabeledSet& support,
                               const std::vector<std::size_t>& idx, const AugmentPolicy& policy, ViewRouting routing,
                               Rng& rng) {
    std::vector<double> weak, strong;
    for (auto i : idx) {
        const auto w = augment(support.row(i), policy, AugmentTier::weak, rng);
        weak.insert(weak.end(), w.begin(), w.end());
    }
    if (routing != ViewRouting::weak_only)
        for (auto i : idx) {
            const auto s = augment(support.row(i), policy, AugmentTier::strong, rng);
            strong.insert(strong.end(), s.begin(), s.end());
        }
    const std::size_t n = idx.size(), d = support.dim;
    RoutedBatch b;
    b.labels = labels_of(support, idx);
    const Tensor weak_t = Tensor::matrix(n, d, std::move(weak));
    switch (routing) {
        case ViewRouting::weak_strong:
            b.x1 = weak_t;
            b.x2 = Tensor::matrix(n, d, std::move(strong));
            break;
        case ViewRouting::weak_only:
            b.x1 = b.x2 = weak_t;
            break;
        case ViewRouting::both_views: {
            b.x1 = b.x2 = concat_rows(weak_t, Tensor::matrix(n, d, std::move(strong)));
            auto twice = b.labels;
            b.labels.insert(b.labels.end(), twice.begin(), twice.end());
            break;
        }
    }
    const auto q = forward_source(model, b.x1, b.x2);
    b.source_probs1 = softmax_rows(q.logits1);
    b.source_probs2 = softmax_rows(q.logits2);
    return b;
}

}  // namespace detail

/// Runs the two-step adaptation starting from a source checkpoint and returns the
/// adapted bundle (frozen side untouched) with its report.
///
/// Per outer iteration: Step 1 minimizes the LSCE + entropy + RCE objective over the
/// extractor and both heads; Step 2 adds the CDD term and updates the heads only,
/// with the extractor held fixed. Both go through SAM unless use_sam is false.
/// Learning-rate progress is iteration / total_iterations.
inline std::pair<ModelBundle, RunReport> adapt(const ModelBundle& source_ckpt, const SupportSplit& split,
                                               const AugmentPolicy& policy, const AdaptConfig& cfg) {
    cfg.validate();
    policy.validate();
    const auto& support = split.support;
    detail::require(support.size() > 0, "adapt: empty support set");
    detail::require(support.dim == source_ckpt.spec.input_dim,
                    "adapt: support has " + std::to_string(support.dim) + " features, checkpoint expects " +
                        std::to_string(source_ckpt.spec.input_dim));
    for (auto y : support.labels)
        detail::require(y < source_ckpt.spec.num_classes,
                        "adapt: support class " + std::to_string(y) + " is unknown to the source model");

    ModelBundle model{source_ckpt.spec, source_ckpt.target, source_ckpt.target};
    model.target.set_requires_grad(true);
    model.source.set_requires_grad(false);

    RunReport report;
    report.support_size = support.size();
    report.effective_batch_size = std::min(cfg.batch_size, support.size());
    report.source_fingerprint_before = source_fingerprint(model);
    report.no_adapt = evaluate(model, split.test, cfg.eval_head);
    report.provenance.seeds["adapt"] = cfg.seed;
    report.provenance.seeds["split"] = split.seed;
    report.provenance.seeds["init"] = source_ckpt.spec.init_seed;

    Adam adam(cfg.sam.base);
    Sam<Adam> sam(cfg.sam.rho, Adam(cfg.sam.base));
    Rng aug_rng(cfg.seed, Stream::augment);
    detail::BatchCursor cursor(support, report.effective_batch_size, cfg.seed);
    const LrSchedule schedule{cfg.sam.base.lr};

    std::vector<ParamGroup> step1_groups{
        {extractor_params(model.target), 1.0, std::nullopt},
        {trainable_params(model, ParamScope::classifiers_only), 1.0, std::nullopt},
    };
    std::vector<ParamGroup> step2_groups{{trainable_params(model, ParamScope::classifiers_only), 1.0, std::nullopt}};

    std::size_t iteration = 0;
    // Components are logged at the pre-update parameters (first closure evaluation).
    auto log_terms = [](IterationRecord& rec, const ObjectiveTerms& t, const Tensor& total) {
        rec.loss_total = total.item();
        rec.lsce = t.lsce1.item() + t.lsce2.item();
        rec.entropy = t.entropy1.item() + t.entropy2.item();
        rec.rce = t.rce1.item() + t.rce2.item();
        rec.cdd = t.cdd.item();
    };
    auto checked = [&](const Tensor& loss, StepKind kind) {
        if (!std::isfinite(loss.item()))
            throw DivergenceError(std::string("adapt: non-finite ") + (kind == StepKind::step1 ? "step-1" : "step-2") +
                                      " loss at iteration " + std::to_string(iteration),
                                  iteration);
        return loss;
    };
    auto finite_logits = [&](const Tensor& logits, StepKind kind) {
        for (double v : logits.data())
            if (!std::isfinite(v))
                throw DivergenceError(std::string("adapt: non-finite logits in ") +
                                          (kind == StepKind::step1 ? "step 1" : "step 2") + " at iteration " +
                                          std::to_string(iteration),
                                      iteration);
    };
    auto run_step = [&](std::span<ParamGroup> groups, auto&& closure) {
        if (cfg.use_sam) return sam.step(groups, closure);
        zero_grad(groups);
        const Tensor loss = closure();
        backward(loss);
        adam.step(groups);
        zero_grad(groups);
        return loss.item();
    };

    try {
        for (; iteration < cfg.total_iterations; ++iteration) {
            const double progress = static_cast<double>(iteration) / static_cast<double>(cfg.total_iterations);
            const double base_lr = cfg.sam.base.lr;
            const double scheduled_lr = schedule.lr_at(progress);
            const double lr_extractor =
                (cfg.schedule.schedule_extractor ? scheduled_lr : base_lr) * cfg.schedule.extractor_multiplier;
            const double lr_heads = (cfg.schedule.schedule_heads ? scheduled_lr : base_lr) * cfg.schedule.heads_multiplier;
            step1_groups[0].lr = lr_extractor;
            step1_groups[1].lr = lr_heads;
            step2_groups[0].lr = lr_heads;

            std::optional<detail::RoutedBatch> last;
            for (std::size_t r = 0; r < cfg.step1_repeats; ++r) {
                last = detail::route_batch(model, support, cursor.next(), policy, cfg.routing, aug_rng);
                const auto& b = *last;
                IterationRecord rec{iteration, StepKind::step1, 0, 0, 0, 0, 0, scheduled_lr};
                bool logged = false;
                auto closure = [&] {
                    const auto out = forward_target(model, b.x1, b.x2);
                    finite_logits(out.logits1, StepKind::step1);
                    finite_logits(out.logits2, StepKind::step1);
                    const ObjectiveInputs in{out.logits1, out.logits2, b.labels, b.source_probs1, b.source_probs2};
                    auto terms = objective_terms(in, cfg.weights, cfg.smoothing, cfg.cdd_sign);
                    if (!logged) {
                        log_terms(rec, terms, terms.step1);
                        logged = true;
                    }
                    return checked(terms.step1, StepKind::step1);
                };
                run_step(step1_groups, closure);
                report.trace.push_back(rec);
            }

            for (std::size_t r = 0; r < cfg.step2_repeats; ++r) {
                if (cfg.fresh_batch_per_step || !last)
                    last = detail::route_batch(model, support, cursor.next(), policy, cfg.routing, aug_rng);
                const auto& b = *last;
                // The extractor is fixed in this step, so its output is a constant.
                const Tensor f1 = extract_features(model.target, b.x1).detach();
                const Tensor f2 = b.x1.id() == b.x2.id() ? f1 : extract_features(model.target, b.x2).detach();
                IterationRecord rec{iteration, StepKind::step2, 0, 0, 0, 0, 0, scheduled_lr};
                bool logged = false;
                auto closure = [&] {
                    const ObjectiveInputs in{model.target.head1(f1), model.target.head2(f2), b.labels,
                                             b.source_probs1, b.source_probs2};
                    finite_logits(in.logits1, StepKind::step2);
                    finite_logits(in.logits2, StepKind::step2);
                    auto terms = objective_terms(in, cfg.weights, cfg.smoothing, cfg.cdd_sign);
                    if (!logged) {
                        log_terms(rec, terms, terms.step2);
                        logged = true;
                    }
                    return checked(terms.step2, StepKind::step2);
                };
                run_step(step2_groups, closure);
                report.trace.push_back(rec);
            }
        }
    } catch (const DivergenceError& e) {
        report.source_fingerprint_after = source_fingerprint(model);
        throw AdaptAborted(e.what(), iteration, model, report);
    }

    report.source_fingerprint_after = source_fingerprint(model);
    report.adapted = evaluate(model, split.test, cfg.eval_head);
    return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Seed sweeps

/// Everything needed to run one cell of a sweep besides its two seeds.
struct SweepSetup {
    DomainSpec domain;
    MlpSpec model;
    PretrainConfig pretrain;
    AdaptConfig adapt;
    AugmentPolicy augment;
    std::size_t n_way = 2;
    std::size_t k_shot = 5;
};

struct SweepCell {
    std::uint64_t data_seed = 0;
    std::uint64_t model_seed = 0;
    bool ok = false;
    std::string error;
    double no_adapt_accuracy = 0.0;
    double adapted_accuracy = 0.0;
    double no_adapt_macro = 0.0;
    double adapted_macro = 0.0;
};

struct SweepReport {
    std::vector<SweepCell> cells;  // model-seed major, data-seed minor
    std::size_t ok_cells = 0;
    double mean_adapted = 0.0;
    double mean_no_adapt = 0.0;
    double spread = 0.0;    // max - min adapted accuracy over successful cells
    double variance = 0.0;  // population variance of adapted accuracy over successful cells
};

inline void summarize(SweepReport& r) {
    std::vector<double> acc, base;
    for (const auto& c : r.cells)
        if (c.ok) {
            acc.push_back(c.adapted_accuracy);
            base.push_back(c.no_adapt_accuracy);
        }
    r.ok_cells = acc.size();
    if (acc.empty()) return;
    const double n = static_cast<double>(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        r.mean_adapted += acc[i] / n;
        r.mean_no_adapt += base[i] / n;
    }
    const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
    r.spread = *hi - *lo;
    for (double a : acc) r.variance += (a - r.mean_adapted) * (a - r.mean_adapted) / n;
}

/// Full cross product of data seeds (support sampling) and model seeds (initialization
/// and pretraining). One source model is pretrained per model seed. Failed cells are
/// recorded, not rethrown. Cells run on up to `jobs` threads; on_cell, when given, is
/// called under a lock as each cell finishes.
inline SweepReport seed_sweep(const SweepSetup& setup, const std::vector<std::uint64_t>& data_seeds,
                              const std::vector<std::uint64_t>& model_seeds, std::size_t jobs = 1,
                              const std::function<void(const SweepCell&)>& on_cell = {}) {
    detail::require(!data_seeds.empty() && !model_seeds.empty(), "seed_sweep: seed lists must be nonempty");
    const auto [source, target] = make_domain_pair(setup.domain);

    SweepReport report;
    for (auto m : model_seeds)
        for (auto d : data_seeds) report.cells.push_back({d, m, false, {}, 0, 0, 0, 0});

    std::vector<std::optional<ModelBundle>> sources(model_seeds.size());
    std::vector<std::string> source_errors(model_seeds.size());
    std::vector<std::once_flag> pretrained(model_seeds.size());
    std::mutex sink;
    std::atomic<std::size_t> next{0};

    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < report.cells.size();) {
            auto& cell = report.cells[i];
            const std::size_t mi = i / data_seeds.size();
            std::call_once(pretrained[mi], [&] {
                try {
                    MlpSpec spec = setup.model;
                    spec.init_seed = model_seeds[mi];
                    PretrainConfig pc = setup.pretrain;
                    pc.seed = model_seeds[mi];
                    sources[mi] = pretrain_source(source, spec, pc).checkpoint;
                } catch (const std::exception& e) {
                    source_errors[mi] = std::string("pretrain: ") + e.what();
                }
            });
            try {
                if (!sources[mi]) throw std::runtime_error(source_errors[mi]);
                const auto split = sample_support(target, setup.n_way, setup.k_shot, cell.data_seed);
                const auto [model, run] = adapt(*sources[mi], split, setup.augment, setup.adapt);
                cell.no_adapt_accuracy = run.no_adapt.overall_accuracy;
                cell.adapted_accuracy = run.adapted.overall_accuracy;
                cell.no_adapt_macro = run.no_adapt.per_class_mean;
                cell.adapted_macro = run.adapted.per_class_mean;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            if (on_cell) {
                std::lock_guard lock(sink);
                on_cell(cell);
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(jobs, 1, report.cells.size());
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    summarize(report);
    return report;
}

}  // namespace act
