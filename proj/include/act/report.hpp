#pragma once

// Serialized run artifacts.
//
// report.json (format "act-report", version 1): one object with
//   config_hash, config, seeds, checkpoints, support_size, batch_size,
//   source_fingerprint_before/after (16 hex digits), no_adapt and adapted metrics
//   {overall_accuracy, per_class_accuracy (null for absent classes), per_class_mean,
//   class_counts, confusion}, and trace: [{iteration, step, loss_total, lsce,
//   entropy, rce, cdd, lr}].
//
// trace.csv columns: iteration,step,loss_total,lsce,entropy,rce,cdd,lr
//
// sweep.csv (version 1) columns:
//   status,data_seed,model_seed,n_way,k_shot,lambda_lsce,lambda_e,lambda_rce,lambda_cdd,rho,
//   no_adapt_acc,adapted_acc,no_adapt_macro,adapted_macro,mean_adapted,spread,variance,error
// One row per cell (status ok|failed) followed by one "aggregate" row whose seed columns
// are empty and whose mean/spread/variance columns summarize adapted_acc over ok cells.

#include <cstdio>
#include <ostream>
#include <string>

#include <json.hpp>

#include "act/config.hpp"
#include "act/nn.hpp"
#include "act/pipeline.hpp"

namespace act {

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline const char* step_name(StepKind k) { return k == StepKind::step1 ? "step1" : "step2"; }

inline nlohmann::json to_json(const Metrics& m) {
    nlohmann::json per_class = nlohmann::json::array();
    for (const auto& a : m.per_class_accuracy) per_class.push_back(a ? nlohmann::json(*a) : nlohmann::json());
    return {
        {"overall_accuracy", m.overall_accuracy},
        {"per_class_accuracy", per_class},
        {"per_class_mean", m.per_class_mean},
        {"class_counts", m.class_counts},
        {"confusion", m.confusion},
    };
}

inline nlohmann::json report_json(const RunReport& r, const ExperimentConfig& cfg) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : r.trace)
        trace.push_back({{"iteration", t.iteration},
                         {"step", step_name(t.step_kind)},
                         {"loss_total", t.loss_total},
                         {"lsce", t.lsce},
                         {"entropy", t.entropy},
                         {"rce", t.rce},
                         {"cdd", t.cdd},
                         {"lr", t.lr}});
    return {
        {"format", "act-report"},
        {"version", 1},
        {"config_hash", r.provenance.config_hash},
        {"config", to_json(cfg)},
        {"seeds", r.provenance.seeds},
        {"checkpoints", r.provenance.checkpoints},
        {"support_size", r.support_size},
        {"batch_size", r.effective_batch_size},
        {"source_fingerprint_before", hex64(r.source_fingerprint_before)},
        {"source_fingerprint_after", hex64(r.source_fingerprint_after)},
        {"no_adapt", to_json(r.no_adapt)},
        {"adapted", to_json(r.adapted)},
        {"trace", trace},
    };
}

inline void write_trace_csv(std::ostream& out, const RunReport& r) {
    out << "iteration,step,loss_total,lsce,entropy,rce,cdd,lr\n";
    for (const auto& t : r.trace)
        out << t.iteration << ',' << step_name(t.step_kind) << ',' << detail::format_double(t.loss_total) << ','
            << detail::format_double(t.lsce) << ',' << detail::format_double(t.entropy) << ','
            << detail::format_double(t.rce) << ',' << detail::format_double(t.cdd) << ','
            << detail::format_double(t.lr) << '\n';
}

inline constexpr const char* sweep_csv_header =
    "status,data_seed,model_seed,n_way,k_shot,lambda_lsce,lambda_e,lambda_rce,lambda_cdd,rho,"
    "no_adapt_acc,adapted_acc,no_adapt_macro,adapted_macro,mean_adapted,spread,variance,error";

namespace detail {
inline std::string csv_text(std::string s) {
    for (auto& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}
}  // namespace detail

inline void write_sweep_csv(std::ostream& out, const SweepReport& sweep, const SweepSetup& setup) {
    const auto& w = setup.adapt.weights;
    auto fixed = [&](std::ostream& os) {
        os << setup.n_way << ',' << setup.k_shot << ',' << detail::format_double(w.lambda_lsce) << ','
           << detail::format_double(w.lambda_e) << ',' << detail::format_double(w.lambda_rce) << ','
           << detail::format_double(w.lambda_cdd) << ',' << detail::format_double(setup.adapt.sam.rho) << ',';
    };
    out << sweep_csv_header << '\n';
    for (const auto& c : sweep.cells) {
        out << (c.ok ? "ok" : "failed") << ',' << c.data_seed << ',' << c.model_seed << ',';
        fixed(out);
        if (c.ok)
            out << detail::format_double(c.no_adapt_accuracy) << ',' << detail::format_double(c.adapted_accuracy) << ','
                << detail::format_double(c.no_adapt_macro) << ',' << detail::format_double(c.adapted_macro);
        else
            out << ",,,";
        out << ",,,," << detail::csv_text(c.error) << '\n';
    }
    out << "aggregate,,,";
    fixed(out);
    if (sweep.ok_cells > 0)
        out << detail::format_double(sweep.mean_no_adapt) << ',' << detail::format_double(sweep.mean_adapted) << ",,,"
            << detail::format_double(sweep.mean_adapted) << ',' << detail::format_double(sweep.spread) << ','
            << detail::format_double(sweep.variance) << ",\n";
    else
        out << ",,,,,,,all cells failed\n";
}

}  // namespace act
