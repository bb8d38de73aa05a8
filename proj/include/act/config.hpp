#pragma once

// Experiment configuration as a JSON document. Parsing is strict: unknown keys and
// type mismatches are errors reported with the offending field path. Writing emits
// every field, so a printed config re-parses to an equal value.

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "act/data.hpp"
#include "act/error.hpp"
#include "act/nn.hpp"
#include "act/pipeline.hpp"
#include "act/rng.hpp"

namespace act {

struct ExperimentConfig {
    std::string run_id = "run";
    std::string output_dir = "runs";
    std::size_t n_way = 2;
    std::size_t k_shot = 5;
    std::uint64_t split_seed = 0;
    DomainSpec domain;
    MlpSpec model;
    PretrainConfig pretrain;
    AdaptConfig adapt;
    AugmentPolicy augment;

    void validate() const {
        detail::require(!run_id.empty(), "run_id must be nonempty");
        for (char c : run_id)
            detail::require(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.',
                            "run_id may only contain letters, digits, '-', '_' and '.'");
        detail::require(run_id != "." && run_id != "..", "run_id must name a directory");
        detail::require(k_shot >= 1, "k_shot must be at least 1");
        domain.validate();
        model.validate();
        detail::require(model.input_dim == domain.dim, "model.input_dim must equal domain.dim");
        detail::require(model.num_classes >= domain.num_classes, "model.num_classes must cover domain.num_classes");
        pretrain.validate();
        adapt.validate();
        augment.validate();
    }

    SweepSetup sweep_setup() const { return {domain, model, pretrain, adapt, augment, n_way, k_shot}; }

    bool operator==(const ExperimentConfig&) const = default;
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(path) {}
    const std::string& field() const noexcept { return path_; }

private:
    std::string path_;
};

namespace detail {

using nlohmann::json;

/// Walks one JSON object, recording which keys were consumed.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
    /// Rejects any key that no req/opt/object/enumeration call consumed.
    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(child(key), "unknown key");
    }

    template <class T>
    void req(const char* key, T& out) {
        if (!j_.contains(key)) throw ConfigError(child(key), "missing required field");
        get(key, out);
    }

    template <class T>
    void opt(const char* key, T& out) {
        if (j_.contains(key)) get(key, out);
    }

    /// Nested object; fn receives a reader for it. Absent objects keep their defaults unless required.
    template <class Fn>
    void object(const char* key, bool required, Fn&& fn) {
        if (!j_.contains(key)) {
            if (required) throw ConfigError(child(key), "missing required field");
            return;
        }
        seen_.insert(key);
        ObjectReader sub(j_.at(key), child(key));
        fn(sub);
        sub.finish();
    }

    template <class E>
    void enumeration(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names, bool required) {
        if (!j_.contains(key)) {
            if (required) throw ConfigError(child(key), "missing required field");
            return;
        }
        seen_.insert(key);
        const auto& v = j_.at(key);
        if (v.is_string())
            for (const auto& [name, value] : names)
                if (v.get<std::string>() == name) {
                    out = value;
                    return;
                }
        std::string allowed;
        for (const auto& [name, _] : names) allowed += std::string(allowed.empty() ? "" : ", ") + name;
        throw ConfigError(child(key), "expected one of {" + allowed + "}");
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError(child(key), "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned()))
                    throw ConfigError(child(key), "expected a nonnegative integer");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError(child(key), "expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw ConfigError(child(key), "expected a string");
            } else {
                if (!v.is_array()) throw ConfigError(child(key), "expected an array");
                for (const auto& e : v)
                    if (!e.is_number() ||
                        (std::is_integral_v<typename T::value_type> && !e.is_number_unsigned()))
                        throw ConfigError(child(key), "array entries have the wrong type");
            }
            out = v.get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(child(key), e.what());
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& d = c.domain;
    const auto& a = c.adapt;
    json j;
    j["run_id"] = c.run_id;
    j["output_dir"] = c.output_dir;
    j["n_way"] = c.n_way;
    j["k_shot"] = c.k_shot;
    j["split_seed"] = c.split_seed;
    j["domain"] = {
        {"generator", d.generator == Generator::two_moons ? "two_moons" : "gaussian_blobs"},
        {"dim", d.dim},
        {"num_classes", d.num_classes},
        {"samples_per_class", d.samples_per_class},
        {"target_samples_per_class", d.target_samples_per_class},
        {"blob_radius", d.blob_radius},
        {"shift",
         {{"rotation_deg", d.shift.rotation_deg},
          {"translation", d.shift.translation},
          {"noise_sigma", d.shift.noise_sigma}}},
        {"label_space_mode", d.label_space_mode == LabelSpaceMode::closed_set ? "closed_set" : "partial_set"},
        {"target_classes", d.target_classes},
        {"seed", d.seed},
    };
    j["model"] = {
        {"input_dim", c.model.input_dim},     {"hidden_dims", c.model.hidden_dims},
        {"feature_dim", c.model.feature_dim}, {"num_classes", c.model.num_classes},
        {"activation", "relu"},               {"init_seed", c.model.init_seed},
    };
    j["pretrain"] = {
        {"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"sgd",
         {{"lr", c.pretrain.sgd.lr},
          {"momentum", c.pretrain.sgd.momentum},
          {"weight_decay", c.pretrain.sgd.weight_decay}}},
        {"lr_multiplier_heads", c.pretrain.lr_multiplier_heads},
        {"alpha_smooth", c.pretrain.alpha_smooth},
        {"seed", c.pretrain.seed},
    };
    j["adapt"] = {
        {"total_iterations", a.total_iterations},
        {"batch_size", a.batch_size},
        {"weights",
         {{"lambda_lsce", a.weights.lambda_lsce},
          {"lambda_e", a.weights.lambda_e},
          {"lambda_rce", a.weights.lambda_rce},
          {"lambda_cdd", a.weights.lambda_cdd}}},
        {"smoothing", {{"alpha_smooth", a.smoothing.alpha_smooth}, {"eps_log", a.smoothing.eps_log}}},
        {"sam",
         {{"rho", a.sam.rho},
          {"base",
           {{"lr", a.sam.base.lr},
            {"beta1", a.sam.base.beta1},
            {"beta2", a.sam.base.beta2},
            {"eps_adam", a.sam.base.eps_adam}}}}},
        {"use_sam", a.use_sam},
        {"schedule",
         {{"extractor_multiplier", a.schedule.extractor_multiplier},
          {"heads_multiplier", a.schedule.heads_multiplier},
          {"schedule_extractor", a.schedule.schedule_extractor},
          {"schedule_heads", a.schedule.schedule_heads}}},
        {"cdd_sign", a.cdd_sign == CddSign::as_printed ? "as_printed" : "flipped"},
        {"step1_repeats", a.step1_repeats},
        {"step2_repeats", a.step2_repeats},
        {"fresh_batch_per_step", a.fresh_batch_per_step},
        {"routing", a.routing == ViewRouting::weak_strong ? "weak_strong"
                    : a.routing == ViewRouting::weak_only ? "weak_only"
                                                          : "both_views"},
        {"eval_head", a.eval_head == EvalHead::c_t1 ? "c_t1" : "mean_of_heads"},
        {"seed", a.seed},
    };
    j["augment"] = {
        {"weak", {{"jitter_sigma", c.augment.weak.jitter_sigma}, {"flip_axis_prob", c.augment.weak.flip_axis_prob}}},
        {"strong",
         {{"jitter_sigma", c.augment.strong.jitter_sigma},
          {"scale_range", {c.augment.strong.scale_lo, c.augment.strong.scale_hi}},
          {"feature_drop_prob", c.augment.strong.feature_drop_prob},
          {"num_ops", c.augment.strong.num_ops}}},
    };
    return j;
}

/// Required: run_id, output_dir, n_way, k_shot, and the domain and model sections with their
/// shape-defining fields. Everything else falls back to the library defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    {
        detail::ObjectReader r(j, "");
        r.req("run_id", c.run_id);
        r.req("output_dir", c.output_dir);
        r.req("n_way", c.n_way);
        r.req("k_shot", c.k_shot);
        r.opt("split_seed", c.split_seed);
        r.object("domain", true, [&](detail::ObjectReader& d) {
            auto& s = c.domain;
            d.enumeration("generator", s.generator,
                          {{"two_moons", Generator::two_moons}, {"gaussian_blobs", Generator::gaussian_blobs}}, true);
            d.req("dim", s.dim);
            d.req("num_classes", s.num_classes);
            d.req("samples_per_class", s.samples_per_class);
            d.opt("target_samples_per_class", s.target_samples_per_class);
            d.opt("blob_radius", s.blob_radius);
            d.object("shift", false, [&](detail::ObjectReader& sh) {
                sh.opt("rotation_deg", s.shift.rotation_deg);
                sh.opt("translation", s.shift.translation);
                sh.opt("noise_sigma", s.shift.noise_sigma);
            });
            d.enumeration("label_space_mode", s.label_space_mode,
                          {{"closed_set", LabelSpaceMode::closed_set}, {"partial_set", LabelSpaceMode::partial_set}},
                          false);
            d.opt("target_classes", s.target_classes);
            d.opt("seed", s.seed);
        });
        r.object("model", true, [&](detail::ObjectReader& m) {
            m.req("input_dim", c.model.input_dim);
            m.opt("hidden_dims", c.model.hidden_dims);
            m.opt("feature_dim", c.model.feature_dim);
            m.req("num_classes", c.model.num_classes);
            m.enumeration("activation", c.model.activation, {{"relu", Activation::relu}}, false);
            m.opt("init_seed", c.model.init_seed);
        });
        r.object("pretrain", false, [&](detail::ObjectReader& p) {
            auto& s = c.pretrain;
            p.opt("epochs", s.epochs);
            p.opt("batch_size", s.batch_size);
            p.object("sgd", false, [&](detail::ObjectReader& g) {
                g.opt("lr", s.sgd.lr);
                g.opt("momentum", s.sgd.momentum);
                g.opt("weight_decay", s.sgd.weight_decay);
            });
            p.opt("lr_multiplier_heads", s.lr_multiplier_heads);
            p.opt("alpha_smooth", s.alpha_smooth);
            p.opt("seed", s.seed);
        });
        r.object("adapt", false, [&](detail::ObjectReader& a) {
            auto& s = c.adapt;
            a.opt("total_iterations", s.total_iterations);
            a.opt("batch_size", s.batch_size);
            a.object("weights", false, [&](detail::ObjectReader& w) {
                w.opt("lambda_lsce", s.weights.lambda_lsce);
                w.opt("lambda_e", s.weights.lambda_e);
                w.opt("lambda_rce", s.weights.lambda_rce);
                w.opt("lambda_cdd", s.weights.lambda_cdd);
            });
            a.object("smoothing", false, [&](detail::ObjectReader& sm) {
                sm.opt("alpha_smooth", s.smoothing.alpha_smooth);
                sm.opt("eps_log", s.smoothing.eps_log);
            });
            a.object("sam", false, [&](detail::ObjectReader& sam) {
                sam.opt("rho", s.sam.rho);
                sam.object("base", false, [&](detail::ObjectReader& b) {
                    b.opt("lr", s.sam.base.lr);
                    b.opt("beta1", s.sam.base.beta1);
                    b.opt("beta2", s.sam.base.beta2);
                    b.opt("eps_adam", s.sam.base.eps_adam);
                });
            });
            a.opt("use_sam", s.use_sam);
            a.object("schedule", false, [&](detail::ObjectReader& sc) {
                sc.opt("extractor_multiplier", s.schedule.extractor_multiplier);
                sc.opt("heads_multiplier", s.schedule.heads_multiplier);
                sc.opt("schedule_extractor", s.schedule.schedule_extractor);
                sc.opt("schedule_heads", s.schedule.schedule_heads);
            });
            a.enumeration("cdd_sign", s.cdd_sign, {{"as_printed", CddSign::as_printed}, {"flipped", CddSign::flipped}},
                          false);
            a.opt("step1_repeats", s.step1_repeats);
            a.opt("step2_repeats", s.step2_repeats);
            a.opt("fresh_batch_per_step", s.fresh_batch_per_step);
            a.enumeration("routing", s.routing,
                          {{"weak_strong", ViewRouting::weak_strong},
                           {"weak_only", ViewRouting::weak_only},
                           {"both_views", ViewRouting::both_views}},
                          false);
            a.enumeration("eval_head", s.eval_head,
                          {{"c_t1", EvalHead::c_t1}, {"mean_of_heads", EvalHead::mean_of_heads}}, false);
            a.opt("seed", s.seed);
        });
        r.object("augment", false, [&](detail::ObjectReader& a) {
            auto& s = c.augment;
            a.object("weak", false, [&](detail::ObjectReader& w) {
                w.opt("jitter_sigma", s.weak.jitter_sigma);
                w.opt("flip_axis_prob", s.weak.flip_axis_prob);
            });
            a.object("strong", false, [&](detail::ObjectReader& st) {
                st.opt("jitter_sigma", s.strong.jitter_sigma);
                std::vector<double> range{s.strong.scale_lo, s.strong.scale_hi};
                st.opt("scale_range", range);
                if (range.size() != 2) throw ConfigError(st.child("scale_range"), "expected [lo, hi]");
                s.strong.scale_lo = range[0];
                s.strong.scale_hi = range[1];
                st.opt("feature_drop_prob", s.strong.feature_drop_prob);
                st.opt("num_ops", s.strong.num_ops);
            });
        });
        r.finish();
    }
    try {
        c.validate();
    } catch (const ContractViolation& e) {
        throw ConfigError("<config>", e.what());
    }
    return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(source, 0, e.what());
    }
    return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

inline std::string print_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

/// 16 hex digits of FNV-1a over the canonical (key-sorted, compact) JSON form.
inline std::string config_hash(const ExperimentConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(c).dump())));
    return buf;
}

}  // namespace act
