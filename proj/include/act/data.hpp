#pragma once

// Synthetic source/target domain pairs, N-way K-shot support splitting, and
// two-tier augmentation of feature vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "act/error.hpp"
#include "act/nn.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

/// Row-major feature matrix with one class label per row.
struct LabeledSet {
    std::size_t dim = 0;
    std::size_t num_classes = 0;
    std::vector<double> features;
    std::vector<std::size_t> labels;
    std::string name;

    std::size_t size() const { return labels.size(); }
    std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

    void push(std::span<const double> x, std::size_t label) {
        detail::require(x.size() == dim, "LabeledSet.push: row has " + std::to_string(x.size()) + " features, expected " +
                                             std::to_string(dim));
        detail::require(label < num_classes, "LabeledSet.push: label " + std::to_string(label) + " out of range");
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> c(num_classes, 0);
        for (auto y : labels) ++c[y];
        return c;
    }

    LabeledSet subset(const std::vector<std::size_t>& idx, std::string subset_name) const {
        LabeledSet out{dim, num_classes, {}, {}, std::move(subset_name)};
        out.features.reserve(idx.size() * dim);
        out.labels.reserve(idx.size());
        for (auto i : idx) out.push(row(i), labels.at(i));
        return out;
    }

    bool operator==(const LabeledSet&) const = default;
};

enum class Generator { gaussian_blobs, two_moons };
enum class LabelSpaceMode { closed_set, partial_set };

struct DomainShift {
    double rotation_deg = 0.0;        // rotation of the first two coordinates about the origin
    std::vector<double> translation;  // empty means zero
    double noise_sigma = 0.1;         // per-coordinate Gaussian noise on every generated point

    bool operator==(const DomainShift&) const = default;
};

struct DomainSpec {
    Generator generator = Generator::two_moons;
    std::size_t dim = 2;
    std::size_t num_classes = 2;
    std::vector<std::size_t> samples_per_class{200, 200};
    std::vector<std::size_t> target_samples_per_class;  // empty means same as samples_per_class
    double blob_radius = 3.0;                             // distance of blob centers from the origin
    DomainShift shift;
    LabelSpaceMode label_space_mode = LabelSpaceMode::closed_set;
    std::vector<std::size_t> target_classes;  // partial_set only
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(dim >= 2, "domain.dim must be at least 2");
        detail::require(num_classes >= 2, "domain.num_classes must be at least 2");
        detail::require(generator != Generator::two_moons || num_classes == 2, "two_moons has exactly 2 classes");
        detail::require(samples_per_class.size() == num_classes,
                        "domain.samples_per_class needs one entry per class");
        for (std::size_t c = 0; c < num_classes; ++c)
            detail::require(samples_per_class[c] >= 1, "domain.samples_per_class: class " + std::to_string(c) +
                                                           " is empty");
        if (!target_samples_per_class.empty()) {
            detail::require(target_samples_per_class.size() == num_classes,
                            "domain.target_samples_per_class needs one entry per class");
            for (std::size_t c = 0; c < num_classes; ++c)
                detail::require(target_samples_per_class[c] >= 1,
                                "domain.target_samples_per_class: class " + std::to_string(c) + " is empty");
        }
        detail::require(shift.noise_sigma > 0.0, "domain.shift.noise_sigma must be positive");
        detail::require(shift.translation.empty() || shift.translation.size() == dim,
                        "domain.shift.translation must be empty or have dim entries");
        if (label_space_mode == LabelSpaceMode::partial_set) {
            detail::require(!target_classes.empty(), "partial_set needs a nonempty target_classes subset");
            std::set<std::size_t> seen;
            for (auto c : target_classes) {
                detail::require(c < num_classes, "partial_set target class " + std::to_string(c) + " out of range");
                detail::require(seen.insert(c).second, "partial_set target classes must be distinct");
            }
            detail::require(target_classes.size() < num_classes, "partial_set target classes must be a proper subset");
        }
    }

    bool operator==(const DomainSpec&) const = default;
};

namespace detail {

inline void draw_point(const DomainSpec& spec, std::size_t label, Rng& rng, std::vector<double>& x) {
    x.assign(spec.dim, 0.0);
    if (spec.generator == Generator::two_moons) {
        const double t = rng.uniform(0.0, std::numbers::pi);
        if (label == 0) {
            x[0] = std::cos(t);
            x[1] = std::sin(t);
        } else {
            x[0] = 1.0 - std::cos(t);
            x[1] = 0.5 - std::sin(t);
        }
    } else {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(label) / static_cast<double>(spec.num_classes);
        x[0] = spec.blob_radius * std::cos(angle);
        x[1] = spec.blob_radius * std::sin(angle);
    }
    for (auto& v : x) v += spec.shift.noise_sigma * rng.normal();
}

inline void apply_shift(const DomainShift& shift, std::vector<double>& x) {
    const double a = shift.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const double x0 = x[0], x1 = x[1];
    x[0] = c * x0 - s * x1;
    x[1] = s * x0 + c * x1;
    for (std::size_t i = 0; i < shift.translation.size(); ++i) x[i] += shift.translation[i];
}

inline LabeledSet sample_domain(const DomainSpec& spec, const std::vector<std::size_t>& counts,
                                const std::vector<bool>& keep, Rng& rng, const DomainShift* shift, std::string name) {
    LabeledSet out{spec.dim, spec.num_classes, {}, {}, std::move(name)};
    std::vector<double> x;
    // Class-major draw order keeps each class's points stable when other counts change.
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        if (!keep[c]) continue;
        for (std::size_t i = 0; i < counts[c]; ++i) {
            draw_point(spec, c, rng, x);
            if (shift) apply_shift(*shift, x);
            out.push(x, c);
        }
    }
    return out;
}

}  // namespace detail

/// Source from the base generator; target from a fresh draw of the same generator
/// passed through the configured rotation and translation.
inline std::pair<LabeledSet, LabeledSet> make_domain_pair(const DomainSpec& spec) {
    spec.validate();
    const std::vector<bool> all(spec.num_classes, true);
    std::vector<bool> target_keep = all;
    if (spec.label_space_mode == LabelSpaceMode::partial_set) {
        target_keep.assign(spec.num_classes, false);
        for (auto c : spec.target_classes) target_keep[c] = true;
    }
    const auto& target_counts = spec.target_samples_per_class.empty() ? spec.samples_per_class
                                                                      : spec.target_samples_per_class;
    Rng source_rng(spec.seed, Stream::data, 0);
    Rng target_rng(spec.seed, Stream::data, 1);
    return {detail::sample_domain(spec, spec.samples_per_class, all, source_rng, nullptr, "source"),
            detail::sample_domain(spec, target_counts, target_keep, target_rng, &spec.shift, "target")};
}

// ---------------------------------------------------------------------------
// Support / test splitting

struct SupportSplit {
    LabeledSet support;
    LabeledSet test;
    std::vector<std::size_t> support_indices;  // rows of the original target set
    std::vector<std::size_t> test_indices;
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    std::uint64_t seed = 0;
};

/// Uniformly picks k_shot rows of each class without replacement; every other row is test data.
/// n_way must equal the number of classes present in the target set.
inline SupportSplit sample_support(const LabeledSet& target, std::size_t n_way, std::size_t k_shot,
                                   std::uint64_t seed) {
    detail::require(k_shot >= 1, "sample_support: K must be at least 1");
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < target.size(); ++i) by_class[target.labels[i]].push_back(i);
    detail::require(by_class.size() == n_way, "sample_support: N = " + std::to_string(n_way) +
                                                  " but the target set has " + std::to_string(by_class.size()) +
                                                  " classes");
    for (const auto& [cls, rows] : by_class)
        if (rows.size() < k_shot)
            throw ContractViolation("sample_support: class " + std::to_string(cls) + " has only " +
                                    std::to_string(rows.size()) + " samples, fewer than K = " + std::to_string(k_shot));

    Rng rng(seed, Stream::split);
    std::vector<bool> in_support(target.size(), false);
    std::vector<std::size_t> support;
    for (auto& [cls, rows] : by_class) {
        // Partial Fisher-Yates: the first k_shot slots become a uniform sample.
        for (std::size_t i = 0; i < k_shot; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.below(rows.size() - i));
            std::swap(rows[i], rows[j]);
            support.push_back(rows[i]);
            in_support[rows[i]] = true;
        }
    }
    std::vector<std::size_t> test;
    for (std::size_t i = 0; i < target.size(); ++i)
        if (!in_support[i]) test.push_back(i);

    SupportSplit split;
    split.support = target.subset(support, target.name + "_support");
    split.test = target.subset(test, target.name + "_test");
    split.support_indices = std::move(support);
    split.test_indices = std::move(test);
    split.n_way = n_way;
    split.k_shot = k_shot;
    split.seed = seed;
    return split;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentTier { weak, strong };

struct WeakAugment {
    double jitter_sigma = 0.05;
    double flip_axis_prob = 0.0;
    bool operator==(const WeakAugment&) const = default;
};

struct StrongAugment {
    double jitter_sigma = 0.15;
    double scale_lo = 0.8;
    double scale_hi = 1.2;
    double feature_drop_prob = 0.0;
    std::size_t num_ops = 2;
    bool operator==(const StrongAugment&) const = default;
};

struct AugmentPolicy {
    WeakAugment weak;
    StrongAugment strong;

    void validate() const {
        detail::require(weak.jitter_sigma >= 0.0, "augment.weak.jitter_sigma must be nonnegative");
        detail::require(strong.jitter_sigma >= weak.jitter_sigma,
                        "augment.strong.jitter_sigma must be at least augment.weak.jitter_sigma");
        detail::require(weak.flip_axis_prob >= 0.0 && weak.flip_axis_prob <= 1.0,
                        "augment.weak.flip_axis_prob must lie in [0, 1]");
        detail::require(strong.feature_drop_prob >= 0.0 && strong.feature_drop_prob <= 1.0,
                        "augment.strong.feature_drop_prob must lie in [0, 1]");
        detail::require(strong.scale_lo <= strong.scale_hi, "augment.strong.scale_range must have lo <= hi");
    }
    bool operator==(const AugmentPolicy&) const = default;
};

/// Weak: Gaussian jitter, then with flip_axis_prob negate one random axis.
/// Strong: larger jitter, then num_ops ops drawn from {per-feature scaling, feature dropout}.
inline std::vector<double> augment(std::span<const double> x, const AugmentPolicy& policy, AugmentTier tier,
                                   Rng& rng) {
    std::vector<double> out(x.begin(), x.end());
    if (tier == AugmentTier::weak) {
        for (auto& v : out) v += policy.weak.jitter_sigma * rng.normal();
        if (!out.empty() && rng.bernoulli(policy.weak.flip_axis_prob)) {
            const auto axis = static_cast<std::size_t>(rng.below(out.size()));
            out[axis] = -out[axis];
        }
        return out;
    }
    for (auto& v : out) v += policy.strong.jitter_sigma * rng.normal();
    for (std::size_t op = 0; op < policy.strong.num_ops; ++op) {
        if (rng.below(2) == 0) {
            for (auto& v : out) v *= rng.uniform(policy.strong.scale_lo, policy.strong.scale_hi);
        } else {
            for (auto& v : out)
                if (rng.bernoulli(policy.strong.feature_drop_prob)) v = 0.0;
        }
    }
    return out;
}

/// Epoch-seeded permutation of [0, size) chunked into batches; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t size, std::size_t batch_size,
                                                     std::uint64_t shuffle_seed, std::uint64_t epoch) {
    detail::require(batch_size >= 1, "batches: batch size must be at least 1");
    std::vector<std::size_t> perm(size);
    for (std::size_t i = 0; i < size; ++i) perm[i] = i;
    Rng rng(shuffle_seed, Stream::shuffle, epoch);
    rng.shuffle(perm);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < size; i += batch_size)
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(size, i + batch_size)));
    return out;
}

inline std::vector<std::vector<std::size_t>> batches(const LabeledSet& set, std::size_t batch_size,
                                                     std::uint64_t shuffle_seed, std::uint64_t epoch) {
    return batches(set.size(), batch_size, shuffle_seed, epoch);
}

/// Gathers rows into an [n x dim] tensor.
inline Tensor rows_tensor(const LabeledSet& set, const std::vector<std::size_t>& idx) {
    std::vector<double> data;
    data.reserve(idx.size() * set.dim);
    for (auto i : idx) {
        const auto r = set.row(i);
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor::matrix(idx.size(), set.dim, std::move(data));
}

inline std::vector<std::size_t> labels_of(const LabeledSet& set, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(set.labels[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset text format: comma-separated.
//   line 1: dim,num_classes,name
//   then one row per sample: f_0,...,f_{dim-1},label
// Features are printed with 17 significant digits, so round trips are exact.

inline void write_dataset(std::ostream& out, const LabeledSet& set) {
    detail::require(set.name.find_first_of(",\n\r") == std::string::npos,
                    "dataset name must not contain commas or newlines");
    out << set.dim << ',' << set.num_classes << ',' << set.name << '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (double v : set.row(i)) out << detail::format_double(v) << ',';
        out << set.labels[i] << '\n';
    }
}

inline LabeledSet read_dataset(std::istream& in, const std::string& source_name = "<dataset>") {
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream is(line);
        while (std::getline(is, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        return cells;
    };
    auto to_num = [&](const std::string& cell, std::size_t line_no, auto zero) {
        decltype(zero) value{};
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
        if (ec != std::errc{} || ptr != cell.data() + cell.size() || cell.empty())
            throw ParseError(source_name, line_no, "bad number '" + cell + "'");
        return value;
    };
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line)) throw ParseError(source_name, line_no, "missing header row");
    auto head = split(line);
    if (head.size() != 3) throw ParseError(source_name, line_no, "header must be dim,num_classes,name");
    LabeledSet set;
    set.dim = to_num(head[0], line_no, std::size_t{});
    set.num_classes = to_num(head[1], line_no, std::size_t{});
    set.name = head[2];
    if (set.dim == 0 || set.num_classes < 2) throw ParseError(source_name, line_no, "invalid dim or class count");
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cells = split(line);
        if (cells.size() != set.dim + 1)
            throw ParseError(source_name, line_no, "expected " + std::to_string(set.dim + 1) + " columns");
        for (std::size_t j = 0; j < set.dim; ++j) set.features.push_back(to_num(cells[j], line_no, 0.0));
        const auto label = to_num(cells[set.dim], line_no, std::size_t{});
        if (label >= set.num_classes) throw ParseError(source_name, line_no, "label out of range");
        set.labels.push_back(label);
    }
    return set;
}

inline void save_dataset(const LabeledSet& set, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_dataset(out, set);
}

inline LabeledSet load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
    return read_dataset(in, path);
}

}  // namespace act
