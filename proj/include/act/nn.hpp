#pragma once

// Network topology for asymmetric co-training: one MLP feature extractor feeding
// two linear classifier heads, held twice. The target side is trainable, the
// source side is a frozen copy of the checkpoint the run started from.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "act/error.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

enum class Activation { relu };

struct MlpSpec {
    std::size_t input_dim = 2;
    std::vector<std::size_t> hidden_dims{16};
    std::size_t feature_dim = 8;
    std::size_t num_classes = 2;
    Activation activation = Activation::relu;
    std::uint64_t init_seed = 0;

    void validate() const {
        detail::require(input_dim > 0, "MlpSpec.input_dim must be positive");
        detail::require(feature_dim > 0, "MlpSpec.feature_dim must be positive");
        detail::require(num_classes >= 2, "MlpSpec.num_classes must be at least 2");
        for (auto h : hidden_dims) detail::require(h > 0, "MlpSpec.hidden_dims entries must be positive");
    }

    bool operator==(const MlpSpec&) const = default;

    bool same_architecture(const MlpSpec& o) const {
        return input_dim == o.input_dim && hidden_dims == o.hidden_dims && feature_dim == o.feature_dim &&
               num_classes == o.num_classes && activation == o.activation;
    }
};

/// Affine map y = x W + b with W stored [in x out]. Copies are deep.
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(Tensor w, Tensor b) : weight(std::move(w)), bias(std::move(b)) {}
    Linear(const Linear& o) : weight(o.weight ? o.weight.clone() : Tensor{}), bias(o.bias ? o.bias.clone() : Tensor{}) {}
    Linear& operator=(const Linear& o) {
        if (this != &o) *this = Linear(o);
        return *this;
    }
    Linear(Linear&&) noexcept = default;
    Linear& operator=(Linear&&) noexcept = default;

    std::size_t in_dim() const { return weight.shape()[0]; }
    std::size_t out_dim() const { return weight.shape()[1]; }

    Tensor operator()(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }
};

/// One extractor plus two heads.
struct ModelSide {
    std::vector<Linear> extractor;
    Linear head1;
    Linear head2;

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < extractor.size(); ++i) {
            out.emplace_back("extractor." + std::to_string(i) + ".weight", extractor[i].weight);
            out.emplace_back("extractor." + std::to_string(i) + ".bias", extractor[i].bias);
        }
        out.emplace_back("head1.weight", head1.weight);
        out.emplace_back("head1.bias", head1.bias);
        out.emplace_back("head2.weight", head2.weight);
        out.emplace_back("head2.bias", head2.bias);
        return out;
    }

    void set_requires_grad(bool flag) {
        auto set = [flag](Linear& l) {
            l.weight.node().requires_grad = flag;
            l.bias.node().requires_grad = flag;
        };
        for (auto& l : extractor) set(l);
        set(head1);
        set(head2);
    }
};

/// Trainable target side (F_t, C_t1, C_t2) and the frozen source copies (F_s, C_s1, C_s2).
struct ModelBundle {
    MlpSpec spec;
    ModelSide target;
    ModelSide source;
};

enum class ParamScope { all_target, classifiers_only };

struct BranchLogits {
    Tensor logits1;
    Tensor logits2;
};

namespace detail {

inline Linear kaiming_linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::vector<double> w(in * out);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return Linear(Tensor::from({in, out}, std::move(w)), Tensor::zeros({out}));
}

inline std::uint64_t hash_params(const ModelSide& side) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : side.named_params()) {
        h ^= fnv1a64(name);
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h = splitmix64(h ^ bits);
        }
    }
    return h;
}

}  // namespace detail

/// Deterministic in spec.init_seed. Both heads start from the same draw; source equals target.
inline ModelBundle build(const MlpSpec& spec) {
    spec.validate();
    Rng rng(spec.init_seed, Stream::init);
    ModelSide side;
    std::size_t in = spec.input_dim;
    for (auto h : spec.hidden_dims) {
        side.extractor.push_back(detail::kaiming_linear(in, h, rng));
        in = h;
    }
    side.extractor.push_back(detail::kaiming_linear(in, spec.feature_dim, rng));
    side.head1 = detail::kaiming_linear(spec.feature_dim, spec.num_classes, rng);
    side.head2 = side.head1;

    ModelBundle bundle{spec, side, side};
    bundle.target.set_requires_grad(true);
    bundle.source.set_requires_grad(false);
    return bundle;
}

inline Tensor extract_features(const ModelSide& side, const Tensor& x) {
    detail::require(x.rank() == 2 && x.cols() == side.extractor.front().in_dim(),
                    "model input has shape " + shape_str(x.shape()) + ", expected [n x " +
                        std::to_string(side.extractor.front().in_dim()) + "]");
    Tensor h = x;
    for (const auto& layer : side.extractor) h = relu(layer(h));
    return h;
}

/// Both target branches on one input, sharing a single extractor pass.
inline BranchLogits forward_target(const ModelBundle& bundle, const Tensor& x) {
    const Tensor feat = extract_features(bundle.target, x);
    return {bundle.target.head1(feat), bundle.target.head2(feat)};
}

/// Branch 1 sees x1, branch 2 sees x2 (e.g. weak and strong views of the same rows).
inline BranchLogits forward_target(const ModelBundle& bundle, const Tensor& x1, const Tensor& x2) {
    if (x1.id() == x2.id()) return forward_target(bundle, x1);
    return {bundle.target.head1(extract_features(bundle.target, x1)),
            bundle.target.head2(extract_features(bundle.target, x2))};
}

/// Frozen source branches. Outputs are detached constants.
inline BranchLogits forward_source(const ModelBundle& bundle, const Tensor& x) {
    const Tensor feat = extract_features(bundle.source, x.detach());
    return {bundle.source.head1(feat).detach(), bundle.source.head2(feat).detach()};
}

inline BranchLogits forward_source(const ModelBundle& bundle, const Tensor& x1, const Tensor& x2) {
    if (x1.id() == x2.id()) return forward_source(bundle, x1);
    return {bundle.source.head1(extract_features(bundle.source, x1.detach())).detach(),
            bundle.source.head2(extract_features(bundle.source, x2.detach())).detach()};
}

/// Parameter handles (not copies) for the chosen scope.
inline std::vector<Tensor> trainable_params(const ModelBundle& bundle, ParamScope scope) {
    std::vector<Tensor> out;
    if (scope == ParamScope::all_target)
        for (const auto& l : bundle.target.extractor) {
            out.push_back(l.weight);
            out.push_back(l.bias);
        }
    for (const Linear* l : {&bundle.target.head1, &bundle.target.head2}) {
        out.push_back(l->weight);
        out.push_back(l->bias);
    }
    return out;
}

inline std::vector<Tensor> extractor_params(const ModelSide& side) {
    std::vector<Tensor> out;
    for (const auto& l : side.extractor) {
        out.push_back(l.weight);
        out.push_back(l.bias);
    }
    return out;
}

inline std::size_t scalar_count(const std::vector<Tensor>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
}

inline std::uint64_t source_fingerprint(const ModelBundle& b) { return detail::hash_params(b.source); }
inline std::uint64_t target_fingerprint(const ModelBundle& b) { return detail::hash_params(b.target); }

// ---------------------------------------------------------------------------
// Checkpoint text format (version 1), one token group per line:
//
//   act-checkpoint 1
//   input_dim <n>
//   hidden_dims <count> <h1> ... <hc>
//   feature_dim <n>
//   num_classes <n>
//   activation relu
//   init_seed <u64>
//   params <count>
//   param <name> <rank> <extent>... then on the next line numel values, %.17g
//   end
//
// Only the target side is stored; loading yields a bundle whose frozen source
// side equals the loaded parameters.

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

class LineReader {
public:
    LineReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

    std::vector<std::string> tokens(std::string_view expect_key = {}) {
        std::string line;
        if (!std::getline(in_, line)) fail("unexpected end of file");
        ++line_no_;
        std::istringstream is(line);
        std::vector<std::string> out;
        for (std::string t; is >> t;) out.push_back(t);
        if (!expect_key.empty() && (out.empty() || out[0] != expect_key))
            fail("expected '" + std::string(expect_key) + "'");
        return out;
    }

    template <class T>
    T number(const std::string& token) {
        T value{};
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
        if (ec != std::errc{} || ptr != token.data() + token.size()) fail("bad number '" + token + "'");
        return value;
    }

    [[noreturn]] void fail(const std::string& what) const { throw ParseError(source_, line_no_, what); }

private:
    std::istream& in_;
    std::string source_;
    std::size_t line_no_ = 0;
};

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelBundle& bundle) {
    const auto& s = bundle.spec;
    out << "act-checkpoint 1\n";
    out << "input_dim " << s.input_dim << '\n';
    out << "hidden_dims " << s.hidden_dims.size();
    for (auto h : s.hidden_dims) out << ' ' << h;
    out << '\n';
    out << "feature_dim " << s.feature_dim << '\n';
    out << "num_classes " << s.num_classes << '\n';
    out << "activation relu\n";
    out << "init_seed " << s.init_seed << '\n';
    const auto params = bundle.target.named_params();
    out << "params " << params.size() << '\n';
    for (const auto& [name, t] : params) {
        out << "param " << name << ' ' << t.rank();
        for (auto e : t.shape()) out << ' ' << e;
        out << '\n';
        for (std::size_t i = 0; i < t.numel(); ++i) out << (i ? " " : "") << detail::format_double(t.data()[i]);
        out << '\n';
    }
    out << "end\n";
}

inline ModelBundle read_checkpoint(std::istream& in, const std::string& source_name = "<checkpoint>") {
    detail::LineReader rd(in, source_name);
    auto hdr = rd.tokens("act-checkpoint");
    if (hdr.size() != 2 || hdr[1] != "1") rd.fail("unsupported checkpoint version");

    MlpSpec spec;
    auto one = [&](std::string_view key) {
        auto t = rd.tokens(key);
        if (t.size() != 2) rd.fail("expected one value after '" + std::string(key) + "'");
        return rd.number<std::uint64_t>(t[1]);
    };
    spec.input_dim = one("input_dim");
    {
        auto t = rd.tokens("hidden_dims");
        if (t.size() < 2) rd.fail("missing hidden_dims count");
        const auto count = rd.number<std::size_t>(t[1]);
        if (t.size() != count + 2) rd.fail("hidden_dims count does not match entries");
        spec.hidden_dims.clear();
        for (std::size_t i = 0; i < count; ++i) spec.hidden_dims.push_back(rd.number<std::size_t>(t[i + 2]));
    }
    spec.feature_dim = one("feature_dim");
    spec.num_classes = one("num_classes");
    {
        auto t = rd.tokens("activation");
        if (t.size() != 2 || t[1] != "relu") rd.fail("unknown activation");
    }
    spec.init_seed = one("init_seed");
    try {
        spec.validate();
    } catch (const ContractViolation& e) {
        rd.fail(e.what());
    }

    ModelBundle bundle = build(spec);
    auto expected = bundle.target.named_params();
    const auto count = one("params");
    if (count != expected.size()) rd.fail("parameter count does not match the declared architecture");
    for (auto& [name, tensor] : expected) {
        auto t = rd.tokens("param");
        if (t.size() < 3 || t[1] != name) rd.fail("expected parameter '" + name + "'");
        const auto rank = rd.number<std::size_t>(t[2]);
        if (t.size() != rank + 3) rd.fail("rank does not match extents for '" + name + "'");
        Shape shape;
        for (std::size_t i = 0; i < rank; ++i) shape.push_back(rd.number<std::size_t>(t[i + 3]));
        if (shape != tensor.shape()) rd.fail("shape of '" + name + "' does not match the declared architecture");
        auto values = rd.tokens();
        if (values.size() != tensor.numel()) rd.fail("expected " + std::to_string(tensor.numel()) + " values");
        auto dst = tensor.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) dst[i] = rd.number<double>(values[i]);
    }
    rd.tokens("end");
    bundle.source = bundle.target;
    bundle.source.set_requires_grad(false);
    return bundle;
}

inline void save_checkpoint(const ModelBundle& bundle, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_checkpoint(out, bundle);
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

inline ModelBundle load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    return read_checkpoint(in, path);
}

/// Overwrites bundle's target parameters from a file; the file's spec must match.
inline void load_into(ModelBundle& bundle, const std::string& path) {
    ModelBundle loaded = load_checkpoint(path);
    detail::require(loaded.spec.same_architecture(bundle.spec),
                    "checkpoint '" + path + "' has a different architecture");
    auto dst = bundle.target.named_params();
    auto src = loaded.target.named_params();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        auto d = dst[i].second.mutable_data();
        std::copy(src[i].second.data().begin(), src[i].second.data().end(), d.begin());
    }
}

}  // namespace act
