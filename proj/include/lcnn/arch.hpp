#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "lcnn/fusion.hpp"
#include "lcnn/layers.hpp"
#include "lcnn/random.hpp"
#include "lcnn/tensor.hpp"

namespace lcnn {

// ---------------------------------------------------------------------------
// Architecture notation
//
//   C(d,f,s)  convolution (+ReLU), d filters of f x f, stride s
//   LF(op)    lattice fusion: average | add | sub | absdiff
//   P(s)      max pooling, window = stride = s
//   FL        flatten
//   FC(n)     fully connected, n units (+ReLU unless it is the last node)
//   D(p)      inverted dropout with rate p
//
// Nodes are separated by "→" or "->".

struct ConvNode {
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;  // resolved from the padding policy, not part of the notation
    friend bool operator==(const ConvNode&, const ConvNode&) = default;
};
struct FuseNode {
    FusionOp op = FusionOp::Average;
    friend bool operator==(const FuseNode&, const FuseNode&) = default;
};
struct PoolNode {
    std::size_t stride = 2;
    friend bool operator==(const PoolNode&, const PoolNode&) = default;
};
struct FlattenNode {
    friend bool operator==(const FlattenNode&, const FlattenNode&) = default;
};
struct DenseNode {
    std::size_t units = 0;
    friend bool operator==(const DenseNode&, const DenseNode&) = default;
};
struct DropoutNode {
    double rate = 0.0;
    friend bool operator==(const DropoutNode&, const DropoutNode&) = default;
};

using ArchNode = std::variant<ConvNode, FuseNode, PoolNode, FlattenNode, DenseNode, DropoutNode>;

/// Reported with the 1-based node position, the byte offset of the token in
/// the input and the offending token text.
class ParseError : public std::invalid_argument {
public:
    ParseError(const std::string& msg, std::size_t node, std::size_t offset, std::string token)
        : std::invalid_argument("node " + std::to_string(node) + " (offset " + std::to_string(offset) + ") \"" +
                                token + "\": " + msg),
          node_(node),
          offset_(offset),
          token_(std::move(token)) {}

    std::size_t node() const noexcept { return node_; }
    std::size_t offset() const noexcept { return offset_; }
    const std::string& token() const noexcept { return token_; }

private:
    std::size_t node_;
    std::size_t offset_;
    std::string token_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

inline std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

struct RawToken {
    std::string_view text;
    std::size_t offset;
};

inline std::vector<RawToken> split_arrows(std::string_view text) {
    static constexpr std::string_view kUnicodeArrow = "\xE2\x86\x92";
    std::vector<RawToken> parts;
    std::size_t start = 0;
    std::size_t i = 0;
    while (i <= text.size()) {
        std::size_t sep = 0;
        if (i == text.size())
            sep = 1;
        else if (text.substr(i, kUnicodeArrow.size()) == kUnicodeArrow)
            sep = kUnicodeArrow.size();
        else if (text.substr(i, 2) == "->")
            sep = 2;
        if (sep) {
            auto raw = text.substr(start, i - start);
            std::size_t ws = 0;
            while (ws < raw.size() && std::isspace(static_cast<unsigned char>(raw[ws]))) ++ws;
            parts.push_back({trim(raw), start + ws});
            if (i == text.size()) break;
            i += sep;
            start = i;
        } else {
            ++i;
        }
    }
    return parts;
}

inline std::size_t parse_count(std::string_view arg, const char* what, std::size_t node, const RawToken& tok) {
    arg = trim(arg);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), v);
    if (ec != std::errc{} || p != arg.data() + arg.size() || arg.empty())
        throw ParseError(std::string("non-numeric ") + what + " \"" + std::string(arg) + "\"", node, tok.offset,
                         std::string(tok.text));
    if (v == 0) throw ParseError(std::string(what) + " must be positive", node, tok.offset, std::string(tok.text));
    return v;
}

inline std::string format_real(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

}  // namespace detail

inline std::vector<ArchNode> parse_arch(std::string_view text) {
    if (detail::trim(text).empty()) throw ParseError("empty architecture string", 0, 0, "");
    std::vector<ArchNode> nodes;
    const auto tokens = detail::split_arrows(text);
    for (std::size_t idx = 0; idx < tokens.size(); ++idx) {
        const auto& tok = tokens[idx];
        const std::size_t pos = idx + 1;
        const std::string token_text(tok.text);
        if (tok.text.empty()) throw ParseError("empty node", pos, tok.offset, token_text);

        std::string_view name = tok.text;
        std::vector<std::string_view> args;
        bool has_parens = false;
        if (auto open = tok.text.find('('); open != std::string_view::npos) {
            if (tok.text.back() != ')') throw ParseError("missing closing parenthesis", pos, tok.offset, token_text);
            has_parens = true;
            name = detail::trim(tok.text.substr(0, open));
            auto inner = tok.text.substr(open + 1, tok.text.size() - open - 2);
            if (!detail::trim(inner).empty()) {
                std::size_t s = 0;
                while (true) {
                    auto comma = inner.find(',', s);
                    args.push_back(detail::trim(inner.substr(s, comma == std::string_view::npos ? inner.npos : comma - s)));
                    if (comma == std::string_view::npos) break;
                    s = comma + 1;
                }
            }
        }
        const std::string key = detail::lower(name);
        auto want = [&](std::size_t n) {
            if (args.size() != n || (n > 0 && !has_parens))
                throw ParseError("wrong arity for " + key + ": expected " + std::to_string(n) + " argument(s), got " +
                                     std::to_string(args.size()),
                                 pos, tok.offset, token_text);
            if (n == 0 && has_parens)
                throw ParseError(key + " takes no arguments", pos, tok.offset, token_text);
        };

        if (key == "c") {
            want(3);
            nodes.emplace_back(ConvNode{detail::parse_count(args[0], "filter count", pos, tok),
                                        detail::parse_count(args[1], "kernel size", pos, tok),
                                        detail::parse_count(args[2], "stride", pos, tok), 0});
        } else if (key == "lf") {
            want(1);
            auto op = parse_fusion_op(detail::lower(args[0]));
            if (!op)
                throw ParseError("unknown fusion op \"" + std::string(args[0]) + "\" (average|add|sub|absdiff)", pos,
                                 tok.offset, token_text);
            nodes.emplace_back(FuseNode{*op});
        } else if (key == "p") {
            want(1);
            nodes.emplace_back(PoolNode{detail::parse_count(args[0], "stride", pos, tok)});
        } else if (key == "fl") {
            want(0);
            nodes.emplace_back(FlattenNode{});
        } else if (key == "fc") {
            want(1);
            nodes.emplace_back(DenseNode{detail::parse_count(args[0], "unit count", pos, tok)});
        } else if (key == "d") {
            want(1);
            const std::string a(args[0]);
            double rate = 0;
            auto [p, ec] = std::from_chars(a.data(), a.data() + a.size(), rate);
            if (a.empty() || ec != std::errc{} || p != a.data() + a.size())
                throw ParseError("non-numeric dropout rate \"" + a + "\"", pos, tok.offset, token_text);
            if (!(rate >= 0.0 && rate < 1.0))
                throw ParseError("dropout rate must be in [0,1)", pos, tok.offset, token_text);
            nodes.emplace_back(DropoutNode{rate});
        } else {
            throw ParseError("unknown node name \"" + std::string(name) + "\"", pos, tok.offset, token_text);
        }
    }
    return nodes;
}

inline std::string render_node(const ArchNode& node) {
    return std::visit(
        [](const auto& n) -> std::string {
            using N = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<N, ConvNode>)
                return "C(" + std::to_string(n.filters) + "," + std::to_string(n.kernel) + "," +
                       std::to_string(n.stride) + ")";
            else if constexpr (std::is_same_v<N, FuseNode>)
                return "LF(" + std::string(fusion_name(n.op)) + ")";
            else if constexpr (std::is_same_v<N, PoolNode>)
                return "P(" + std::to_string(n.stride) + ")";
            else if constexpr (std::is_same_v<N, FlattenNode>)
                return "FL";
            else if constexpr (std::is_same_v<N, DenseNode>)
                return "FC(" + std::to_string(n.units) + ")";
            else
                return "D(" + detail::format_real(n.rate) + ")";
        },
        node);
}

/// Canonical form: "→" separators with single spaces, lowercase fusion ops.
inline std::string render_arch(const std::vector<ArchNode>& nodes) {
    std::string out;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (i) out += " \xE2\x86\x92 ";
        out += render_node(nodes[i]);
    }
    return out;
}

inline constexpr std::string_view kFullScaleArch =
    "C(96,11,4) \xE2\x86\x92 LF(average) \xE2\x86\x92 P(2) \xE2\x86\x92 C(256,11,1) \xE2\x86\x92 LF(average) "
    "\xE2\x86\x92 P(2) \xE2\x86\x92 C(384,3,1) \xE2\x86\x92 C(384,3,1) \xE2\x86\x92 C(256,3,1) \xE2\x86\x92 "
    "LF(average) \xE2\x86\x92 P(2) \xE2\x86\x92 FL \xE2\x86\x92 FC(4096) \xE2\x86\x92 D(0.4) \xE2\x86\x92 "
    "FC(4096) \xE2\x86\x92 D(0.4) \xE2\x86\x92 FC(10)";

inline constexpr std::string_view kDeskArch =
    "C(16,3,1) \xE2\x86\x92 LF(average) \xE2\x86\x92 P(2) \xE2\x86\x92 C(32,3,1) \xE2\x86\x92 LF(average) "
    "\xE2\x86\x92 P(2) \xE2\x86\x92 C(32,3,1) \xE2\x86\x92 C(32,3,1) \xE2\x86\x92 C(32,3,1) \xE2\x86\x92 "
    "LF(average) \xE2\x86\x92 P(2) \xE2\x86\x92 FL \xE2\x86\x92 FC(128) \xE2\x86\x92 D(0.4) \xE2\x86\x92 "
    "FC(128) \xE2\x86\x92 D(0.4) \xE2\x86\x92 FC(10)";

// ---------------------------------------------------------------------------
// ArchSpec

enum class Mode { LCnn, MCnn, XCnn, Single };

inline std::string_view mode_name(Mode m) noexcept {
    switch (m) {
        case Mode::LCnn: return "lcnn";
        case Mode::MCnn: return "mcnn";
        case Mode::XCnn: return "xcnn-lite";
        case Mode::Single: return "single";
    }
    return "?";
}

inline std::optional<Mode> parse_mode(std::string_view s) noexcept {
    if (s == "lcnn") return Mode::LCnn;
    if (s == "mcnn") return Mode::MCnn;
    if (s == "xcnn" || s == "xcnn-lite") return Mode::XCnn;
    if (s == "single") return Mode::Single;
    return std::nullopt;
}

/// valid: p = 0 everywhere. same-3x3: p = 1 for 3x3 kernels only.
/// same: p = floor(f/2) for every kernel.
enum class Padding { Valid, SameFor3x3, Same };

inline std::string_view padding_name(Padding p) noexcept {
    switch (p) {
        case Padding::Valid: return "valid";
        case Padding::SameFor3x3: return "same-3x3";
        case Padding::Same: return "same";
    }
    return "?";
}

inline std::optional<Padding> parse_padding(std::string_view s) noexcept {
    if (s == "valid") return Padding::Valid;
    if (s == "same-3x3" || s == "same-for-3x3") return Padding::SameFor3x3;
    if (s == "same") return Padding::Same;
    return std::nullopt;
}

struct ArchSpec {
    std::vector<ArchNode> nodes;
    std::size_t input_side = 32;
    std::size_t input_channels = 1;
    std::size_t n_streams = 2;
    Mode mode = Mode::LCnn;
    Padding padding = Padding::SameFor3x3;

    static ArchSpec parse(std::string_view text, Mode mode, std::size_t n_streams, std::size_t input_side,
                          Padding padding) {
        ArchSpec spec;
        spec.nodes = parse_arch(text);
        spec.mode = mode;
        spec.n_streams = n_streams;
        spec.input_side = input_side;
        spec.padding = padding;
        return spec;
    }

    std::string text() const { return render_arch(nodes); }
};

inline std::size_t resolve_padding(Padding policy, std::size_t kernel) noexcept {
    switch (policy) {
        case Padding::Valid: return 0;
        case Padding::SameFor3x3: return kernel == 3 ? 1 : 0;
        case Padding::Same: return kernel / 2;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Network

template <Real T>
struct NamedTensor {
    std::string name;
    Tensor<T> value;
};

template <Real T>
using Gradients = std::vector<Tensor<T>>;

struct BuildOptions {
    /// Seed every stream's convolution weights identically.
    bool tie_stream_init = false;
};

template <Real T>
class Network;

template <Real T>
Network<T> build_network(const ArchSpec& spec, std::uint64_t seed, BuildOptions opts = {});

template <Real T>
class Network {
public:
    /// Per pre-flatten node: indices of (weight, bias) per stream for convs,
    /// and for xcnn pools the cross projection table [dst][src].
    struct Step {
        ArchNode node;
        std::size_t index = 0;                       // position in spec.nodes
        std::vector<std::size_t> conv_params;        // weight index per stream (bias = +1)
        std::vector<std::vector<std::size_t>> cross; // [dst][src] weight index (bias = +1), xcnn only
        std::size_t channels_out = 0;
        std::size_t side_out = 0;
        bool active = true;                          // false for fusion nodes skipped by the mode
    };
    struct HeadStep {
        ArchNode node;
        std::size_t index = 0;
        std::size_t param = 0;  // dense weight index (bias = +1)
        bool relu = false;
    };

    const ArchSpec& spec() const noexcept { return spec_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const std::vector<NamedTensor<T>>& params() const noexcept { return params_; }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    std::vector<NamedTensor<T>>& mutable_params() noexcept {
        ++generation_;
        return params_;
    }

    std::uint64_t generation() const noexcept { return generation_; }
    std::size_t streams() const noexcept { return spec_.n_streams; }
    const std::vector<Step>& body() const noexcept { return body_; }
    const std::vector<HeadStep>& head() const noexcept { return head_; }
    std::size_t stream_flat_length() const noexcept { return flat_len_; }
    std::size_t head_input_length() const noexcept { return head_in_; }

    std::size_t parameter_count() const noexcept {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return i;
        return std::nullopt;
    }

    Gradients<T> zero_gradients() const {
        Gradients<T> g;
        g.reserve(params_.size());
        for (const auto& p : params_) g.emplace_back(p.value.shape());
        return g;
    }

    friend Network build_network<T>(const ArchSpec& spec, std::uint64_t seed, BuildOptions opts);

private:
    std::size_t add_param(std::string name, Tensor<T> value) {
        params_.push_back({std::move(name), std::move(value)});
        return params_.size() - 1;
    }

    ArchSpec spec_;
    std::uint64_t seed_ = 0;
    std::vector<NamedTensor<T>> params_;
    std::vector<Step> body_;
    std::vector<HeadStep> head_;
    std::size_t flat_len_ = 0;
    std::size_t head_in_ = 0;
    std::uint64_t generation_ = 0;
};

namespace detail {

inline std::string node_label(const ArchSpec& spec, std::size_t i) {
    return "node " + std::to_string(i + 1) + " " + render_node(spec.nodes[i]);
}

/// Scaled-uniform fill, bound sqrt(6 / (fan_in + fan_out)).
template <Real T>
Tensor<T> scaled_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t stream_seed) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    CounterRng rng(stream_seed);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

inline constexpr std::uint64_t kHeadKey = 0xFFFF'0000ULL;
inline constexpr std::uint64_t kCrossKey = 0xC0'0000ULL;

}  // namespace detail

/// Validates the spec, resolves padding, propagates shapes and initializes all
/// parameters from (seed, node index, stream index).
template <Real T>
Network<T> build_network(const ArchSpec& spec_in, std::uint64_t seed, BuildOptions opts) {
    Network<T> net;
    net.spec_ = spec_in;
    net.seed_ = seed;
    ArchSpec& spec = net.spec_;
    const auto n_streams = spec.n_streams;

    if (n_streams == 0) throw ConfigError("n_streams must be >= 1");
    if (spec.mode == Mode::Single && n_streams != 1)
        throw ConfigError("mode single requires exactly one stream, got " + std::to_string(n_streams));
    if (spec.input_side == 0 || spec.input_channels == 0) throw ConfigError("input side and channels must be >= 1");
    if (spec.nodes.empty()) throw ConfigError("architecture has no nodes");
    if (!std::holds_alternative<DenseNode>(spec.nodes.back()))
        throw ConfigError("architecture must end with FC(n), got " + render_node(spec.nodes.back()));

    std::size_t flatten_at = spec.nodes.size();
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        if (std::holds_alternative<FlattenNode>(spec.nodes[i])) {
            if (flatten_at != spec.nodes.size()) throw ConfigError("architecture has more than one FL: " + detail::node_label(spec, i));
            flatten_at = i;
        }
    }
    if (flatten_at == spec.nodes.size()) throw ConfigError("architecture has no FL node");

    const bool lattice = spec.mode == Mode::LCnn || spec.mode == Mode::Single;
    std::size_t channels = spec.input_channels;
    std::size_t side = spec.input_side;
    bool coincide = true;  // lcnn: are all streams' maps currently identical?
    std::size_t conv_count = 0;

    for (std::size_t i = 0; i < flatten_at; ++i) {
        auto& node = spec.nodes[i];
        typename Network<T>::Step step;
        step.index = i;
        if (auto* c = std::get_if<ConvNode>(&node)) {
            c->padding = resolve_padding(spec.padding, c->kernel);
            ConvGeometry g{c->filters, c->kernel, c->stride, c->padding};
            const auto out = g.output_side(side);
            if (out == 0)
                throw ConfigError(detail::node_label(spec, i) + ": non-positive output size for input side " +
                                  std::to_string(side));
            const std::size_t fan_in = channels * c->kernel * c->kernel;
            const std::size_t fan_out = c->filters * c->kernel * c->kernel;
            for (std::size_t s = 0; s < n_streams; ++s) {
                const std::uint64_t stream_key = opts.tie_stream_init ? 0 : s;
                const std::string prefix = "stream" + std::to_string(s) + ".conv" + std::to_string(conv_count);
                step.conv_params.push_back(net.add_param(
                    prefix + ".weight",
                    detail::scaled_uniform<T>({c->filters, channels, c->kernel, c->kernel}, fan_in, fan_out,
                                              derive_seed({seed, i, stream_key}))));
                net.add_param(prefix + ".bias", Tensor<T>({c->filters}));
            }
            ++conv_count;
            channels = c->filters;
            side = out;
            if (n_streams > 1) coincide = false;
        } else if (auto* f = std::get_if<FuseNode>(&node)) {
            if (lattice) {
                if (!accepts_arity(f->op, n_streams))
                    throw ConfigError(detail::node_label(spec, i) + ": fusion '" + std::string(fusion_name(f->op)) +
                                      "' needs 2 streams, network has " + std::to_string(n_streams));
                coincide = true;
            } else {
                step.active = false;
            }
        } else if (auto* p = std::get_if<PoolNode>(&node)) {
            if (side % p->stride != 0)
                throw ConfigError(detail::node_label(spec, i) + ": pool stride " + std::to_string(p->stride) +
                                  " does not divide map side " + std::to_string(side));
            side /= p->stride;
            if (spec.mode == Mode::XCnn && n_streams > 1) {
                step.cross.assign(n_streams, std::vector<std::size_t>(n_streams, 0));
                for (std::size_t dst = 0; dst < n_streams; ++dst)
                    for (std::size_t src = 0; src < n_streams; ++src) {
                        if (src == dst) continue;
                        const std::string prefix = "cross" + std::to_string(i) + ".s" + std::to_string(src) + "_to_s" +
                                                   std::to_string(dst);
                        step.cross[dst][src] = net.add_param(
                            prefix + ".weight",
                            detail::scaled_uniform<T>({channels, channels, 1, 1}, channels, channels,
                                                      derive_seed({seed, i, detail::kCrossKey + dst * 256 + src})));
                        net.add_param(prefix + ".bias", Tensor<T>({channels}));
                    }
            }
        } else {
            throw ConfigError(detail::node_label(spec, i) + " is not allowed before FL");
        }
        step.node = node;
        step.channels_out = channels;
        step.side_out = side;
        net.body_.push_back(std::move(step));
    }
    if (spec.mode == Mode::LCnn && !coincide)
        throw ConfigError("lcnn: streams must pass through an LF node after the last convolution before FL");

    net.flat_len_ = channels * side * side;
    const bool concat = spec.mode == Mode::MCnn || spec.mode == Mode::XCnn;
    net.head_in_ = concat ? net.flat_len_ * n_streams : net.flat_len_;

    std::size_t width = net.head_in_;
    std::size_t dense_count = 0;
    std::size_t last_dense = 0;
    for (std::size_t i = flatten_at + 1; i < spec.nodes.size(); ++i)
        if (std::holds_alternative<DenseNode>(spec.nodes[i])) last_dense = i;
    for (std::size_t i = flatten_at + 1; i < spec.nodes.size(); ++i) {
        const auto& node = spec.nodes[i];
        typename Network<T>::HeadStep step;
        step.node = node;
        step.index = i;
        if (auto* d = std::get_if<DenseNode>(&node)) {
            const std::string prefix = "head.fc" + std::to_string(dense_count++);
            step.param = net.add_param(prefix + ".weight",
                                       detail::scaled_uniform<T>({d->units, width}, width, d->units,
                                                                 derive_seed({seed, i, detail::kHeadKey})));
            net.add_param(prefix + ".bias", Tensor<T>({d->units}));
            step.relu = i != last_dense;
            width = d->units;
        } else if (auto* dr = std::get_if<DropoutNode>(&node)) {
            if (!(dr->rate >= 0.0 && dr->rate < 1.0))
                throw ConfigError(detail::node_label(spec, i) + ": dropout rate must be in [0,1)");
        } else {
            throw ConfigError(detail::node_label(spec, i) + " is not allowed after FL");
        }
        net.head_.push_back(std::move(step));
    }
    return net;
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Per-stream feature maps at one point of the body. After a lattice fusion
/// every stream reads the same map, which is then held once (`fused`).
template <Real T>
struct StreamMaps {
    StreamBundle<T> maps;
    bool fused = false;

    const Tensor<T>& at(std::size_t stream) const { return fused ? maps[0] : maps[stream]; }
};

template <Real T>
struct ForwardCache {
    std::uint64_t generation = 0;
    const void* owner = nullptr;
    std::size_t batch = 0;
    /// values[0] is the network input; values[b + 1] is the output of body
    /// step b (a skipped fusion node repeats its input).
    std::vector<StreamMaps<T>> values;
    std::vector<std::size_t> source;  // body step b reads values[source[b]]
    std::vector<std::vector<std::vector<std::uint32_t>>> argmax;
    std::vector<StreamBundle<T>> pooled;  // xcnn: pooled maps before the cross add
    Tensor<T> flat;
    std::vector<Tensor<T>> head_outputs;
    std::vector<Tensor<T>> masks;

    /// The map stream `s` feeds into body step `b`.
    const Tensor<T>& step_input(std::size_t b, std::size_t s) const { return values[source[b]].at(s); }
};

template <Real T>
struct ForwardResult {
    Tensor<T> logits;
    ForwardCache<T> cache;
};

/// inputs: one (batch, channels, side, side) tensor per stream. `step`
/// selects the dropout masks and only matters when training.
template <Real T>
ForwardResult<T> forward(const Network<T>& net, const StreamBundle<T>& inputs, bool training,
                         std::uint64_t step = 0) {
    const auto& spec = net.spec();
    const auto S = net.streams();
    if (inputs.size() != S)
        throw ConfigError("forward: network has " + std::to_string(S) + " stream(s), got " +
                          std::to_string(inputs.size()) + " input(s)");
    for (std::size_t s = 0; s < S; ++s) {
        const auto& sh = inputs[s].shape();
        if (sh.size() != 4 || sh[1] != spec.input_channels || sh[2] != spec.input_side || sh[3] != spec.input_side)
            throw ShapeError("forward: stream " + std::to_string(s) + " input " + to_string(sh) + " does not match (n," +
                             std::to_string(spec.input_channels) + "," + std::to_string(spec.input_side) + "," +
                             std::to_string(spec.input_side) + ")");
        if (sh[0] != inputs[0].dim(0)) throw ShapeError("forward: streams disagree on batch size");
    }
    const auto& params = net.params();
    const auto batch = inputs[0].dim(0);
    const auto& body = net.body();

    ForwardResult<T> r;
    auto& cache = r.cache;
    cache.generation = net.generation();
    cache.owner = &net;
    cache.batch = batch;
    cache.values.reserve(body.size() + 1);
    cache.values.push_back({inputs, false});
    cache.source.assign(body.size(), 0);
    cache.argmax.resize(body.size());
    cache.pooled.resize(body.size());

    std::size_t cur = 0;
    for (std::size_t b = 0; b < body.size(); ++b) {
        const auto& st = body[b];
        cache.source[b] = cur;
        StreamMaps<T> out;
        if (!st.active) {
            cache.values.push_back({});  // placeholder, never read
            continue;
        }
        const StreamMaps<T>& in = cache.values[cur];
        if (const auto* c = std::get_if<ConvNode>(&st.node)) {
            const ConvGeometry g{c->filters, c->kernel, c->stride, c->padding};
            out.maps.resize(S);
            for (std::size_t s = 0; s < S; ++s) {
                const auto wi = st.conv_params[s];
                out.maps[s] = relu_forward(conv2d_forward(in.at(s), params[wi].value, params[wi + 1].value, g));
            }
        } else if (const auto* f = std::get_if<FuseNode>(&st.node)) {
            if (in.fused) {
                out.maps.push_back(fuse_forward(f->op, StreamBundle<T>(S, in.maps[0])));
            } else {
                out.maps.push_back(fuse_forward(f->op, in.maps));
            }
            out.fused = true;
        } else if (const auto* p = std::get_if<PoolNode>(&st.node)) {
            const std::size_t distinct = in.fused ? 1 : S;
            cache.argmax[b].resize(distinct);
            out.maps.resize(distinct);
            out.fused = in.fused;
            for (std::size_t s = 0; s < distinct; ++s) {
                auto pr = maxpool_forward(in.maps[s], p->stride);
                out.maps[s] = std::move(pr.output);
                cache.argmax[b][s] = std::move(pr.argmax);
            }
            if (!st.cross.empty()) {
                cache.pooled[b] = out.maps;
                const ConvGeometry g{st.channels_out, 1, 1, 0};
                for (std::size_t dst = 0; dst < S; ++dst)
                    for (std::size_t src = 0; src < S; ++src) {
                        if (src == dst) continue;
                        const auto wi = st.cross[dst][src];
                        accumulate(out.maps[dst],
                                   conv2d_forward(cache.pooled[b][src], params[wi].value, params[wi + 1].value, g));
                    }
            }
        }
        cache.values.push_back(std::move(out));
        cur = b + 1;
    }

    // Flatten. lcnn/single: streams coincide, one copy enters the head.
    const StreamMaps<T>& last = cache.values[cur];
    const std::size_t flat = net.stream_flat_length();
    if (spec.mode == Mode::MCnn || spec.mode == Mode::XCnn) {
        Tensor<T> v({batch, flat * S});
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t s = 0; s < S; ++s)
                std::copy_n(last.at(s).raw() + n * flat, flat, v.raw() + (n * S + s) * flat);
        cache.flat = std::move(v);
    } else {
        cache.flat = last.maps[0].reshaped({batch, flat});
    }

    const auto& head = net.head();
    cache.head_outputs.resize(head.size());
    cache.masks.resize(head.size());
    for (std::size_t k = 0; k < head.size(); ++k) {
        const auto& hs = head[k];
        const Tensor<T>& h = k == 0 ? cache.flat : cache.head_outputs[k - 1];
        if (std::holds_alternative<DenseNode>(hs.node)) {
            Tensor<T> y = dense_forward(h, params[hs.param].value, params[hs.param + 1].value);
            cache.head_outputs[k] = hs.relu ? relu_forward(y) : std::move(y);
        } else if (const auto* d = std::get_if<DropoutNode>(&hs.node)) {
            auto dr = dropout_forward(h, DropoutParams{d->rate, net.seed(), training}, hs.index, step);
            cache.head_outputs[k] = std::move(dr.output);
            cache.masks[k] = std::move(dr.mask);
        }
    }
    r.logits = cache.head_outputs.back();
    return r;
}

class StaleCacheError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Gradients of every parameter, in Network::params() order.
template <Real T>
Gradients<T> backward(const Network<T>& net, const ForwardCache<T>& cache, const Tensor<T>& grad_logits) {
    if (cache.owner != &net || cache.generation != net.generation())
        throw StaleCacheError("backward: cache does not belong to the current network parameters");
    const auto& spec = net.spec();
    const auto& params = net.params();
    const auto S = net.streams();
    const auto batch = cache.batch;
    Gradients<T> grads = net.zero_gradients();

    const auto& head = net.head();
    if (head.empty() || grad_logits.shape() != cache.head_outputs.back().shape())
        throw ShapeError("backward: grad_logits " + to_string(grad_logits.shape()) + " does not match logits");
    Tensor<T> g = grad_logits;
    for (std::size_t k = head.size(); k-- > 0;) {
        const auto& hs = head[k];
        if (std::holds_alternative<DenseNode>(hs.node)) {
            if (hs.relu) g = relu_backward(cache.head_outputs[k], g);
            const Tensor<T>& in = k == 0 ? cache.flat : cache.head_outputs[k - 1];
            auto dg = dense_backward(in, params[hs.param].value, g);
            accumulate(grads[hs.param], dg.weights);
            accumulate(grads[hs.param + 1], dg.bias);
            g = std::move(dg.input);
        } else {
            g = dropout_backward(cache.masks[k], g);
        }
    }

    // Un-flatten into gradients of the last body value.
    const auto& body = net.body();
    std::size_t cur = cache.values.size() - 1;
    while (cur > 0 && !body[cur - 1].active) --cur;
    const auto& last_step = body.back();
    const Shape map_shape{batch, last_step.channels_out, last_step.side_out, last_step.side_out};
    const std::size_t flat = net.stream_flat_length();
    StreamMaps<T> gs;
    gs.fused = cache.values[cur].fused;
    if (spec.mode == Mode::MCnn || spec.mode == Mode::XCnn) {
        const std::size_t distinct = gs.fused ? 1 : S;
        gs.maps.assign(distinct, Tensor<T>(map_shape));
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t s = 0; s < S; ++s) {
                T* dst = gs.maps[gs.fused ? 0 : s].raw() + n * flat;
                const T* src = g.raw() + (n * S + s) * flat;
                for (std::size_t i = 0; i < flat; ++i) dst[i] += src[i];
            }
    } else {
        gs.maps.push_back(std::move(g).reshaped(map_shape));
    }

    // Collapses per-stream input gradients when the input was a fused map that
    // fanned out to every stream: the branch gradients sum in stream order.
    auto to_input = [&](StreamBundle<T>&& per_stream, bool input_fused) {
        StreamMaps<T> out;
        out.fused = input_fused;
        if (input_fused && per_stream.size() > 1) {
            Tensor<T> sum = std::move(per_stream[0]);
            for (std::size_t s = 1; s < per_stream.size(); ++s) accumulate(sum, per_stream[s]);
            out.maps.push_back(std::move(sum));
        } else {
            out.maps = std::move(per_stream);
        }
        return out;
    };

    for (std::size_t b = body.size(); b-- > 0;) {
        const auto& st = body[b];
        if (!st.active) continue;
        const StreamMaps<T>& in = cache.values[cache.source[b]];
        const StreamMaps<T>& out = cache.values[b + 1];
        if (const auto* c = std::get_if<ConvNode>(&st.node)) {
            const ConvGeometry geom{c->filters, c->kernel, c->stride, c->padding};
            StreamBundle<T> gin(S);
            for (std::size_t s = 0; s < S; ++s) {
                const auto wi = st.conv_params[s];
                Tensor<T> pre_grad = relu_backward(out.at(s), gs.at(s));
                auto cg = conv2d_backward(in.at(s), params[wi].value, params[wi + 1].value, geom, pre_grad);
                accumulate(grads[wi], cg.weights);
                accumulate(grads[wi + 1], cg.bias);
                gin[s] = std::move(cg.input);
            }
            gs = to_input(std::move(gin), in.fused);
        } else if (const auto* f = std::get_if<FuseNode>(&st.node)) {
            const Tensor<T>& grad_y = gs.maps[0];
            StreamBundle<T> gin = in.fused ? fuse_backward(f->op, StreamBundle<T>(S, in.maps[0]), grad_y)
                                           : fuse_backward(f->op, in.maps, grad_y);
            gs = to_input(std::move(gin), in.fused);
        } else if (std::holds_alternative<PoolNode>(st.node)) {
            if (!st.cross.empty()) {
                const ConvGeometry geom{st.channels_out, 1, 1, 0};
                StreamBundle<T> gp = gs.maps;
                for (std::size_t dst = 0; dst < S; ++dst)
                    for (std::size_t src = 0; src < S; ++src) {
                        if (src == dst) continue;
                        const auto wi = st.cross[dst][src];
                        auto cg = conv2d_backward(cache.pooled[b][src], params[wi].value, params[wi + 1].value, geom,
                                                  gs.maps[dst]);
                        accumulate(grads[wi], cg.weights);
                        accumulate(grads[wi + 1], cg.bias);
                        accumulate(gp[src], cg.input);
                    }
                gs.maps = std::move(gp);
            }
            for (std::size_t s = 0; s < gs.maps.size(); ++s)
                gs.maps[s] = maxpool_backward<T>(cache.argmax[b][s], in.maps[s].shape(), gs.maps[s]);
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "LCKP" | spec string (u32 len + bytes) | u8 mode | u32 n_streams | u64 seed
// | u32 input_side | u32 input_channels | u8 padding | u32 record count
// | records: name (u32 len + bytes) + LCNT tensor, in parameter order.

template <Real T>
void save_checkpoint(std::ostream& os, const Network<T>& net) {
    const auto& spec = net.spec();
    io::write_magic(os, "LCKP");
    io::write_string(os, spec.text());
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(spec.mode));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.n_streams));
    io::write_le<std::uint64_t>(os, net.seed());
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_side));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_channels));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(spec.padding));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.params().size()));
    for (const auto& p : net.params()) {
        io::write_string(os, p.name);
        write_tensor(os, p.value);
    }
}

template <Real T>
Network<T> load_checkpoint(std::istream& is) {
    io::expect_magic(is, "LCKP");
    const std::string text = io::read_string(is);
    const auto mode = io::read_le<std::uint8_t>(is);
    if (mode > static_cast<std::uint8_t>(Mode::Single)) throw FormatError("checkpoint: bad mode byte");
    ArchSpec spec;
    spec.nodes = parse_arch(text);
    spec.mode = static_cast<Mode>(mode);
    spec.n_streams = io::read_le<std::uint32_t>(is);
    const auto seed = io::read_le<std::uint64_t>(is);
    spec.input_side = io::read_le<std::uint32_t>(is);
    spec.input_channels = io::read_le<std::uint32_t>(is);
    const auto padding = io::read_le<std::uint8_t>(is);
    if (padding > static_cast<std::uint8_t>(Padding::Same)) throw FormatError("checkpoint: bad padding byte");
    spec.padding = static_cast<Padding>(padding);
    Network<T> net = build_network<T>(spec, seed);
    const auto count = io::read_le<std::uint32_t>(is);
    auto& params = net.mutable_params();
    if (count != params.size())
        throw FormatError("checkpoint: " + std::to_string(count) + " records but architecture has " +
                          std::to_string(params.size()) + " parameters");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = io::read_string(is);
        if (name != params[i].name)
            throw FormatError("checkpoint: record " + std::to_string(i) + " is \"" + name + "\", expected \"" +
                              params[i].name + "\"");
        Tensor<T> value = read_tensor<T>(is);
        if (value.shape() != params[i].value.shape())
            throw FormatError("checkpoint: " + name + " has shape " + to_string(value.shape()) + ", expected " +
                              to_string(params[i].value.shape()));
        params[i].value = std::move(value);
    }
    return net;
}

}  // namespace lcnn
