#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "gradleak/graph.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

// ---- layer descriptors ----------------------------------------------------

struct ConvLayer {
    std::size_t kernel = 5;
    std::size_t out_channels = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct AvgPoolLayer {
    std::size_t window = 2;
    std::size_t stride = 2;
    friend bool operator==(const AvgPoolLayer&, const AvgPoolLayer&) = default;
};

enum class Activation { sigmoid, relu };

struct ActivationLayer {
    Activation kind = Activation::sigmoid;
    friend bool operator==(const ActivationLayer&, const ActivationLayer&) = default;
};

struct FlattenLayer {
    friend bool operator==(const FlattenLayer&, const FlattenLayer&) = default;
};

struct DenseLayer {
    std::size_t out_dim = 1;
    bool biased = true;
    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using Layer = std::variant<ConvLayer, AvgPoolLayer, ActivationLayer, FlattenLayer, DenseLayer>;

/// Ordered layer list plus input geometry (HxWxC) and class count.
struct ModelSpec {
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t channels = 1;
    std::size_t classes = 2;
    std::vector<Layer> layers;

    Shape input_shape() const { return {height, width, channels}; }
    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// ---- text format ------------------------------------------------------------
//
//   input h=16 w=16 c=1
//   classes m=2
//   conv k=5 out=6 stride=1 pad=2
//   activation kind=sigmoid
//   avg_pool window=2 stride=2
//   flatten
//   dense out=2 bias=1
//
// Blank lines and '#' comments are ignored on read. to_text() emits the
// canonical form hashed by spec_digest().

inline std::string layer_text(const Layer& layer) {
    std::ostringstream os;
    std::visit(
        [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
                os << "conv k=" << l.kernel << " out=" << l.out_channels << " stride=" << l.stride
                   << " pad=" << l.padding;
            } else if constexpr (std::is_same_v<T, AvgPoolLayer>) {
                os << "avg_pool window=" << l.window << " stride=" << l.stride;
            } else if constexpr (std::is_same_v<T, ActivationLayer>) {
                os << "activation kind=" << (l.kind == Activation::sigmoid ? "sigmoid" : "relu");
            } else if constexpr (std::is_same_v<T, FlattenLayer>) {
                os << "flatten";
            } else {
                os << "dense out=" << l.out_dim << " bias=" << (l.biased ? 1 : 0);
            }
        },
        layer);
    return os.str();
}

inline std::string to_text(const ModelSpec& spec) {
    std::ostringstream os;
    os << "input h=" << spec.height << " w=" << spec.width << " c=" << spec.channels << '\n';
    os << "classes m=" << spec.classes << '\n';
    for (const auto& layer : spec.layers) os << layer_text(layer) << '\n';
    return os.str();
}

namespace detail {

class SpecLineParser {
public:
    SpecLineParser(std::string_view line, std::size_t offset) : offset_(offset) {
        std::istringstream is{std::string(line)};
        is >> keyword_;
        std::string tok;
        while (is >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos || eq == 0) fail("expected key=value, got '" + tok + "'");
            fields_.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
        }
    }

    const std::string& keyword() const { return keyword_; }

    std::size_t uint(const std::string& key, std::optional<std::size_t> fallback = {}) {
        const auto raw = take(key);
        if (!raw) {
            if (fallback) return *fallback;
            fail("missing field '" + key + "'");
        }
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(*raw, &pos);
        } catch (const std::exception&) {
            fail("field '" + key + "' is not an unsigned integer");
        }
        if (pos != raw->size() || (*raw)[0] == '-') {
            fail("field '" + key + "' is not an unsigned integer");
        }
        return static_cast<std::size_t>(v);
    }

    std::string word(const std::string& key) {
        auto raw = take(key);
        if (!raw) fail("missing field '" + key + "'");
        return *raw;
    }

    void finish() const {
        if (!fields_.empty()) fail("unknown field '" + fields_.front().first + "'");
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError("model spec: " + what, offset_);
    }

private:
    std::optional<std::string> take(const std::string& key) {
        for (auto it = fields_.begin(); it != fields_.end(); ++it) {
            if (it->first == key) {
                std::string v = it->second;
                fields_.erase(it);
                return v;
            }
        }
        return std::nullopt;
    }

    std::size_t offset_;
    std::string keyword_;
    std::vector<std::pair<std::string, std::string>> fields_;
};

} // namespace detail

/// Parses the plain-text model format. Errors carry the byte offset of the
/// offending line.
inline ModelSpec parse_model_spec(std::string_view text) {
    ModelSpec spec;
    bool have_input = false, have_classes = false;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        const std::size_t line_offset = pos;
        pos = end + 1;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

        detail::SpecLineParser p(line, line_offset);
        const auto& kw = p.keyword();
        if (kw == "input") {
            spec.height = p.uint("h");
            spec.width = p.uint("w");
            spec.channels = p.uint("c");
            have_input = true;
        } else if (kw == "classes") {
            spec.classes = p.uint("m");
            have_classes = true;
        } else if (kw == "conv") {
            ConvLayer l;
            l.kernel = p.uint("k");
            l.out_channels = p.uint("out");
            l.stride = p.uint("stride", 1);
            l.padding = p.uint("pad", 0);
            spec.layers.emplace_back(l);
        } else if (kw == "avg_pool") {
            AvgPoolLayer l;
            l.window = p.uint("window");
            l.stride = p.uint("stride", l.window);
            spec.layers.emplace_back(l);
        } else if (kw == "activation") {
            const auto kind = p.word("kind");
            if (kind == "sigmoid") {
                spec.layers.emplace_back(ActivationLayer{Activation::sigmoid});
            } else if (kind == "relu") {
                spec.layers.emplace_back(ActivationLayer{Activation::relu});
            } else {
                p.fail("unknown activation '" + kind + "'");
            }
        } else if (kw == "flatten") {
            spec.layers.emplace_back(FlattenLayer{});
        } else if (kw == "dense") {
            DenseLayer l;
            l.out_dim = p.uint("out");
            const auto bias = p.uint("bias", 1);
            if (bias > 1) p.fail("field 'bias' must be 0 or 1");
            l.biased = bias == 1;
            spec.layers.emplace_back(l);
        } else {
            p.fail("unknown layer kind '" + kw + "'");
        }
        p.finish();
    }
    if (!have_input) throw ParseError("model spec: missing 'input' line", text.size());
    if (!have_classes) throw ParseError("model spec: missing 'classes' line", text.size());
    return spec;
}

/// 64-bit FNV-1a over the canonical spec text.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t spec_digest(const ModelSpec& spec) { return fnv1a64(to_text(spec)); }

// ---- shape checking -----------------------------------------------------------

/// A parameterized layer's name and tensor shapes.
struct ParamSlot {
    std::size_t layer_index;
    std::string name; // "conv0", "dense1", ...
    Shape weight_shape;
    std::optional<Shape> bias_shape;
    std::size_t fan_in;
};

struct ModelLayout {
    std::vector<Shape> layer_outputs; // output shape after each layer
    std::vector<ParamSlot> slots;     // in layer order
};

inline std::string layer_label(const ModelSpec& spec, std::size_t i) {
    return "layer " + std::to_string(i) + " (" + layer_text(spec.layers.at(i)) + ")";
}

/// Propagates shapes layer by layer; throws BuildError naming the first
/// layer that does not conform.
inline ModelLayout layout(const ModelSpec& spec) {
    if (spec.height == 0 || spec.width == 0 || spec.channels == 0) {
        throw BuildError("model input dimensions must be positive");
    }
    if (spec.classes == 0) throw BuildError("model class count must be positive");
    ModelLayout out;
    Shape cur = spec.input_shape();
    std::size_t conv_count = 0, dense_count = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto fail = [&](const std::string& why) -> void {
            throw BuildError(layer_label(spec, i) + ": " + why);
        };
        try {
            if (const auto* c = std::get_if<ConvLayer>(&spec.layers[i])) {
                if (cur.size() != 3) fail("conv needs an HxWxC input, got " + shape_string(cur));
                if (c->kernel == 0 || c->out_channels == 0) fail("kernel and out must be positive");
                const auto h = ops::window_output_size(cur[0], c->kernel, c->stride, c->padding, "conv");
                const auto w = ops::window_output_size(cur[1], c->kernel, c->stride, c->padding, "conv");
                out.slots.push_back({i, "conv" + std::to_string(conv_count++),
                                     Shape{c->kernel, c->kernel, cur[2], c->out_channels},
                                     std::nullopt, c->kernel * c->kernel * cur[2]});
                cur = {h, w, c->out_channels};
            } else if (const auto* p = std::get_if<AvgPoolLayer>(&spec.layers[i])) {
                if (cur.size() != 3) fail("avg_pool needs an HxWxC input, got " + shape_string(cur));
                cur = ops::avg_pool2d_output_shape(cur, {p->window, p->stride});
            } else if (std::holds_alternative<FlattenLayer>(spec.layers[i])) {
                cur = {shape_numel(cur)};
            } else if (const auto* d = std::get_if<DenseLayer>(&spec.layers[i])) {
                if (cur.size() != 1) fail("dense needs a flat input, got " + shape_string(cur));
                if (d->out_dim == 0) fail("out must be positive");
                out.slots.push_back({i, "dense" + std::to_string(dense_count++),
                                     Shape{d->out_dim, cur[0]},
                                     d->biased ? std::optional<Shape>(Shape{d->out_dim})
                                               : std::nullopt,
                                     cur[0]});
                cur = {d->out_dim};
            }
        } catch (const GeometryError& e) {
            throw BuildError(layer_label(spec, i) + ": " + e.what());
        }
        out.layer_outputs.push_back(cur);
    }
    if (cur != Shape{spec.classes}) {
        throw BuildError("final layer produces " + shape_string(cur) + ", expected " +
                         std::to_string(spec.classes) + " logits");
    }
    return out;
}

// ---- parameters -------------------------------------------------------------

struct LayerParams {
    std::string name;
    Tensor weight;
    std::optional<Tensor> bias;
};

/// Trainable tensors of a model, in layer order, together with the spec they
/// were built for.
struct ModelParams {
    ModelSpec spec;
    std::vector<LayerParams> layers;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.numel() + (l.bias ? l.bias->numel() : 0);
        return n;
    }

    const LayerParams& layer(std::string_view name) const {
        for (const auto& l : layers)
            if (l.name == name) return l;
        throw ContractError("no parameterized layer named '" + std::string(name) + "'");
    }
};

/// Initializes every weight and bias uniformly in [-0.5, 0.5] / sqrt(fan_in).
inline ModelParams build_model(const ModelSpec& spec, SeedRng& rng) {
    const auto lay = layout(spec);
    ModelParams params{spec, {}};
    for (const auto& slot : lay.slots) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(slot.fan_in));
        auto init = [&](const Shape& shape) {
            Tensor t(shape);
            for (auto& v : t.data()) v = rng.uniform(-0.5, 0.5) * scale;
            return t;
        };
        LayerParams lp{slot.name, init(slot.weight_shape), std::nullopt};
        if (slot.bias_shape) lp.bias = init(*slot.bias_shape);
        params.layers.push_back(std::move(lp));
    }
    return params;
}

inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
    SeedRng rng(seed);
    return build_model(spec, rng);
}

/// A parameter tensor flattened out of ModelParams: "<layer>.W" or "<layer>.B".
struct NamedTensor {
    std::string name;
    Tensor value;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

inline std::vector<NamedTensor> flatten_params(const ModelParams& params) {
    std::vector<NamedTensor> out;
    for (const auto& l : params.layers) {
        out.push_back({l.name + ".W", l.weight});
        if (l.bias) out.push_back({l.name + ".B", *l.bias});
    }
    return out;
}

// ---- forward pass -------------------------------------------------------------

/// Appends the model's forward pass to `g` and returns the logits node.
/// `param_nodes` follows flatten_params() order.
inline NodeId forward_logits(ExprGraph& g, const ModelSpec& spec,
                             std::span<const NodeId> param_nodes, NodeId input) {
    if (g.shape(input) != spec.input_shape()) {
        throw DimensionError("input shape " + shape_string(g.shape(input)) +
                             " does not match model input " + shape_string(spec.input_shape()));
    }
    std::size_t next = 0;
    auto take = [&]() {
        if (next >= param_nodes.size()) throw ContractError("too few parameter nodes for model");
        return param_nodes[next++];
    };
    NodeId cur = input;
    for (const auto& layer : spec.layers) {
        if (const auto* c = std::get_if<ConvLayer>(&layer)) {
            cur = g.conv2d(cur, take(), c->stride, c->padding);
        } else if (const auto* p = std::get_if<AvgPoolLayer>(&layer)) {
            cur = g.avg_pool2d(cur, p->window, p->stride);
        } else if (const auto* a = std::get_if<ActivationLayer>(&layer)) {
            cur = a->kind == Activation::sigmoid ? g.sigmoid(cur) : g.relu(cur);
        } else if (std::holds_alternative<FlattenLayer>(layer)) {
            cur = g.flatten(cur);
        } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
            const NodeId w = take();
            cur = d->biased ? g.affine(w, cur, take()) : g.matvec(w, cur);
        }
    }
    if (next != param_nodes.size()) throw ContractError("too many parameter nodes for model");
    return cur;
}

/// cross_entropy(softmax(logits), target) appended to `g`.
inline NodeId forward_loss(ExprGraph& g, const ModelSpec& spec,
                           std::span<const NodeId> param_nodes, NodeId input, NodeId target) {
    const NodeId logits = forward_logits(g, spec, param_nodes, input);
    if (g.shape(target) != g.shape(logits)) {
        throw DimensionError("target shape " + shape_string(g.shape(target)) +
                             " does not match logits " + shape_string(g.shape(logits)));
    }
    return g.cross_entropy(g.softmax(logits), target);
}

/// A standalone loss graph whose input, target and parameters are all
/// variable leaves.
struct LossGraph {
    ExprGraph graph;
    NodeId loss;
    NodeId input;
    NodeId target;
    std::vector<NodeId> params; // flatten_params() order
    std::vector<std::string> param_names;
};

inline LossGraph forward_loss(const ModelParams& params, const Tensor& input,
                              const Tensor& target) {
    LossGraph lg;
    lg.input = lg.graph.variable(input);
    lg.target = lg.graph.variable(target);
    for (auto& nt : flatten_params(params)) {
        lg.params.push_back(lg.graph.variable(std::move(nt.value)));
        lg.param_names.push_back(std::move(nt.name));
    }
    lg.loss = forward_loss(lg.graph, params.spec, lg.params, lg.input, lg.target);
    return lg;
}

/// Logits of the model on one input, without building a reusable graph.
inline Tensor predict_logits(const ModelParams& params, const Tensor& input) {
    ExprGraph g;
    const NodeId x = g.constant(input);
    std::vector<NodeId> nodes;
    for (auto& nt : flatten_params(params)) nodes.push_back(g.constant(std::move(nt.value)));
    return g.value(forward_logits(g, params.spec, nodes, x));
}

/// One-hot probability vector.
inline Tensor one_hot(std::size_t index, std::size_t classes) {
    if (index >= classes) {
        throw ContractError("label " + std::to_string(index) + " out of range for " +
                            std::to_string(classes) + " classes");
    }
    Tensor t(Shape{classes});
    t[index] = 1.0;
    return t;
}

// ---- default attack model ---------------------------------------------------

/// conv(5,6,1,2) > sigmoid > avg_pool(2,2) > conv(5,12,1,2) > sigmoid >
/// avg_pool(2,2) > flatten > dense(m, biased).
inline ModelSpec default_attack_spec(std::size_t height, std::size_t width, std::size_t channels,
                                     std::size_t classes) {
    if (height < 12 || width < 12) {
        throw GeometryError("default attack model needs an input of at least 12x12, got " +
                            std::to_string(height) + "x" + std::to_string(width));
    }
    ModelSpec spec{height, width, channels, classes, {}};
    spec.layers = {ConvLayer{5, 6, 1, 2},  ActivationLayer{Activation::sigmoid},
                   AvgPoolLayer{2, 2},     ConvLayer{5, 12, 1, 2},
                   ActivationLayer{Activation::sigmoid}, AvgPoolLayer{2, 2},
                   FlattenLayer{},         DenseLayer{classes, true}};
    try {
        (void)layout(spec);
    } catch (const BuildError& e) {
        throw GeometryError(e.what());
    }
    return spec;
}

} // namespace gradleak
