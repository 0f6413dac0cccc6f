#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/ops.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak {

/// Index of a node inside one ExprGraph.
struct NodeId {
    std::uint32_t index = 0;
    friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
    constant,
    variable,
    add,
    sub,
    mul,
    div,
    scale_shift,
    log,
    sigmoid,
    relu,
    step,
    sum,
    broadcast,
    reshape,
    matvec,
    matvec_transposed,
    outer,
    conv2d,
    conv2d_input_grad,
    conv2d_kernel_grad,
    rotate180,
    avg_pool2d,
    avg_pool2d_grad,
    softmax,
    cross_entropy,
    custom,
};

inline const char* op_name(OpKind kind) {
    switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::variable: return "variable";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale_shift: return "scale_shift";
    case OpKind::log: return "log";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::relu: return "relu";
    case OpKind::step: return "step";
    case OpKind::sum: return "sum";
    case OpKind::broadcast: return "broadcast";
    case OpKind::reshape: return "reshape";
    case OpKind::matvec: return "matvec";
    case OpKind::matvec_transposed: return "matvec_transposed";
    case OpKind::outer: return "outer";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv2d_input_grad: return "conv2d_input_grad";
    case OpKind::conv2d_kernel_grad: return "conv2d_kernel_grad";
    case OpKind::rotate180: return "rotate180";
    case OpKind::avg_pool2d: return "avg_pool2d";
    case OpKind::avg_pool2d_grad: return "avg_pool2d_grad";
    case OpKind::softmax: return "softmax";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::custom: return "custom";
    }
    return "unknown";
}

class ExprGraph;

/// A user-supplied primitive. `vjp` may be empty, in which case the
/// primitive can be evaluated but not differentiated.
struct CustomOp {
    using Forward = std::function<Tensor(std::span<const Tensor* const> inputs)>;
    /// Returns one gradient node per input (same order) given the node's
    /// inputs, its own output node and the upstream gradient node.
    using Vjp = std::function<std::vector<NodeId>(ExprGraph& g, std::span<const NodeId> inputs,
                                                  NodeId output, NodeId upstream)>;
    std::string name;
    Forward forward;
    Vjp vjp;
};

/// Append-only expression graph over tensors with eager evaluation.
///
/// Every node stores its value when it is appended. grad() appends the
/// reverse-mode adjoint computation as further nodes of the same graph, built
/// only from ops that themselves have registered derivatives, so gradients
/// can be differentiated again (reverse-over-reverse).
///
/// A graph is single-threaded; tensors read out of it are plain values.
class ExprGraph {
public:
    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor value;
        double alpha = 1.0;
        double beta = 0.0;
        ops::ConvGeometry conv{};
        ops::PoolGeometry pool{};
        Shape aux_shape{}; // input/kernel shape for adjoint ops, target shape for reshape
        std::shared_ptr<const CustomOp> custom{};
    };

    // ---- leaves ---------------------------------------------------------

    NodeId constant(Tensor value) { return push({OpKind::constant, {}, std::move(value)}); }
    NodeId variable(Tensor value) { return push({OpKind::variable, {}, std::move(value)}); }

    // ---- element-wise -----------------------------------------------------

    NodeId add(NodeId a, NodeId b) { return push({OpKind::add, {a, b}, ops::add(val(a), val(b))}); }
    NodeId sub(NodeId a, NodeId b) { return push({OpKind::sub, {a, b}, ops::sub(val(a), val(b))}); }
    NodeId mul(NodeId a, NodeId b) { return push({OpKind::mul, {a, b}, ops::mul(val(a), val(b))}); }
    NodeId div(NodeId a, NodeId b) { return push({OpKind::div, {a, b}, ops::div(val(a), val(b))}); }

    /// alpha * a + beta.
    NodeId scale_shift(NodeId a, double alpha, double beta = 0.0) {
        Node n{OpKind::scale_shift, {a}, ops::scale_shift(val(a), alpha, beta)};
        n.alpha = alpha;
        n.beta = beta;
        return push(std::move(n));
    }
    NodeId neg(NodeId a) { return scale_shift(a, -1.0); }

    NodeId log(NodeId a) { return push({OpKind::log, {a}, ops::log(val(a))}); }
    NodeId sigmoid(NodeId a) { return push({OpKind::sigmoid, {a}, ops::sigmoid(val(a))}); }
    NodeId relu(NodeId a) { return push({OpKind::relu, {a}, ops::relu(val(a))}); }
    /// Heaviside step; carries no derivative (treated as locally constant).
    NodeId step(NodeId a) { return push({OpKind::step, {a}, ops::step(val(a))}); }

    // ---- shape ------------------------------------------------------------

    /// Sum of all elements as a rank-0 tensor.
    NodeId sum(NodeId a) { return push({OpKind::sum, {a}, ops::sum(val(a))}); }

    /// Replicates a single-element tensor to `shape`.
    NodeId broadcast(NodeId scalar, Shape shape) {
        Node n{OpKind::broadcast, {scalar}, ops::broadcast(val(scalar), shape)};
        n.aux_shape = std::move(shape);
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, Shape shape) {
        Node n{OpKind::reshape, {a}, val(a).reshaped(shape)};
        n.aux_shape = std::move(shape);
        return push(std::move(n));
    }
    NodeId flatten(NodeId a) { return reshape(a, Shape{val(a).numel()}); }

    // ---- linear algebra ---------------------------------------------------

    NodeId matvec(NodeId w, NodeId x) {
        return push({OpKind::matvec, {w, x}, ops::matvec(val(w), val(x))});
    }
    NodeId matvec_transposed(NodeId w, NodeId g) {
        return push({OpKind::matvec_transposed, {w, g}, ops::matvec_transposed(val(w), val(g))});
    }
    NodeId outer(NodeId a, NodeId b) {
        return push({OpKind::outer, {a, b}, ops::outer(val(a), val(b))});
    }
    /// W x + b.
    NodeId affine(NodeId w, NodeId x, NodeId b) {
        // Validate up front so the error names the affine operands.
        (void)ops::affine(val(w), val(x), val(b));
        return add(matvec(w, x), b);
    }

    // ---- convolution and pooling -------------------------------------------

    /// Cross-correlation (flip=false) or true convolution (flip=true).
    NodeId conv2d(NodeId input, NodeId kernel, std::size_t stride, std::size_t padding,
                  bool flip = false) {
        const NodeId k = flip ? rotate180(kernel) : kernel;
        Node n{OpKind::conv2d, {input, k},
               ops::conv2d_correlate(val(input), val(k), {stride, padding})};
        n.conv = {stride, padding};
        return push(std::move(n));
    }

    NodeId rotate180(NodeId kernel) {
        return push({OpKind::rotate180, {kernel}, ops::rotate180(val(kernel))});
    }

    NodeId avg_pool2d(NodeId input, std::size_t window, std::size_t stride) {
        Node n{OpKind::avg_pool2d, {input}, ops::avg_pool2d(val(input), window, stride)};
        n.pool = {window, stride};
        return push(std::move(n));
    }

    // ---- classification head -------------------------------------------------

    NodeId softmax(NodeId logits) {
        return push({OpKind::softmax, {logits}, ops::softmax(val(logits))});
    }

    /// Scalar -sum target * ln(probs).
    NodeId cross_entropy(NodeId probs, NodeId target) {
        return push({OpKind::cross_entropy, {probs, target},
                     Tensor::scalar(ops::cross_entropy(val(probs), val(target)))});
    }

    /// Sum of squared element-wise differences.
    NodeId squared_distance(NodeId a, NodeId b) {
        const NodeId d = sub(a, b);
        return sum(mul(d, d));
    }

    NodeId custom(std::shared_ptr<const CustomOp> op, std::vector<NodeId> inputs) {
        std::vector<const Tensor*> args;
        args.reserve(inputs.size());
        for (auto id : inputs) args.push_back(&val(id));
        Node n{OpKind::custom, std::move(inputs), op->forward(args)};
        n.custom = std::move(op);
        return push(std::move(n));
    }

    // ---- introspection ----------------------------------------------------

    const Tensor& value(NodeId id) const { return val(id); }
    const Shape& shape(NodeId id) const { return val(id).shape(); }
    const Node& node(NodeId id) const { return nodes_.at(id.index); }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Name of a node's primitive, as used in diagnostics.
    std::string primitive_name(NodeId id) const {
        const Node& n = node(id);
        return n.kind == OpKind::custom ? n.custom->name : op_name(n.kind);
    }

    // ---- differentiation ----------------------------------------------------

    /// Appends nodes computing d(output)/d(v) for each v in `wrt` and returns
    /// them in order. `output` must hold a single element; every entry of
    /// `wrt` must be a variable leaf. Variables not listed are held constant.
    /// A variable the output does not depend on gets a zero constant.
    std::vector<NodeId> grad(NodeId output, std::span<const NodeId> wrt);

    std::vector<NodeId> grad(NodeId output, std::initializer_list<NodeId> wrt) {
        return grad(output, std::span<const NodeId>(wrt.begin(), wrt.size()));
    }

private:
    const Tensor& val(NodeId id) const {
        if (id.index >= nodes_.size()) throw ContractError("node id out of range");
        return nodes_[id.index].value;
    }

    NodeId push(Node n) {
        for (auto in : n.inputs) {
            if (in.index >= nodes_.size()) throw ContractError("node input out of range");
        }
        nodes_.push_back(std::move(n));
        return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    NodeId zeros_like(NodeId id) { return constant(Tensor(shape(id))); }

    // Gradient contributions of node `id` to each of its inputs; entries for
    // inputs that are not `needed` stay empty.
    std::vector<std::optional<NodeId>> vjp(NodeId id, NodeId upstream,
                                           const std::vector<char>& needed);

    std::vector<Node> nodes_;
};

inline std::vector<NodeId> ExprGraph::grad(NodeId output, std::span<const NodeId> wrt) {
    if (val(output).numel() != 1) {
        throw ContractError("grad: output must be scalar, got shape " +
                            shape_string(shape(output)));
    }
    const std::size_t n = output.index + 1;
    std::vector<char> is_wrt(n, 0);
    for (auto v : wrt) {
        if (node(v).kind != OpKind::variable) {
            throw ContractError("grad: node " + std::to_string(v.index) +
                                " is not a variable leaf");
        }
        if (v.index < n) is_wrt[v.index] = 1;
    }

    // Forward pass: nodes that depend on some requested variable.
    std::vector<char> depends(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const Node& nd = nodes_[i];
        if (is_wrt[i]) {
            depends[i] = 1;
        } else if (nd.kind != OpKind::constant && nd.kind != OpKind::variable &&
                   nd.kind != OpKind::step) {
            for (auto in : nd.inputs) depends[i] |= depends[in.index];
        }
    }
    // Backward pass: of those, the ones the output depends on.
    std::vector<char> needed(n, 0);
    needed[output.index] = depends[output.index];
    for (std::size_t i = n; i-- > 0;) {
        if (!needed[i]) continue;
        for (auto in : nodes_[i].inputs) {
            if (depends[in.index]) needed[in.index] = 1;
        }
    }

    std::vector<std::optional<NodeId>> adjoint(n);
    if (needed[output.index]) adjoint[output.index] = constant(Tensor(shape(output), 1.0));
    for (std::size_t i = n; i-- > 0;) {
        if (!needed[i] || !adjoint[i] || is_wrt[i]) continue;
        const auto contributions = vjp(NodeId{static_cast<std::uint32_t>(i)}, *adjoint[i], needed);
        const auto inputs = nodes_[i].inputs; // copy: nodes_ grows below
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            if (!contributions[k]) continue;
            auto& slot = adjoint[inputs[k].index];
            slot = slot ? add(*slot, *contributions[k]) : *contributions[k];
        }
    }

    std::vector<NodeId> result;
    result.reserve(wrt.size());
    for (auto v : wrt) {
        result.push_back(v.index < n && adjoint[v.index] ? *adjoint[v.index] : zeros_like(v));
    }
    return result;
}

inline std::vector<std::optional<NodeId>> ExprGraph::vjp(NodeId id, NodeId g,
                                                         const std::vector<char>& needed) {
    // Copy what we need: push() may reallocate nodes_.
    const OpKind kind = nodes_[id.index].kind;
    const std::vector<NodeId> in = nodes_[id.index].inputs;
    const double alpha = nodes_[id.index].alpha;
    const auto conv = nodes_[id.index].conv;
    const auto pool = nodes_[id.index].pool;
    const auto custom_op = nodes_[id.index].custom;

    std::vector<std::optional<NodeId>> out(in.size());
    auto want = [&](std::size_t k) { return static_cast<bool>(needed[in[k].index]); };

    switch (kind) {
    case OpKind::constant:
    case OpKind::variable:
    case OpKind::step:
        break;
    case OpKind::add:
        if (want(0)) out[0] = g;
        if (want(1)) out[1] = g;
        break;
    case OpKind::sub:
        if (want(0)) out[0] = g;
        if (want(1)) out[1] = neg(g);
        break;
    case OpKind::mul:
        if (want(0)) out[0] = mul(g, in[1]);
        if (want(1)) out[1] = mul(g, in[0]);
        break;
    case OpKind::div:
        if (want(0)) out[0] = div(g, in[1]);
        if (want(1)) out[1] = neg(div(mul(g, id), in[1]));
        break;
    case OpKind::scale_shift:
        out[0] = scale_shift(g, alpha);
        break;
    case OpKind::log:
        out[0] = div(g, in[0]);
        break;
    case OpKind::sigmoid:
        // s' = s (1 - s), written in terms of the output node.
        out[0] = mul(g, mul(id, scale_shift(id, -1.0, 1.0)));
        break;
    case OpKind::relu:
        out[0] = mul(g, step(in[0]));
        break;
    case OpKind::sum:
        out[0] = broadcast(g, shape(in[0]));
        break;
    case OpKind::broadcast: {
        NodeId s = sum(g);
        if (shape(s) != shape(in[0])) s = reshape(s, shape(in[0]));
        out[0] = s;
        break;
    }
    case OpKind::reshape:
        out[0] = reshape(g, shape(in[0]));
        break;
    case OpKind::matvec:
        if (want(0)) out[0] = outer(g, in[1]);
        if (want(1)) out[1] = matvec_transposed(in[0], g);
        break;
    case OpKind::matvec_transposed:
        if (want(0)) out[0] = outer(in[1], g);
        if (want(1)) out[1] = matvec(in[0], g);
        break;
    case OpKind::outer:
        if (want(0)) out[0] = matvec(g, in[1]);
        if (want(1)) out[1] = matvec_transposed(g, in[0]);
        break;
    case OpKind::conv2d: {
        if (want(0)) {
            Node n{OpKind::conv2d_input_grad, {g, in[1]},
                   ops::conv2d_input_grad(val(g), val(in[1]), shape(in[0]), conv)};
            n.conv = conv;
            n.aux_shape = shape(in[0]);
            out[0] = push(std::move(n));
        }
        if (want(1)) {
            Node n{OpKind::conv2d_kernel_grad, {in[0], g},
                   ops::conv2d_kernel_grad(val(in[0]), val(g), shape(in[1]), conv)};
            n.conv = conv;
            n.aux_shape = shape(in[1]);
            out[1] = push(std::move(n));
        }
        break;
    }
    case OpKind::conv2d_input_grad: {
        // node = A_x(upstream0, K); <g, node> is the same trilinear form as conv2d.
        if (want(0)) out[0] = conv2d(g, in[1], conv.stride, conv.padding);
        if (want(1)) {
            Node n{OpKind::conv2d_kernel_grad, {g, in[0]},
                   ops::conv2d_kernel_grad(val(g), val(in[0]), shape(in[1]), conv)};
            n.conv = conv;
            n.aux_shape = shape(in[1]);
            out[1] = push(std::move(n));
        }
        break;
    }
    case OpKind::conv2d_kernel_grad: {
        if (want(0)) {
            Node n{OpKind::conv2d_input_grad, {in[1], g},
                   ops::conv2d_input_grad(val(in[1]), val(g), shape(in[0]), conv)};
            n.conv = conv;
            n.aux_shape = shape(in[0]);
            out[0] = push(std::move(n));
        }
        if (want(1)) out[1] = conv2d(in[0], g, conv.stride, conv.padding);
        break;
    }
    case OpKind::rotate180:
        out[0] = rotate180(g);
        break;
    case OpKind::avg_pool2d: {
        Node n{OpKind::avg_pool2d_grad, {g}, ops::avg_pool2d_grad(val(g), shape(in[0]), pool)};
        n.pool = pool;
        n.aux_shape = shape(in[0]);
        out[0] = push(std::move(n));
        break;
    }
    case OpKind::avg_pool2d_grad:
        out[0] = avg_pool2d(g, pool.window, pool.stride);
        break;
    case OpKind::softmax: {
        // s * (g - <g, s>)
        const NodeId inner = sum(mul(g, id));
        out[0] = mul(id, sub(g, broadcast(inner, shape(id))));
        break;
    }
    case OpKind::cross_entropy: {
        const NodeId gb = broadcast(g, shape(in[0]));
        if (want(0)) out[0] = neg(mul(gb, div(in[1], in[0])));
        if (want(1)) out[1] = neg(mul(gb, log(in[0])));
        break;
    }
    case OpKind::custom: {
        if (!custom_op->vjp) throw CapabilityError(custom_op->name);
        const auto grads = custom_op->vjp(*this, in, id, g);
        if (grads.size() != in.size()) {
            throw ContractError("custom op '" + custom_op->name +
                                "' returned the wrong number of gradients");
        }
        for (std::size_t k = 0; k < in.size(); ++k) {
            if (want(k)) out[k] = grads[k];
        }
        break;
    }
    }
    return out;
}

/// Gradients of a gradient-matching distance with respect to the virtual
/// input and the virtual label logits.
struct MetaGradient {
    Tensor input;
    Tensor label;
};

/// Differentiates a scalar distance that embeds first-order gradients (so
/// the derivative is second order in the model loss). Throws
/// CapabilityError naming the first primitive on the path without a
/// registered derivative.
inline MetaGradient meta_grad(ExprGraph& g, NodeId distance, NodeId input, NodeId label) {
    const auto grads = g.grad(distance, {input, label});
    return {g.value(grads[0]), g.value(grads[1])};
}

} // namespace gradleak
