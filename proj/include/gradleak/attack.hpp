#pragma once

// Gradient inversion: closed-form recovery of a biased dense layer's input,
// label inference from the sign of the last bias gradient, and iterative
// gradient matching (with an optional mean-anchoring regularizer).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gradleak/federated.hpp"
#include "gradleak/graph.hpp"
#include "gradleak/metrics.hpp"
#include "gradleak/model.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/trace.hpp"

namespace gradleak {

// ---- analytic reconstruction ------------------------------------------------

inline constexpr double bias_gradient_tolerance = 1e-12;

struct FcReconstruction {
    Tensor input;
    std::size_t row = 0; // bias row the reconstruction was read from
    double spread = 0.0; // max |difference| between rows with usable bias gradient
};

/// Recovers the input X of Y = W X + B from dL/dW and dL/dB: row r of dL/dW
/// equals dL/dB_r * X^T, so X = dL/dW_r / dL/dB_r for the row with the
/// largest |dL/dB_r|.
inline FcReconstruction fc_analytic_reconstruct_diagnostic(const Tensor& grad_w,
                                                           const Tensor& grad_b,
                                                           double tolerance = bias_gradient_tolerance) {
    if (grad_w.rank() != 2 || grad_b.rank() != 1 || grad_b.dim(0) != grad_w.dim(0)) {
        throw DimensionError("fc_analytic_reconstruct: expected dL/dW [m x n] and dL/dB [m], got " +
                             shape_string(grad_w.shape()) + " and " + shape_string(grad_b.shape()));
    }
    const std::size_t m = grad_w.dim(0), n = grad_w.dim(1);
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i) {
        if (std::abs(grad_b[i]) > std::abs(grad_b[best])) best = i;
    }
    if (!(std::abs(grad_b[best]) > tolerance)) {
        throw DomainError("fc_analytic_reconstruct: bias gradient vanishes (all |dL/dB_i| <= " +
                          format_double(tolerance) + ")");
    }
    FcReconstruction out{Tensor(Shape{n}), best, 0.0};
    for (std::size_t j = 0; j < n; ++j) out.input[j] = grad_w[best * n + j] / grad_b[best];
    for (std::size_t i = 0; i < m; ++i) {
        if (!(std::abs(grad_b[i]) > tolerance)) continue;
        for (std::size_t j = 0; j < n; ++j) {
            out.spread = std::max(out.spread, std::abs(grad_w[i * n + j] / grad_b[i] - out.input[j]));
        }
    }
    return out;
}

inline Tensor fc_analytic_reconstruct(const Tensor& grad_w, const Tensor& grad_b) {
    return fc_analytic_reconstruct_diagnostic(grad_w, grad_b).input;
}

// ---- label inference ----------------------------------------------------------

/// Index of the most negative entry of the final bias gradient. Under
/// softmax cross-entropy with one sample, dL/dlogit_i = p_i - t_i, which is
/// negative only at the true class.
inline std::size_t label_from_gradient_sign(const Tensor& final_bias_grad) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < final_bias_grad.numel(); ++i) {
        if (final_bias_grad[i] < 0.0 && (!best || final_bias_grad[i] < final_bias_grad[*best])) {
            best = i;
        }
    }
    if (!best) throw AmbiguityError("label inference: no strictly negative bias gradient entry");
    return *best;
}

/// Name of the last layer's bias tensor; the last layer must be a biased dense layer.
inline std::string final_bias_name(const ModelSpec& spec) {
    const auto lay = layout(spec);
    const auto* dense = spec.layers.empty() ? nullptr : std::get_if<DenseLayer>(&spec.layers.back());
    if (!dense || !dense->biased) {
        throw ContractError("label inference needs a biased dense final layer");
    }
    return lay.slots.back().name + ".B";
}

inline std::size_t label_from_gradient_sign(const GradientBundle& target, const ModelSpec& spec) {
    if (target.spec_digest != spec_digest(spec)) {
        throw IncompatibleError("label inference: bundle digest does not match the model spec");
    }
    return label_from_gradient_sign(target.tensor(final_bias_name(spec)));
}

// ---- gradient matching ----------------------------------------------------------

/// D = sum over parameters of ||virtual - true||^2 as a graph node.
inline NodeId gradient_distance(ExprGraph& g, std::span<const NodeId> virtual_grads,
                                const GradientBundle& true_grads) {
    if (virtual_grads.size() != true_grads.tensors.size()) {
        throw IncompatibleError("gradient_distance: " + std::to_string(virtual_grads.size()) +
                                " virtual gradients vs " +
                                std::to_string(true_grads.tensors.size()) + " true gradients");
    }
    std::optional<NodeId> total;
    for (std::size_t i = 0; i < virtual_grads.size(); ++i) {
        const auto& t = true_grads.tensors[i];
        if (g.shape(virtual_grads[i]) != t.value.shape()) {
            throw IncompatibleError("gradient_distance: shape mismatch on '" + t.name + "'");
        }
        const NodeId term = g.squared_distance(virtual_grads[i], g.constant(t.value));
        total = total ? g.add(*total, term) : term;
    }
    if (!total) throw IncompatibleError("gradient_distance: no gradients");
    return *total;
}

/// Plain-value D between two bundles.
inline double gradient_distance(const GradientBundle& a, const GradientBundle& b) {
    if (a.tensors.size() != b.tensors.size()) {
        throw IncompatibleError("gradient_distance: bundles hold different tensor counts");
    }
    double d = 0.0;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        const auto& x = a.tensors[i].value;
        const auto& y = b.tensors[i].value;
        if (x.shape() != y.shape()) {
            throw IncompatibleError("gradient_distance: shape mismatch on '" + a.tensors[i].name + "'");
        }
        for (std::size_t k = 0; k < x.numel(); ++k) d += (x[k] - y[k]) * (x[k] - y[k]);
    }
    return d;
}

/// (1/P) sum_p (x_p - mean(x))^2, with the mean a function of x.
inline NodeId mean_anchor_penalty(ExprGraph& g, NodeId x) {
    const double inv = 1.0 / static_cast<double>(g.value(x).numel());
    const NodeId mean = g.scale_shift(g.sum(x), inv);
    const NodeId dev = g.sub(x, g.broadcast(mean, g.shape(x)));
    return g.scale_shift(g.sum(g.mul(dev, dev)), inv);
}

struct VirtualSample {
    Tensor input;        // same shape as the victim image
    Tensor label_logits; // [classes]
};

enum class AttackVariant { baseline, improved };

struct AttackConfig {
    double eta = 1000.0;
    std::size_t iterations = 200;
    std::uint64_t seed = 0;
    AttackVariant variant = AttackVariant::baseline;
    double lambda_mean = 0.01;
    std::vector<std::size_t> checkpoints{20, 40, 50, 80, 200};
    bool clamp_output = true;
    // Off by default: retry a step with half the learning rate whenever the
    // objective would increase.
    bool step_halving = false;
    bool keep_snapshots = false;
    double divergence_factor = 1e6;

    void validate() const {
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ContractError("attack: eta must be positive");
        if (iterations == 0) throw ContractError("attack: iterations must be positive");
        if (!(lambda_mean >= 0.0)) throw ContractError("attack: lambda_mean must be non-negative");
        if (!std::is_sorted(checkpoints.begin(), checkpoints.end())) {
            throw ContractError("attack: checkpoints must be sorted");
        }
        for (auto c : checkpoints) {
            if (c < 1 || c > iterations) {
                throw ContractError("attack: checkpoint " + std::to_string(c) +
                                    " outside [1, " + std::to_string(iterations) + "]");
            }
        }
    }

    /// Regularizer weight actually applied.
    double effective_lambda() const {
        return variant == AttackVariant::improved ? lambda_mean : 0.0;
    }
};

class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, AttackTrace trace)
        : Error(what), trace_(std::move(trace)) {}
    const AttackTrace& trace() const noexcept { return trace_; }

private:
    AttackTrace trace_;
};

struct AttackResult {
    VirtualSample sample;
    AttackTrace trace;
};

/// Objective value and meta-gradient at one virtual sample.
struct MatchEvaluation {
    double distance = 0.0;  // D
    double objective = 0.0; // D + lambda * penalty
    Tensor grad_input;
    Tensor grad_label;
};

/// Builds softmax(label) -> loss -> dloss/dW -> D (+ penalty) and
/// differentiates D with respect to the virtual sample.
inline MatchEvaluation evaluate_match(const ModelParams& params, const GradientBundle& target,
                                      const VirtualSample& sample, double lambda_mean) {
    ExprGraph g;
    const NodeId x = g.variable(sample.input);
    const NodeId y = g.variable(sample.label_logits);
    std::vector<NodeId> w;
    for (auto& nt : flatten_params(params)) w.push_back(g.variable(std::move(nt.value)));

    const NodeId soft_label = g.softmax(y);
    const NodeId loss = forward_loss(g, params.spec, w, x, soft_label);
    const auto virtual_grads = g.grad(loss, w);
    const NodeId distance = gradient_distance(g, virtual_grads, target);
    NodeId objective = distance;
    if (lambda_mean > 0.0) {
        objective = g.add(distance, g.scale_shift(mean_anchor_penalty(g, x), lambda_mean));
    }
    const auto mg = meta_grad(g, objective, x, y);
    return {g.value(distance).item(), g.value(objective).item(), mg.input, mg.label};
}

/// Stream offset for the virtual-sample draws, so one seed can drive both
/// parameter init and attack init without the two sharing draws.
inline constexpr std::uint64_t virtual_sample_stream = 0xD1B54A32D192ED03ULL;

/// x' and y' drawn from N(0,1), input first.
inline VirtualSample random_virtual_sample(const ModelSpec& spec, std::uint64_t seed) {
    SeedRng rng(seed ^ virtual_sample_stream);
    VirtualSample s;
    s.input = rng.normal_tensor(spec.input_shape());
    s.label_logits = rng.normal_tensor(Shape{spec.classes});
    return s;
}

/// Gradient matching from an explicit starting sample. `truth`, when given,
/// adds image MSE to every checkpoint record.
inline AttackResult dlg_attack_from(const ModelSpec& spec, const ModelParams& params,
                                    const GradientBundle& target, const AttackConfig& cfg,
                                    VirtualSample start, const Tensor* truth = nullptr) {
    cfg.validate();
    if (spec_digest(params.spec) != spec_digest(spec)) {
        throw IncompatibleError("attack: parameters were built for a different model spec");
    }
    check_compatible(target, params);
    if (start.input.shape() != spec.input_shape() ||
        start.label_logits.shape() != Shape{spec.classes}) {
        throw DimensionError("attack: virtual sample shape does not match the model");
    }
    if (truth && truth->shape() != spec.input_shape()) {
        throw DimensionError("attack: ground-truth image shape does not match the model");
    }

    const double lambda = cfg.effective_lambda();
    AttackResult result{std::move(start), {}};
    auto& cur = result.sample;
    auto& trace = result.trace;

    MatchEvaluation ev = evaluate_match(params, target, cur, lambda);
    trace.initial_distance = ev.distance;
    double eta = cfg.eta;
    auto next_cp = cfg.checkpoints.begin();

    // A step can push the virtual softmax into underflow; that counts as an
    // infinite objective rather than an error.
    auto evaluate_step = [&](const VirtualSample& s) {
        try {
            return evaluate_match(params, target, s, lambda);
        } catch (const DomainError&) {
            const double inf = std::numeric_limits<double>::infinity();
            return MatchEvaluation{inf, inf, {}, {}};
        }
    };

    auto take_step = [&](double step) {
        VirtualSample next = cur;
        for (std::size_t k = 0; k < next.input.numel(); ++k) next.input[k] -= step * ev.grad_input[k];
        for (std::size_t k = 0; k < next.label_logits.numel(); ++k) {
            next.label_logits[k] -= step * ev.grad_label[k];
        }
        return next;
    };

    for (std::size_t i = 1; i <= cfg.iterations; ++i) {
        VirtualSample next = take_step(eta);
        MatchEvaluation next_ev = evaluate_step(next);
        if (cfg.step_halving) {
            for (int tries = 0; tries < 60 && !(next_ev.objective <= ev.objective); ++tries) {
                eta *= 0.5;
                ++trace.step_halvings;
                next = take_step(eta);
                next_ev = evaluate_step(next);
            }
        }
        cur = std::move(next);
        ev = std::move(next_ev);

        const bool blew_up = !std::isfinite(ev.distance) ||
                             (trace.initial_distance > 0.0 &&
                              ev.distance > cfg.divergence_factor * trace.initial_distance);
        if (blew_up) {
            throw DivergenceError("attack diverged at iteration " + std::to_string(i) +
                                      ": D = " + format_double(ev.distance) + " from initial " +
                                      format_double(trace.initial_distance),
                                  std::move(trace));
        }

        while (next_cp != cfg.checkpoints.end() && *next_cp == i) {
            TraceRecord rec{i, ev.distance, std::nullopt, std::nullopt, std::nullopt};
            if (truth) {
                rec.mse_255 = mse_255(*truth, cur.input);
                rec.mse_255_unclamped = mse_255_unclamped(*truth, cur.input);
            }
            if (cfg.keep_snapshots) rec.snapshot = cur.input;
            trace.records.push_back(std::move(rec));
            ++next_cp;
        }
    }

    if (cfg.clamp_output) {
        for (auto& v : cur.input.data()) v = std::clamp(v, 0.0, 1.0);
    }
    return result;
}

/// Gradient matching from a seeded N(0,1) start. Uses the regularized
/// objective when cfg.variant is improved.
inline AttackResult dlg_attack(const ModelSpec& spec, const ModelParams& params,
                               const GradientBundle& target, const AttackConfig& cfg,
                               const Tensor* truth = nullptr) {
    return dlg_attack_from(spec, params, target, cfg, random_virtual_sample(spec, cfg.seed), truth);
}

/// dlg_attack with the mean-anchoring regularizer switched on.
inline AttackResult improved_dlg(const ModelSpec& spec, const ModelParams& params,
                                 const GradientBundle& target, AttackConfig cfg,
                                 const Tensor* truth = nullptr) {
    cfg.variant = AttackVariant::improved;
    return dlg_attack(spec, params, target, cfg, truth);
}

/// Predicted class of the recovered label logits.
inline std::size_t recovered_label(const VirtualSample& s) {
    const auto v = s.label_logits.data();
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

} // namespace gradleak
