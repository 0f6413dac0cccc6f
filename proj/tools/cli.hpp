#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 parse or
// format error, 3 attack divergence.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "gradleak/gradleak.hpp"

namespace gradleak::cli {

enum ExitCode : int { ok = 0, usage = 1, format = 2, divergence = 3 };

namespace detail {

class UsageError : public Error {
public:
    using Error::Error;
};

inline std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot open '" + path.string() + "' for writing");
    out << text;
}

inline ModelSpec load_spec(const std::string& path) { return parse_model_spec(read_text(path)); }

inline ImageBuffer load_image(const std::string& path) {
    if (!std::filesystem::exists(path)) throw UsageError("no such image '" + path + "'");
    return read_image(path);
}

inline GradientBundle load_bundle(const std::string& path) {
    if (!std::filesystem::exists(path)) throw UsageError("no such bundle '" + path + "'");
    return read_bundle(path);
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw UsageError("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::vector<std::size_t> parse_checkpoints(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw UsageError("bad checkpoint '" + item + "'");
        }
    }
    return out;
}

struct AttackOutputs {
    AttackResult result;
    std::optional<Tensor> truth;
};

/// Runs an attack and writes recovered image, trace.tsv and iteration snapshots.
inline AttackOutputs run_attack_to_dir(const ModelSpec& spec, const ModelParams& params,
                                       const GradientBundle& target, AttackConfig cfg,
                                       const std::optional<Tensor>& truth,
                                       const std::filesystem::path& out_dir) {
    ensure_dir(out_dir);
    cfg.keep_snapshots = true;
    const char* ext = image_extension(spec.channels);
    AttackOutputs out{{}, truth};
    try {
        out.result = dlg_attack(spec, params, target, cfg, truth ? &*truth : nullptr);
    } catch (const DivergenceError& e) {
        write_text(out_dir / "trace.tsv", trace_tsv(e.trace()));
        throw;
    }
    write_image((out_dir / (std::string("recovered") + ext)).string(),
                from_tensor(out.result.sample.input));
    write_text(out_dir / "trace.tsv", trace_tsv(out.result.trace));
    for (const auto& rec : out.result.trace.records) {
        if (!rec.snapshot) continue;
        write_image((out_dir / ("iter_" + std::to_string(rec.iteration) + ext)).string(),
                    from_tensor(*rec.snapshot));
    }
    return out;
}

struct AttackFlags {
    double eta = AttackConfig{}.eta;
    std::size_t iters = AttackConfig{}.iterations;
    bool improved = false;
    double lambda = AttackConfig{}.lambda_mean;
    bool step_halving = false;
    bool no_clamp = false;
    std::string checkpoints = "20,40,50,80,200";

    void add_to(CLI::App* app) {
        app->add_option("--eta", eta, "learning rate")->check(CLI::PositiveNumber);
        app->add_option("--iters", iters, "iterations")->check(CLI::PositiveNumber);
        app->add_flag("--improved", improved, "add the mean-anchoring regularizer");
        app->add_option("--lambda", lambda, "regularizer weight")->check(CLI::NonNegativeNumber);
        app->add_flag("--step-halving", step_halving, "halve eta whenever the objective increases");
        app->add_flag("--no-clamp", no_clamp, "write unclamped virtual pixels (still quantized)");
        app->add_option("--checkpoints", checkpoints, "comma-separated iterations to record");
    }

    AttackConfig config(std::uint64_t seed) const {
        AttackConfig cfg;
        cfg.eta = eta;
        cfg.iterations = iters;
        cfg.seed = seed;
        cfg.variant = improved ? AttackVariant::improved : AttackVariant::baseline;
        cfg.lambda_mean = lambda;
        cfg.step_halving = step_halving;
        cfg.clamp_output = !no_clamp;
        cfg.checkpoints.clear();
        for (auto c : parse_checkpoints(checkpoints)) {
            if (c >= 1 && c <= iters) cfg.checkpoints.push_back(c);
        }
        return cfg;
    }
};

/// The demo pipeline for one seed: synthesize, victim gradient, attack, eval.
inline void run_demo(std::uint64_t seed, const AttackFlags& flags, std::size_t size,
                     const std::filesystem::path& dir, std::ostream& log) {
    ensure_dir(dir);
    const ModelSpec spec = default_attack_spec(size, size, 1, 2);
    write_text(dir / "model.txt", to_text(spec));
    const ImageBuffer img = synth_image(SynthKind::blocks, size, size, 1, seed);
    write_image((dir / "truth.pgm").string(), img);
    const Tensor truth = to_tensor(img);
    const ModelParams params = build_model(spec, seed);
    const std::size_t label = seed % 2;
    const GradientBundle target = victim_gradient(params, truth, one_hot(label, spec.classes));
    write_bundle((dir / "grad.glkb").string(), target);

    auto out = run_attack_to_dir(spec, params, target, flags.config(seed), truth, dir);
    const auto report = convergence_report(out.result.trace);
    std::ostringstream summary;
    summary << report_key_value(report);
    summary << "true_label: " << label << '\n';
    summary << "inferred_label: " << label_from_gradient_sign(target, spec) << '\n';
    summary << "recovered_label: " << recovered_label(out.result.sample) << '\n';
    summary << "recovered_mse_255: "
            << format_double(mse_255(truth, to_tensor(from_tensor(out.result.sample.input)))) << '\n';
    write_text(dir / "report.txt", summary.str());
    log << "seed " << seed << ": final mse_255 "
        << (report.final_mse ? format_double(*report.final_mse) : "NA") << '\n';
}

} // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"gradleak: gradient inversion attacks on simulated federated learning"};
    app.require_subcommand(1);

    // victim-grad
    std::string model_path, image_path, grad_path, out_path, truth_path, candidate_path, layer;
    std::size_t label = 0;
    std::uint64_t seed = 0;
    std::uint32_t client = 0, round = 0;
    auto* victim = app.add_subcommand("victim-grad", "compute a client's true gradient bundle");
    victim->add_option("--model", model_path, "model spec file")->required();
    victim->add_option("--image", image_path, "PGM/PPM image")->required();
    victim->add_option("--label", label, "true class index")->required();
    victim->add_option("--seed", seed, "parameter init seed")->required();
    victim->add_option("--client", client, "client id");
    victim->add_option("--round", round, "round index");
    victim->add_option("--out", out_path, "output .glkb")->required();

    // attack
    detail::AttackFlags attack_flags;
    std::string out_dir;
    auto* attack = app.add_subcommand("attack", "reconstruct an image from a gradient bundle");
    attack->add_option("--model", model_path, "model spec file")->required();
    attack->add_option("--grad", grad_path, "victim .glkb")->required();
    attack->add_option("--seed", seed, "parameter and virtual-sample seed")->required();
    attack_flags.add_to(attack);
    attack->add_option("--truth", truth_path, "ground-truth image for MSE");
    attack->add_option("--out", out_dir, "output directory")->required();

    // analytic-fc
    auto* analytic = app.add_subcommand("analytic-fc", "closed-form input of a biased dense layer");
    analytic->add_option("--grad", grad_path, ".glkb bundle")->required();
    analytic->add_option("--layer", layer, "dense layer name, e.g. dense0")->required();
    analytic->add_option("--out", out_path, "output TSV")->required();

    // infer-label
    auto* infer = app.add_subcommand("infer-label", "label from the sign of the last bias gradient");
    infer->add_option("--grad", grad_path, ".glkb bundle")->required();
    infer->add_option("--model", model_path, "model spec file (optional digest check)");

    // eval
    auto* eval = app.add_subcommand("eval", "mean squared error on the 0-255 scale");
    eval->add_option("--truth", truth_path, "reference image")->required();
    eval->add_option("--candidate", candidate_path, "candidate image")->required();

    // aggregate
    std::vector<std::string> inputs;
    bool use_sum = false;
    auto* agg = app.add_subcommand("aggregate", "combine client bundles");
    agg->add_option("inputs", inputs, "client .glkb files")->required();
    agg->add_flag("--sum", use_sum, "sum instead of mean");
    agg->add_option("--out", out_path, "output .glkb")->required();

    // demo
    detail::AttackFlags demo_flags;
    std::size_t count = 1, jobs = 1, size = 16;
    auto* demo = app.add_subcommand("demo", "synthesize, leak, attack and evaluate end to end");
    demo->add_option("--seed", seed, "seed")->required();
    demo->add_option("--out", out_dir, "output directory")->required();
    demo->add_option("--count", count, "number of consecutive seeds")->check(CLI::PositiveNumber);
    demo->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);
    demo->add_option("--size", size, "image side length")->check(CLI::Range(12, 256));
    demo_flags.add_to(demo);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return ok;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    }

    try {
        if (*victim) {
            const auto spec = detail::load_spec(model_path);
            const auto img = detail::load_image(image_path);
            const auto params = build_model(spec, seed);
            const auto bundle =
                victim_gradient(params, to_tensor(img), one_hot(label, spec.classes), client, round);
            write_bundle(out_path, bundle);
        } else if (*attack) {
            const auto spec = detail::load_spec(model_path);
            const auto target = detail::load_bundle(grad_path);
            const auto params = build_model(spec, seed);
            check_compatible(target, params);
            std::optional<Tensor> truth;
            if (!truth_path.empty()) truth = to_tensor(detail::load_image(truth_path));
            auto res = detail::run_attack_to_dir(spec, params, target, attack_flags.config(seed),
                                                 truth, out_dir);
            out << "recovered_label: " << recovered_label(res.result.sample) << '\n';
            if (!res.result.trace.records.empty() && res.result.trace.records.back().mse_255) {
                out << "final_mse_255: " << format_double(*res.result.trace.records.back().mse_255)
                    << '\n';
            }
        } else if (*analytic) {
            const auto bundle = detail::load_bundle(grad_path);
            const auto rec = fc_analytic_reconstruct_diagnostic(bundle.tensor(layer + ".W"),
                                                                bundle.tensor(layer + ".B"));
            std::ostringstream tsv;
            tsv << "index\tvalue\n";
            for (std::size_t i = 0; i < rec.input.numel(); ++i) {
                tsv << i << '\t' << format_double(rec.input[i]) << '\n';
            }
            detail::write_text(out_path, tsv.str());
            out << "row: " << rec.row << "\nspread: " << format_double(rec.spread) << '\n';
        } else if (*infer) {
            const auto bundle = detail::load_bundle(grad_path);
            std::size_t cls = 0;
            if (!model_path.empty()) {
                cls = label_from_gradient_sign(bundle, detail::load_spec(model_path));
            } else {
                const NamedTensor* last_bias = nullptr;
                for (const auto& t : bundle.tensors) {
                    if (t.name.size() > 2 && t.name.ends_with(".B")) last_bias = &t;
                }
                if (!last_bias) throw IncompatibleError("bundle has no bias gradient");
                cls = label_from_gradient_sign(last_bias->value);
            }
            out << cls << '\n';
        } else if (*eval) {
            const auto a = to_tensor(detail::load_image(truth_path));
            const auto b = to_tensor(detail::load_image(candidate_path));
            out << format_double(mse_255(a, b)) << '\n';
        } else if (*agg) {
            std::vector<GradientBundle> bundles;
            for (const auto& p : inputs) bundles.push_back(detail::load_bundle(p));
            write_bundle(out_path, aggregate(bundles, use_sum ? AggregateMode::sum : AggregateMode::mean));
        } else if (*demo) {
            if (count == 1) {
                detail::run_demo(seed, demo_flags, size, out_dir, out);
            } else {
                // Each worker takes seeds i, i + jobs, ...; logs are joined in seed order.
                std::vector<std::ostringstream> logs(count);
                std::vector<std::string> errors(count);
                std::vector<std::thread> workers;
                for (std::size_t w = 0; w < std::min(jobs, count); ++w) {
                    workers.emplace_back([&, w] {
                        for (std::size_t i = w; i < count; i += jobs) {
                            const auto s = seed + i;
                            try {
                                detail::run_demo(s, demo_flags, size,
                                                 std::filesystem::path(out_dir) /
                                                     ("seed_" + std::to_string(s)),
                                                 logs[i]);
                            } catch (const std::exception& e) {
                                errors[i] = e.what();
                            }
                        }
                    });
                }
                for (auto& t : workers) t.join();
                for (std::size_t i = 0; i < count; ++i) {
                    out << logs[i].str();
                    if (!errors[i].empty()) throw Error("seed " + std::to_string(seed + i) + ": " + errors[i]);
                }
            }
        }
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << '\n';
        return divergence;
    } catch (const detail::UsageError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    } catch (const ContractError& e) {
        err << "error: " << e.what() << '\n';
        return usage;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return format;
    }
    return ok;
}

} // namespace gradleak::cli
