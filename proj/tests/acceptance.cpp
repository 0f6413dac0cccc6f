// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "cli.hpp"
#include "gradcheck.hpp"
#include "gradleak/gradleak.hpp"
#include "oracles.hpp"

using namespace gradleak;
namespace fs = std::filesystem;

namespace {

constexpr double kPinnedEta = 1000.0;
constexpr double kPinnedLambda = 0.01;
constexpr std::size_t kImageSide = 16;

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void criterion(const std::string& id, const std::string& title, double budget_s,
               const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream timing;
    timing.precision(3);
    timing << secs << " s";
    if (budget_s > 0) {
        timing << " of " << budget_s << " s budget";
        if (secs > budget_s) {
            o.pass = false;
            o.detail += "; over time budget";
        }
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << "  " << title << ": " << o.detail << " ("
              << timing.str() << ")" << std::endl;
}

Tensor uniform_tensor(Shape shape, SeedRng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

std::string fmt(double v) { return format_double(v); }

struct Scenario {
    ModelSpec spec;
    ModelParams params;
    Tensor truth;
    std::size_t label;
    GradientBundle target;
};

Scenario scenario(SynthKind kind, std::uint64_t seed) {
    const auto spec = default_attack_spec(kImageSide, kImageSide, 1, 2);
    auto params = build_model(spec, seed);
    auto truth = to_tensor(synth_image(kind, kImageSide, kImageSide, 1, seed));
    const std::size_t label = seed % 2;
    auto target = victim_gradient(params, truth, one_hot(label, 2));
    return {spec, std::move(params), std::move(truth), label, std::move(target)};
}

AttackConfig pinned_config(std::uint64_t seed) {
    AttackConfig cfg;
    cfg.eta = kPinnedEta;
    cfg.iterations = 200;
    cfg.checkpoints = {20, 40, 50, 80, 200};
    cfg.seed = seed;
    cfg.lambda_mean = kPinnedLambda;
    return cfg;
}

// Same primitive set as the unit suite, sampled at random points.
std::vector<std::pair<std::string, std::pair<gradcheck::Builder, std::function<std::vector<Tensor>(SeedRng&)>>>>
primitive_checks(SeedRng& wrng) {
    using V = std::vector<NodeId>;
    using Op = std::function<NodeId(ExprGraph&, const V&)>;
    auto shapes = [](std::vector<Shape> s, double lo = -1.0, double hi = 1.0) {
        return [=](SeedRng& r) {
            std::vector<Tensor> out;
            for (const auto& sh : s) out.push_back(uniform_tensor(sh, r, lo, hi));
            return out;
        };
    };
    auto signed_away = [](Shape s) {
        return [=](SeedRng& r) {
            Tensor t = uniform_tensor(s, r, 0.2, 1.5);
            for (auto& v : t.data())
                if (r.uniform() < 0.5) v = -v;
            return std::vector<Tensor>{t};
        };
    };
    auto weighted = [&](Op op, std::size_t outputs) {
        return gradcheck::weighted(std::move(op), uniform_tensor({outputs}, wrng));
    };
    std::vector<std::pair<std::string, std::pair<gradcheck::Builder, std::function<std::vector<Tensor>(SeedRng&)>>>> c;
    c.push_back({"add", {weighted([](ExprGraph& g, const V& v) { return g.add(v[0], v[1]); }, 6), shapes({{6}, {6}})}});
    c.push_back({"sub", {weighted([](ExprGraph& g, const V& v) { return g.sub(v[0], v[1]); }, 6), shapes({{6}, {6}})}});
    c.push_back({"mul", {weighted([](ExprGraph& g, const V& v) { return g.mul(v[0], v[1]); }, 6), shapes({{6}, {6}})}});
    c.push_back({"div",
                 {weighted([](ExprGraph& g, const V& v) { return g.div(v[1], v[0]); }, 6),
                  [=](SeedRng& r) {
                      auto d = signed_away({6})(r);
                      d.push_back(uniform_tensor({6}, r));
                      return d;
                  }}});
    c.push_back({"scale_shift",
                 {weighted([](ExprGraph& g, const V& v) { return g.scale_shift(v[0], -1.5, 0.25); }, 6), shapes({{6}})}});
    c.push_back({"log", {weighted([](ExprGraph& g, const V& v) { return g.log(v[0]); }, 6), shapes({{6}}, 0.3, 3.0)}});
    c.push_back({"sigmoid", {weighted([](ExprGraph& g, const V& v) { return g.sigmoid(v[0]); }, 6), shapes({{6}}, -4, 4)}});
    c.push_back({"relu", {weighted([](ExprGraph& g, const V& v) { return g.relu(v[0]); }, 6), signed_away({6})}});
    c.push_back({"sum",
                 {[](ExprGraph& g, const V& v) {
                      const NodeId s = g.sum(v[0]);
                      return g.mul(s, s);
                  },
                  shapes({{2, 3}})}});
    c.push_back({"broadcast",
                 {weighted([](ExprGraph& g, const V& v) { return g.broadcast(g.sum(v[0]), {2, 3}); }, 6),
                  shapes({{2}})}});
    c.push_back({"reshape", {weighted([](ExprGraph& g, const V& v) { return g.reshape(v[0], {3, 2}); }, 6), shapes({{6}})}});
    c.push_back({"matvec", {weighted([](ExprGraph& g, const V& v) { return g.matvec(v[0], v[1]); }, 4), shapes({{4, 3}, {3}})}});
    c.push_back({"matvec_transposed",
                 {weighted([](ExprGraph& g, const V& v) { return g.matvec_transposed(v[0], v[1]); }, 3),
                  shapes({{4, 3}, {4}})}});
    c.push_back({"outer", {weighted([](ExprGraph& g, const V& v) { return g.outer(v[0], v[1]); }, 12), shapes({{3}, {4}})}});
    c.push_back({"conv2d",
                 {weighted([](ExprGraph& g, const V& v) { return g.conv2d(v[0], v[1], 1, 1); }, 5 * 5 * 2),
                  shapes({{5, 5, 2}, {3, 3, 2, 2}})}});
    c.push_back({"conv2d_flipped_strided",
                 {weighted([](ExprGraph& g, const V& v) { return g.conv2d(v[0], v[1], 2, 0, true); }, 3 * 3 * 2),
                  shapes({{7, 7, 1}, {3, 3, 1, 2}})}});
    c.push_back({"rotate180",
                 {weighted([](ExprGraph& g, const V& v) { return g.rotate180(v[0]); }, 8), shapes({{2, 2, 1, 2}})}});
    c.push_back({"avg_pool2d",
                 {weighted([](ExprGraph& g, const V& v) { return g.avg_pool2d(v[0], 2, 2); }, 2 * 3 * 2),
                  shapes({{4, 6, 2}})}});
    c.push_back({"softmax", {weighted([](ExprGraph& g, const V& v) { return g.softmax(v[0]); }, 5), shapes({{5}}, -2, 2)}});
    c.push_back({"cross_entropy",
                 {[](ExprGraph& g, const V& v) { return g.cross_entropy(g.softmax(v[0]), g.softmax(v[1])); },
                  shapes({{4}, {4}})}});
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "gradleak");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    return cli::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace

int main() {
    std::cout << "acceptance suite: eta " << fmt(kPinnedEta) << ", lambda " << fmt(kPinnedLambda)
              << ", " << kImageSide << "x" << kImageSide << " grayscale" << std::endl;

    criterion("C1", "analytic dense-layer reconstruction", 1.0, [] {
        SeedRng rng(1001);
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 1 + rng.below(32), m = 2 + rng.below(31);
            const ModelSpec spec{1, n, 1, m, {FlattenLayer{}, DenseLayer{m, true}}};
            const auto params = build_model(spec, rng.next_u64());
            const auto x = uniform_tensor(spec.input_shape(), rng);
            const auto b = victim_gradient(params, x, ops::softmax(uniform_tensor({m}, rng)));
            const auto rec = fc_analytic_reconstruct(b.tensor("dense0.W"), b.tensor("dense0.B"));
            worst = std::max(worst, oracle::norm_rel_err(rec, x.reshaped({n})));
        }
        return Outcome{worst < 1e-10, "100 instances, worst relative error " + fmt(worst) + " < 1e-10"};
    });

    criterion("C2", "first-order gradients vs central differences", 30.0, [] {
        SeedRng rng(2002);
        double worst = 0.0;
        std::string worst_name;
        for (const auto& [name, check] : primitive_checks(rng)) {
            for (int point = 0; point < 100; ++point) {
                const double e = gradcheck::first_order_error(check.first, check.second(rng));
                if (e > worst) worst = e, worst_name = name;
            }
        }
        // Default model: every coordinate of the input and parameters would
        // need ~5000 forward passes per point, so each point checks the
        // derivative along three random directions over all of them.
        const auto spec = default_attack_spec(kImageSide, kImageSide, 1, 2);
        double worst_model = 0.0;
        for (int point = 0; point < 100; ++point) {
            const auto params = build_model(spec, rng.next_u64());
            std::vector<Tensor> at{uniform_tensor(spec.input_shape(), rng, 0, 1)};
            for (auto& nt : flatten_params(params)) at.push_back(nt.value);
            const auto target = one_hot(rng.below(2), 2);
            const gradcheck::Builder f = [&](ExprGraph& g, const std::vector<NodeId>& v) {
                const std::vector<NodeId> p(v.begin() + 1, v.end());
                return forward_loss(g, spec, p, v[0], g.constant(target));
            };
            const auto grads = gradcheck::analytic(f, at);
            for (int dir = 0; dir < 3; ++dir) {
                std::vector<Tensor> d;
                double analytic = 0.0;
                for (std::size_t k = 0; k < at.size(); ++k) {
                    d.push_back(uniform_tensor(at[k].shape(), rng));
                    for (std::size_t i = 0; i < at[k].numel(); ++i) analytic += grads[k][i] * d[k][i];
                }
                auto shifted = [&](double s) {
                    auto p = at;
                    for (std::size_t k = 0; k < p.size(); ++k)
                        for (std::size_t i = 0; i < p[k].numel(); ++i) p[k][i] += s * d[k][i];
                    return gradcheck::eval(f, p);
                };
                const double numeric = (shifted(1e-5) - shifted(-1e-5)) / 2e-5;
                worst_model = std::max(worst_model, oracle::rel_err(analytic, numeric));
            }
        }
        const bool ok = worst < 1e-5 && worst_model < 1e-5;
        return Outcome{ok, "20 primitives x 100 points, worst " + fmt(worst) + " (" + worst_name +
                               "); forward_loss x 100 points, worst " + fmt(worst_model) + "; bound 1e-5"};
    });

    criterion("C3", "meta-gradient vs central differences of D", 60.0, [] {
        SeedRng rng(3003);
        // 2 -> 3 -> 2 sigmoid MLP
        ModelSpec mlp{1, 2, 1, 2, {FlattenLayer{}, DenseLayer{3, true}, ActivationLayer{Activation::sigmoid},
                                   DenseLayer{2, true}}};
        double worst_mlp = 0.0, worst_cnn = 0.0;
        auto check = [&](const ModelSpec& spec, int points, double& worst) {
            for (int p = 0; p < points; ++p) {
                const auto params = build_model(spec, rng.next_u64());
                const auto target = victim_gradient(params, uniform_tensor(spec.input_shape(), rng, 0, 1),
                                                    one_hot(rng.below(2), 2));
                const auto s = random_virtual_sample(spec, rng.next_u64());
                const auto ev = evaluate_match(params, target, s, 0.0);
                auto D = [&](const Tensor& x, const Tensor& y) {
                    return evaluate_match(params, target, VirtualSample{x, y}, 0.0).distance;
                };
                const auto fx = oracle::central_diff([&](const Tensor& x) { return D(x, s.label_logits); }, s.input);
                const auto fy = oracle::central_diff([&](const Tensor& y) { return D(s.input, y); }, s.label_logits);
                worst = std::max({worst, oracle::norm_rel_err(ev.grad_input, fx),
                                  oracle::norm_rel_err(ev.grad_label, fy)});
            }
        };
        check(mlp, 50, worst_mlp);
        check(default_attack_spec(12, 12, 1, 2), 5, worst_cnn);
        const bool ok = worst_mlp < 1e-4 && worst_cnn < 1e-4;
        return Outcome{ok, "MLP 50 points worst " + fmt(worst_mlp) + ", CNN 12x12 5 points worst " +
                               fmt(worst_cnn) + "; bound 1e-4"};
    });

    criterion("C4", "flipped-kernel convolution example", 0, [] {
        const Tensor input(Shape{5, 5, 1}, {1, 1, 1, 1, 1, -1, 0, -3, 0, 1, 2, 1, 1, -1, 0, 0, -1, 1, 2, 1,
                                            1, 2, 1, 1, 1});
        const Tensor kernel(Shape{3, 3, 1, 1}, {1, 0, 0, 0, 0, 0, 0, 0, -1});
        ExprGraph g;
        const auto out = g.value(g.conv2d(g.constant(input), g.constant(kernel), 1, 0, true));
        const Tensor expected(Shape{3, 3, 1}, {0, -2, -1, 2, 2, 4, -1, 0, 0});
        std::string got;
        for (double v : out.data()) got += fmt(v) + " ";
        return Outcome{out == expected, "got [ " + got + "]"};
    });

    criterion("C5", "shared conv kernel parameter count", 0, [] {
        const ModelSpec spec{32, 32, 3, 10, {ConvLayer{5, 10, 1, 0}, FlattenLayer{}, DenseLayer{10, false}}};
        const auto n = build_model(spec, 1).layer("conv0").weight.numel();
        return Outcome{n == 750, "10 kernels of 5x5x3 -> " + std::to_string(n) + " parameters"};
    });

    criterion("C6", "DLG end-to-end convergence", 600.0, [] {
        int monotone = 0, converged = 0;
        double mean_final = 0.0, best = 1e300;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const auto sc = scenario(SynthKind::blocks, seed);
            const auto res = dlg_attack(sc.spec, sc.params, sc.target, pinned_config(seed), &sc.truth);
            const auto rep = convergence_report(res.trace);
            monotone += rep.monotone_mse;
            converged += rep.converged;
            mean_final += *rep.final_mse / 10.0;
            best = std::min(best, *rep.final_mse);
        }
        const bool ok = monotone >= 8 && converged >= 8;
        return Outcome{ok, "monotone checkpoint MSE in " + std::to_string(monotone) + "/10 (need 8), final MSE <= 5 in " +
                               std::to_string(converged) + "/10 (need 8); mean final MSE " + fmt(mean_final) +
                               ", best " + fmt(best)};
    });

    criterion("C7", "label recovery", 0, [] {
        int from_sign = 0, from_attack = 0;
        for (std::uint64_t seed = 101; seed <= 150; ++seed) {
            const auto sc = scenario(SynthKind::blocks, seed);
            from_sign += label_from_gradient_sign(sc.target, sc.spec) == sc.label;
            const auto res = dlg_attack(sc.spec, sc.params, sc.target, pinned_config(seed));
            from_attack += recovered_label(res.sample) == sc.label;
        }
        const bool ok = from_sign == 50 && from_attack >= 45;
        return Outcome{ok, "gradient sign " + std::to_string(from_sign) + "/50 (need 50), attack argmax " +
                               std::to_string(from_attack) + "/50 (need 45)"};
    });

    criterion("C8", "improved variant on light backgrounds", 0, [] {
        int wins = 0;
        double base_mean = 0.0, impr_mean = 0.0;
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto sc = scenario(SynthKind::light_background, seed);
            const auto cfg = pinned_config(seed);
            const auto base = dlg_attack(sc.spec, sc.params, sc.target, cfg, &sc.truth);
            const auto impr = improved_dlg(sc.spec, sc.params, sc.target, cfg, &sc.truth);
            const double b = *base.trace.records.back().mse_255, i = *impr.trace.records.back().mse_255;
            wins += i <= b;
            base_mean += b / 20.0;
            impr_mean += i / 20.0;
        }
        // lambda = 0 must replay the baseline bit for bit, every iterate.
        const auto sc = scenario(SynthKind::light_background, 1);
        auto cfg = pinned_config(1);
        cfg.checkpoints.clear();
        for (std::size_t i = 1; i <= cfg.iterations; ++i) cfg.checkpoints.push_back(i);
        cfg.keep_snapshots = true;
        cfg.clamp_output = false;
        const auto base = dlg_attack(sc.spec, sc.params, sc.target, cfg);
        cfg.lambda_mean = 0.0;
        const auto zero = improved_dlg(sc.spec, sc.params, sc.target, cfg);
        bool identical = base.sample.input == zero.sample.input &&
                         base.sample.label_logits == zero.sample.label_logits;
        for (std::size_t i = 0; i < base.trace.records.size(); ++i) {
            identical = identical && base.trace.records[i].distance == zero.trace.records[i].distance &&
                        *base.trace.records[i].snapshot == *zero.trace.records[i].snapshot;
        }
        const bool ok = wins >= 14 && identical;
        return Outcome{ok, "improved <= baseline in " + std::to_string(wins) + "/20 (need 14), mean MSE " +
                               fmt(base_mean) + " -> " + fmt(impr_mean) + "; lambda=0 trajectory " +
                               (identical ? "bit-identical" : "DIFFERS")};
    });

    criterion("C9", "format round-trips and malformed inputs", 0, [] {
        SeedRng rng(9009);
        int bundle_ok = 0, image_ok = 0;
        for (int i = 0; i < 1000; ++i) {
            GradientBundle b{rng.next_u64(), static_cast<std::uint32_t>(rng.next_u64()),
                             static_cast<std::uint32_t>(rng.next_u64()), {}};
            for (std::uint64_t t = 0, n = rng.below(5); t < n; ++t) {
                Shape s;
                for (std::uint64_t k = 0, r = rng.below(4); k < r; ++k) s.push_back(1 + rng.below(5));
                Tensor v(s);
                for (auto& x : v.data()) {
                    const auto bits = rng.next_u64();
                    std::memcpy(&x, &bits, sizeof x);
                    if (std::isnan(x)) x = rng.normal();
                }
                b.tensors.push_back({"p" + std::to_string(t) + ".W", std::move(v)});
            }
            const auto bytes = serialize_bundle(b);
            bundle_ok += serialize_bundle(deserialize_bundle(bytes)) == bytes;

            ImageBuffer img(1 + rng.below(20), 1 + rng.below(20), rng.below(2) ? 3 : 1);
            for (auto& s : img.samples) s = static_cast<std::uint8_t>(rng.below(256));
            const auto ib = encode_pnm(img);
            image_ok += encode_pnm(decode_pnm(ib)) == ib;
        }

        // Malformed corpus: every truncation, bad magic, random corruption.
        int rejected = 0, corpus = 0, crashed = 0;
        auto probe = [&](auto decode, const std::vector<std::uint8_t>& bytes, bool must_fail) {
            ++corpus;
            try {
                decode(bytes);
                if (must_fail) ++crashed;
            } catch (const ParseError&) {
                ++rejected;
            } catch (...) {
                ++crashed;
            }
        };
        auto bundle_decode = [](const std::vector<std::uint8_t>& b) { return deserialize_bundle(b); };
        auto image_decode = [](const std::vector<std::uint8_t>& b) { return decode_pnm(b); };
        const auto sc = scenario(SynthKind::blocks, 3);
        const auto good_bundle = serialize_bundle(sc.target);
        const auto good_image = encode_pnm(synth_image(SynthKind::blocks, 16, 16, 3, 3));
        for (std::size_t cut = 0; cut < good_bundle.size(); cut += 1 + cut / 64) {
            probe(bundle_decode, {good_bundle.begin(), good_bundle.begin() + static_cast<std::ptrdiff_t>(cut)}, true);
        }
        for (std::size_t cut = 0; cut < good_image.size(); ++cut) {
            probe(image_decode, {good_image.begin(), good_image.begin() + static_cast<std::ptrdiff_t>(cut)}, true);
        }
        for (const char* magic : {"GLKX", "glkb", "P5\0\0", "\0\0\0\0"}) {
            auto b = good_bundle;
            std::copy_n(magic, 4, b.begin());
            probe(bundle_decode, b, true);
        }
        for (const char* magic : {"P3", "P7", "G5", "p6"}) {
            auto b = good_image;
            std::copy_n(magic, 2, b.begin());
            probe(image_decode, b, true);
        }
        for (int i = 0; i < 2000; ++i) {
            auto b = good_bundle;
            b[rng.below(48)] = static_cast<std::uint8_t>(rng.below(256));
            probe(bundle_decode, b, false);
            auto im = good_image;
            im[rng.below(16)] = static_cast<std::uint8_t>(rng.below(256));
            probe(image_decode, im, false);
        }
        const bool ok = bundle_ok == 1000 && image_ok == 1000 && crashed == 0;
        return Outcome{ok, "bundles " + std::to_string(bundle_ok) + "/1000, images " + std::to_string(image_ok) +
                               "/1000 byte-identical; malformed corpus " + std::to_string(corpus) + " inputs, " +
                               std::to_string(rejected) + " parse errors, " + std::to_string(crashed) +
                               " crashes or silent accepts of invalid input"};
    });

    const fs::path work = fs::temp_directory_path() / "gradleak_acceptance";
    fs::remove_all(work);

    criterion("C10", "demo determinism", 0, [&] {
        const int a = run_cli({"demo", "--seed", "7", "--out", (work / "run1").string()});
        const int b = run_cli({"demo", "--seed", "7", "--out", (work / "run2").string()});
        if (a != 0 || b != 0) return Outcome{false, "demo exited with " + std::to_string(a) + "/" + std::to_string(b)};
        std::size_t files = 0, same = 0;
        for (const auto& e : fs::recursive_directory_iterator(work / "run1")) {
            if (!e.is_regular_file()) continue;
            ++files;
            const auto other = work / "run2" / fs::relative(e.path(), work / "run1");
            same += fs::exists(other) && slurp(e.path()) == slurp(other);
        }
        std::size_t files2 = 0;
        for (const auto& e : fs::recursive_directory_iterator(work / "run2")) files2 += e.is_regular_file();
        return Outcome{files > 0 && same == files && files2 == files,
                       std::to_string(same) + "/" + std::to_string(files) + " files byte-identical"};
    });

    criterion("X1", "demo --seed 7 final MSE <= 5", 0, [&] {
        const auto report = slurp(work / "run1" / "report.txt");
        const auto key = std::string("final_mse_255: ");
        const auto at = report.find(key);
        if (at == std::string::npos) return Outcome{false, "no report"};
        const double mse = std::stod(report.substr(at + key.size()));
        const bool recovered = fs::exists(work / "run1" / "recovered.pgm");
        return Outcome{recovered && mse <= 5.0, "recovered.pgm " + std::string(recovered ? "written" : "missing") +
                                                    ", final MSE " + fmt(mse)};
    });
    fs::remove_all(work);

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
