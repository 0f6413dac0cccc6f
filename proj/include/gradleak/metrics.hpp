#pragma once

#include <algorithm>
#include <charconv>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gradleak/tensor.hpp"
#include "gradleak/trace.hpp"

namespace gradleak {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline double mse_255_impl(const Tensor& reference, const Tensor& candidate, bool clamp) {
    if (reference.shape() != candidate.shape()) {
        throw DimensionError("mse: image shapes " + shape_string(reference.shape()) + " and " +
                             shape_string(candidate.shape()) + " differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < reference.numel(); ++i) {
        double a = reference[i], b = candidate[i];
        if (clamp) {
            a = std::clamp(a, 0.0, 1.0);
            b = std::clamp(b, 0.0, 1.0);
        }
        const double d = 255.0 * (a - b);
        acc += d * d;
    }
    return acc / static_cast<double>(reference.numel());
}

} // namespace detail

/// Mean of (255 (a - b))^2 over all samples, both images clamped to [0,1].
inline double mse_255(const Tensor& reference, const Tensor& candidate) {
    return detail::mse_255_impl(reference, candidate, true);
}

/// As mse_255 but on the raw values.
inline double mse_255_unclamped(const Tensor& reference, const Tensor& candidate) {
    return detail::mse_255_impl(reference, candidate, false);
}

inline constexpr double default_convergence_threshold = 5.0;

struct ConvergenceReport {
    struct Row {
        std::size_t iteration;
        double distance;
        std::optional<double> mse_255;
    };
    std::vector<Row> rows;
    bool monotone_mse = false; // MSE non-increasing across checkpoints
    std::optional<double> final_mse;
    std::optional<double> final_mse_unit; // same, on the 0-1 scale
    double threshold = default_convergence_threshold;
    bool converged = false;
};

/// Summarizes a checkpoint trace. Without ground-truth MSE in every record
/// both flags are false.
inline ConvergenceReport convergence_report(const AttackTrace& trace,
                                            double threshold = default_convergence_threshold) {
    if (trace.records.empty()) throw ContractError("convergence_report: empty trace");
    ConvergenceReport r;
    r.threshold = threshold;
    bool all_mse = true;
    for (const auto& rec : trace.records) {
        r.rows.push_back({rec.iteration, rec.distance, rec.mse_255});
        all_mse = all_mse && rec.mse_255.has_value();
    }
    if (!all_mse) return r;
    r.monotone_mse = true;
    for (std::size_t i = 1; i < r.rows.size(); ++i) {
        if (*r.rows[i].mse_255 > *r.rows[i - 1].mse_255) r.monotone_mse = false;
    }
    r.final_mse = r.rows.back().mse_255;
    r.final_mse_unit = *r.final_mse / (255.0 * 255.0);
    r.converged = *r.final_mse <= threshold;
    return r;
}

/// Tab-separated rows with a header line.
inline std::string report_tsv(const ConvergenceReport& r) {
    std::ostringstream os;
    os << "iteration\tdistance\tmse_255\n";
    for (const auto& row : r.rows) {
        os << row.iteration << '\t' << format_double(row.distance) << '\t'
           << (row.mse_255 ? format_double(*row.mse_255) : "NA") << '\n';
    }
    return os.str();
}

/// "key: value" document: one block per checkpoint, then the summary.
inline std::string report_key_value(const ConvergenceReport& r) {
    std::ostringstream os;
    for (const auto& row : r.rows) {
        os << "checkpoint: " << row.iteration << '\n';
        os << "distance: " << format_double(row.distance) << '\n';
        os << "mse_255: " << (row.mse_255 ? format_double(*row.mse_255) : "NA") << '\n';
    }
    os << "monotone_mse: " << (r.monotone_mse ? "true" : "false") << '\n';
    os << "final_mse_255: " << (r.final_mse ? format_double(*r.final_mse) : "NA") << '\n';
    os << "final_mse_unit: " << (r.final_mse_unit ? format_double(*r.final_mse_unit) : "NA")
       << '\n';
    os << "threshold: " << format_double(r.threshold) << '\n';
    os << "converged: " << (r.converged ? "true" : "false") << '\n';
    return os.str();
}

/// The trace.tsv written next to attack outputs.
inline std::string trace_tsv(const AttackTrace& trace) {
    std::ostringstream os;
    os << "iteration\tdistance\tmse_255\tmse_255_unclamped\n";
    for (const auto& rec : trace.records) {
        os << rec.iteration << '\t' << format_double(rec.distance) << '\t'
           << (rec.mse_255 ? format_double(*rec.mse_255) : "NA") << '\t'
           << (rec.mse_255_unclamped ? format_double(*rec.mse_255_unclamped) : "NA") << '\n';
    }
    return os.str();
}

} // namespace gradleak
