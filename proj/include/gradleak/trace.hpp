#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

/// State of an attack after `iteration` update steps.
struct TraceRecord {
    std::size_t iteration = 0;
    double distance = 0.0;                    // gradient distance D
    std::optional<double> mse_255;            // vs. ground truth, output clamped to [0,1]
    std::optional<double> mse_255_unclamped;  // vs. ground truth, raw virtual pixels
    std::optional<Tensor> snapshot;           // raw virtual input
};

struct AttackTrace {
    std::vector<TraceRecord> records; // sorted by iteration
    double initial_distance = 0.0;
    std::size_t step_halvings = 0; // only non-zero with AttackConfig::step_halving
};

} // namespace gradleak
