#pragma once

#include "gradleak/attack.hpp"
#include "gradleak/errors.hpp"
#include "gradleak/federated.hpp"
#include "gradleak/graph.hpp"
#include "gradleak/image.hpp"
#include "gradleak/metrics.hpp"
#include "gradleak/model.hpp"
#include "gradleak/ops.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"
#include "gradleak/trace.hpp"
