#pragma once

// Umbrella header.
#include "benchmark.hpp"
#include "checkpoint.hpp"
#include "datasets.hpp"
#include "diagnostics.hpp"
#include "errors.hpp"
#include "gradcheck.hpp"
#include "normalization.hpp"
#include "random.hpp"
#include "ratio_analysis.hpp"
#include "residual_blocks.hpp"
#include "tensor.hpp"
#include "training.hpp"
