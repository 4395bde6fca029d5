#pragma once

// Core library
#include "tubemil/geometry.hpp"
#include "tubemil/mil.hpp"
#include "tubemil/rng.hpp"

// Training and data
#include "tubemil/model.hpp"
#include "tubemil/synthgen.hpp"

// Inference and evaluation
#include "tubemil/eval.hpp"
#include "tubemil/linking.hpp"

// Experiment runner
#include "tubemil/experiment.hpp"
