#pragma once

// Umbrella header for the dynamic token normalization library.

#include "dtn/analysis.hpp"
#include "dtn/complexity.hpp"
#include "dtn/dynamic_token_norm.hpp"
#include "dtn/finite_diff.hpp"
#include "dtn/geometry.hpp"
#include "dtn/gradcheck.hpp"
#include "dtn/model.hpp"
#include "dtn/norm.hpp"
#include "dtn/serialize.hpp"
#include "dtn/tape.hpp"
#include "dtn/tasks.hpp"
#include "dtn/tensor.hpp"
#include "dtn/train.hpp"
