#pragma once

// Umbrella include for the whole library: autodiff core, model, auxiliary
// head, data handling, training loop, metrics, diagnostics, and persistence.

#include "cdne/cdne_head.hpp"
#include "cdne/checkpoint.hpp"
#include "cdne/config.hpp"
#include "cdne/data.hpp"
#include "cdne/diagnostics.hpp"
#include "cdne/error.hpp"
#include "cdne/gradcheck.hpp"
#include "cdne/gradcheck_suite.hpp"
#include "cdne/metrics.hpp"
#include "cdne/mil.hpp"
#include "cdne/optimizer.hpp"
#include "cdne/tape.hpp"
#include "cdne/tensor.hpp"
#include "cdne/train.hpp"
