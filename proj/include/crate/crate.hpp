#pragma once

// Umbrella header.

#include "crate/analysis.hpp"
#include "crate/autodiff.hpp"
#include "crate/checkpoint.hpp"
#include "crate/config.hpp"
#include "crate/data.hpp"
#include "crate/grad.hpp"
#include "crate/image.hpp"
#include "crate/metrics.hpp"
#include "crate/model.hpp"
#include "crate/objective.hpp"
#include "crate/train.hpp"
