#pragma once

// Umbrella header for the whole library.

#include "errors.hpp"
#include "experiment.hpp"
#include "forward_model.hpp"
#include "metrics.hpp"
#include "nifti.hpp"
#include "phantom.hpp"
#include "regularization.hpp"
#include "resample.hpp"
#include "rician.hpp"
#include "solver.hpp"
#include "volume.hpp"
