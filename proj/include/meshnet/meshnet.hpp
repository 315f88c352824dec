#pragma once

// Umbrella header for the whole library.

#include "meshnet/autograd.hpp"
#include "meshnet/errors.hpp"
#include "meshnet/labels.hpp"
#include "meshnet/metrics.hpp"
#include "meshnet/model.hpp"
#include "meshnet/model_io.hpp"
#include "meshnet/nifti.hpp"
#include "meshnet/ops.hpp"
#include "meshnet/optim.hpp"
#include "meshnet/pipeline.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/sampling.hpp"
#include "meshnet/stats.hpp"
#include "meshnet/tensor.hpp"
#include "meshnet/thread_pool.hpp"
#include "meshnet/version.hpp"
#include "meshnet/volume.hpp"
