#pragma once

#include "mixres/error.hpp"
#include "mixres/tensor.hpp"
#include "mixres/rng.hpp"
#include "mixres/ops.hpp"
#include "mixres/patch_format.hpp"
#include "mixres/patched_ops.hpp"
#include "mixres/cache_manager.hpp"
#include "mixres/toy_model.hpp"
#include "mixres/latency_model.hpp"
#include "mixres/scheduler.hpp"
#include "mixres/serving_engine.hpp"
#include "mixres/workload.hpp"
