#pragma once

#include "plinf/baselines.hpp"
#include "plinf/dataset.hpp"
#include "plinf/defense.hpp"
#include "plinf/error.hpp"
#include "plinf/experiment.hpp"
#include "plinf/graph.hpp"
#include "plinf/harness.hpp"
#include "plinf/metrics.hpp"
#include "plinf/model_spec.hpp"
#include "plinf/models.hpp"
#include "plinf/nn.hpp"
#include "plinf/rng.hpp"
#include "plinf/setnet.hpp"
#include "plinf/stats.hpp"
#include "plinf/synthetic.hpp"
#include "plinf/tensor_io.hpp"
