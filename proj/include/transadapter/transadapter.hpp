#pragma once

// Umbrella header.
#include "transadapter/tensor.hpp"
#include "transadapter/ops.hpp"
#include "transadapter/random.hpp"
#include "transadapter/layers.hpp"
#include "transadapter/feature_map.hpp"
#include "transadapter/ada_attention.hpp"
#include "transadapter/gdd.hpp"
#include "transadapter/cft.hpp"
#include "transadapter/backbone.hpp"
#include "transadapter/objective.hpp"
#include "transadapter/pixel_transform.hpp"
#include "transadapter/data.hpp"
#include "transadapter/training.hpp"
#include "transadapter/checkpoint.hpp"
#include "transadapter/grad_check.hpp"
#include "transadapter/grad_suite.hpp"
#include "transadapter/pipeline.hpp"
