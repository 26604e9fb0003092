#pragma once

#include "m3d/error.hpp"
#include "m3d/tensor.hpp"
#include "m3d/autograd.hpp"
#include "m3d/svd.hpp"
#include "m3d/tokenizer.hpp"
#include "m3d/model.hpp"
#include "m3d/data.hpp"
#include "m3d/objective.hpp"
#include "m3d/deploy.hpp"
#include "m3d/training.hpp"
#include "m3d/eval.hpp"
#include "m3d/bench.hpp"
#include "m3d/run_config.hpp"
