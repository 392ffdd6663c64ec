#pragma once

#include "lcmsr/backbone.hpp"
#include "lcmsr/checkpoint.hpp"
#include "lcmsr/config.hpp"
#include "lcmsr/datapipe.hpp"
#include "lcmsr/error.hpp"
#include "lcmsr/eval.hpp"
#include "lcmsr/image_io.hpp"
#include "lcmsr/lcd_stage.hpp"
#include "lcmsr/noise.hpp"
#include "lcmsr/params.hpp"
#include "lcmsr/rae_stage.hpp"
#include "lcmsr/sampler.hpp"
#include "lcmsr/schedule.hpp"
#include "lcmsr/tensor_ops.hpp"
#include "lcmsr/training.hpp"
