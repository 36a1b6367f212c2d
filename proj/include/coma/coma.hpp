#pragma once

// umbrella header

#include "coma/attention.hpp"
#include "coma/common.hpp"
#include "coma/config.hpp"
#include "coma/dataset.hpp"
#include "coma/gradcheck.hpp"
#include "coma/io.hpp"
#include "coma/layout.hpp"
#include "coma/masking.hpp"
#include "coma/model.hpp"
#include "coma/ops.hpp"
#include "coma/optim.hpp"
#include "coma/rng.hpp"
#include "coma/tensor.hpp"
#include "coma/trainer.hpp"
