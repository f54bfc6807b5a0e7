#pragma once

#include "rostfine/autodiff.hpp"
#include "rostfine/branches.hpp"
#include "rostfine/config.hpp"
#include "rostfine/datapipe.hpp"
#include "rostfine/encoder.hpp"
#include "rostfine/evalviz.hpp"
#include "rostfine/model.hpp"
#include "rostfine/nn.hpp"
#include "rostfine/objectives.hpp"
#include "rostfine/psm.hpp"
#include "rostfine/tensor.hpp"
#include "rostfine/trainer.hpp"
