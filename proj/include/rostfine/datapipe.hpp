#pragma once

#include "rostfine/dataset.hpp"
#include "rostfine/grades.hpp"
#include "rostfine/image_io.hpp"
#include "rostfine/tracking.hpp"
