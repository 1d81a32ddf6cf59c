#pragma once

#include "olivine/augment.hpp"
#include "olivine/checkpoint.hpp"
#include "olivine/config.hpp"
#include "olivine/dataset.hpp"
#include "olivine/error.hpp"
#include "olivine/image.hpp"
#include "olivine/layers.hpp"
#include "olivine/metrics.hpp"
#include "olivine/model.hpp"
#include "olivine/ops.hpp"
#include "olivine/pnm.hpp"
#include "olivine/preprocess.hpp"
#include "olivine/rng.hpp"
#include "olivine/tensor.hpp"
#include "olivine/train.hpp"
