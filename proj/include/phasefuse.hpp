#pragma once

#include "phasefuse/degrade.hpp"
#include "phasefuse/error.hpp"
#include "phasefuse/gradcheck.hpp"
#include "phasefuse/gradsuite.hpp"
#include "phasefuse/keyvalue.hpp"
#include "phasefuse/loss.hpp"
#include "phasefuse/metrics.hpp"
#include "phasefuse/model.hpp"
#include "phasefuse/nifti.hpp"
#include "phasefuse/ops.hpp"
#include "phasefuse/optim.hpp"
#include "phasefuse/rng.hpp"
#include "phasefuse/tensor.hpp"
#include "phasefuse/train.hpp"
#include "phasefuse/volume.hpp"
