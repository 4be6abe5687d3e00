#pragma once

#include "pxray/analysis.hpp"
#include "pxray/attribution.hpp"
#include "pxray/checks.hpp"
#include "pxray/env_toy.hpp"
#include "pxray/errors.hpp"
#include "pxray/kinematics.hpp"
#include "pxray/layers.hpp"
#include "pxray/network.hpp"
#include "pxray/tensor.hpp"
#include "pxray/training.hpp"
#include "pxray/weights_io.hpp"
