#pragma once

#include "nlc/activation.hpp"
#include "nlc/confounders.hpp"
#include "nlc/dataset.hpp"
#include "nlc/error.hpp"
#include "nlc/loss.hpp"
#include "nlc/metrics.hpp"
#include "nlc/network.hpp"
#include "nlc/precision.hpp"
#include "nlc/quadrature.hpp"
#include "nlc/region_map.hpp"
#include "nlc/sampler.hpp"
#include "nlc/serialize.hpp"
#include "nlc/study.hpp"
#include "nlc/tensor.hpp"
#include "nlc/trainer.hpp"
