#pragma once

#include "act/config.hpp"
#include "act/data.hpp"
#include "act/error.hpp"
#include "act/losses.hpp"
#include "act/nn.hpp"
#include "act/optim.hpp"
#include "act/pipeline.hpp"
#include "act/report.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"
