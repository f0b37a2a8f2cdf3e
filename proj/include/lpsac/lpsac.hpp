// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lpsac/env.hpp"
#include "lpsac/experiments.hpp"
#include "lpsac/kahan.hpp"
#include "lpsac/lpsim.hpp"
#include "lpsac/nn.hpp"
#include "lpsac/optim.hpp"
#include "lpsac/replay.hpp"
#include "lpsac/sac.hpp"
#include "lpsac/stablemath.hpp"
#include "lpsac/tensor.hpp"
#include "lpsac/train.hpp"
