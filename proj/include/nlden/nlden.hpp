#pragma once

#include "nlden/error.hpp"
#include "nlden/tensor.hpp"
#include "nlden/rng.hpp"
#include "nlden/autograd.hpp"
#include "nlden/ops.hpp"
#include "nlden/conv.hpp"
#include "nlden/optim.hpp"
#include "nlden/io.hpp"
#include "nlden/nonlocal.hpp"
#include "nlden/networks.hpp"
#include "nlden/losses.hpp"
#include "nlden/metrics.hpp"
#include "nlden/phantom.hpp"
#include "nlden/checkpoint.hpp"
#include "nlden/config.hpp"
#include "nlden/train.hpp"
#include "nlden/gradcheck.hpp"
