#pragma once

#include "chartnet/error.hpp"
#include "chartnet/tensor.hpp"
#include "chartnet/kernels.hpp"
#include "chartnet/atlas.hpp"
#include "chartnet/losses.hpp"
#include "chartnet/encoder.hpp"
#include "chartnet/data.hpp"
#include "chartnet/optim.hpp"
#include "chartnet/train.hpp"
#include "chartnet/eval.hpp"
#include "chartnet/config.hpp"
