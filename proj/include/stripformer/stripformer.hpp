// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header for the strip-attention deblurring stack. PNG I/O lives in
// png_io.hpp separately because it pulls in libpng.
#pragma once

#include "stripformer/attention.hpp"
#include "stripformer/checkpoint.hpp"
#include "stripformer/common.hpp"
#include "stripformer/conv.hpp"
#include "stripformer/data.hpp"
#include "stripformer/gradcheck.hpp"
#include "stripformer/losses.hpp"
#include "stripformer/metrics.hpp"
#include "stripformer/model.hpp"
#include "stripformer/ops.hpp"
#include "stripformer/optim.hpp"
#include "stripformer/tensor.hpp"
#include "stripformer/train.hpp"
