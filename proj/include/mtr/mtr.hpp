// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mtr/bench.hpp"
#include "mtr/checkpoint.hpp"
#include "mtr/errors.hpp"
#include "mtr/flops.hpp"
#include "mtr/image.hpp"
#include "mtr/importance.hpp"
#include "mtr/model.hpp"
#include "mtr/reduction.hpp"
#include "mtr/ssm.hpp"
#include "mtr/tensor.hpp"
