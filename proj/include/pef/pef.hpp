#pragma once

#include "pef/bench.hpp"
#include "pef/blocks.hpp"
#include "pef/checkpoint.hpp"
#include "pef/data.hpp"
#include "pef/eval.hpp"
#include "pef/gradcheck.hpp"
#include "pef/gradcheck_suite.hpp"
#include "pef/image.hpp"
#include "pef/kv.hpp"
#include "pef/matching.hpp"
#include "pef/model.hpp"
#include "pef/ops.hpp"
#include "pef/optim.hpp"
#include "pef/tensor.hpp"
#include "pef/train.hpp"
