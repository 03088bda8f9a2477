#pragma once

#include "restlab/numcore/checkpoint.hpp"
#include "restlab/numcore/ops.hpp"
#include "restlab/numcore/optimizer.hpp"
#include "restlab/numcore/tape.hpp"
#include "restlab/numcore/tensor.hpp"
