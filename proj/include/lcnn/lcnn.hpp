#pragma once

#include "lcnn/tensor.hpp"
#include "lcnn/random.hpp"
#include "lcnn/layers.hpp"
#include "lcnn/fusion.hpp"
#include "lcnn/arch.hpp"
#include "lcnn/data.hpp"
#include "lcnn/training.hpp"
