#pragma once

#include "tuigan/ablation.hpp"
#include "tuigan/checkpoint.hpp"
#include "tuigan/common.hpp"
#include "tuigan/image.hpp"
#include "tuigan/image_io.hpp"
#include "tuigan/losses.hpp"
#include "tuigan/metrics.hpp"
#include "tuigan/networks.hpp"
#include "tuigan/tensor.hpp"
#include "tuigan/trainer.hpp"
