#pragma once

#include "adar/augment.hpp"
#include "adar/binary_io.hpp"
#include "adar/cli.hpp"
#include "adar/config.hpp"
#include "adar/data.hpp"
#include "adar/diffusion.hpp"
#include "adar/encoder.hpp"
#include "adar/error.hpp"
#include "adar/eval.hpp"
#include "adar/numkit.hpp"
#include "adar/train.hpp"
#include "adar/verify.hpp"
