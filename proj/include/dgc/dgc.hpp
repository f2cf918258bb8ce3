#pragma once

// Umbrella header for the DGC library.

#include "dgc/common.hpp"
#include "dgc/data_io.hpp"
#include "dgc/encoder.hpp"
#include "dgc/clustering.hpp"
#include "dgc/losses.hpp"
#include "dgc/eval_diag.hpp"
#include "dgc/trainer.hpp"
