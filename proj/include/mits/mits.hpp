#pragma once

#include "mits/attention.hpp"
#include "mits/checkpoint.hpp"
#include "mits/config.hpp"
#include "mits/data.hpp"
#include "mits/encoder.hpp"
#include "mits/error.hpp"
#include "mits/evaluate.hpp"
#include "mits/geometry.hpp"
#include "mits/heads.hpp"
#include "mits/losses.hpp"
#include "mits/metrics.hpp"
#include "mits/model.hpp"
#include "mits/png_io.hpp"
#include "mits/propagation.hpp"
#include "mits/tracker.hpp"
#include "mits/trainer.hpp"
#include "mits/uidm.hpp"
#include "mits/viz.hpp"
