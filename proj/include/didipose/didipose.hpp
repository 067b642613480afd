#pragma once

#include "didipose/common.hpp"
#include "didipose/tensor.hpp"
#include "didipose/autodiff.hpp"
#include "didipose/optim.hpp"
#include "didipose/checkpoint.hpp"
#include "didipose/skeleton.hpp"
#include "didipose/observation.hpp"
#include "didipose/metrics.hpp"
#include "didipose/dataset.hpp"
#include "didipose/fsq.hpp"
#include "didipose/codec.hpp"
#include "didipose/schedule.hpp"
#include "didipose/denoiser.hpp"
#include "didipose/config.hpp"
#include "didipose/evalreport.hpp"
#include "didipose/plot.hpp"
