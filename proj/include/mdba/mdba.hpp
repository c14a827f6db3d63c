#pragma once

#include "mdba/augment.hpp"
#include "mdba/core/edt.hpp"
#include "mdba/core/ndarray.hpp"
#include "mdba/core/rng.hpp"
#include "mdba/losses.hpp"
#include "mdba/manifest.hpp"
#include "mdba/metrics.hpp"
#include "mdba/nifti_io.hpp"
#include "mdba/nn/autograd.hpp"
#include "mdba/nn/checkpoint.hpp"
#include "mdba/nn/network.hpp"
#include "mdba/phantom.hpp"
#include "mdba/png_io.hpp"
#include "mdba/preprocess.hpp"
#include "mdba/report.hpp"
#include "mdba/sobel.hpp"
#include "mdba/train.hpp"
#include "mdba/volume.hpp"
