#pragma once

// Umbrella header: the full library.

#include "grappa/adaptor.hpp"
#include "grappa/augment.hpp"
#include "grappa/backbone.hpp"
#include "grappa/barlow.hpp"
#include "grappa/checkpoint.hpp"
#include "grappa/common.hpp"
#include "grappa/config.hpp"
#include "grappa/data.hpp"
#include "grappa/fusion.hpp"
#include "grappa/image.hpp"
#include "grappa/kmeans.hpp"
#include "grappa/knn.hpp"
#include "grappa/metrics.hpp"
#include "grappa/model.hpp"
#include "grappa/nn.hpp"
#include "grappa/optim.hpp"
#include "grappa/pipeline.hpp"
#include "grappa/report.hpp"
#include "grappa/rng.hpp"
#include "grappa/sha256.hpp"
#include "grappa/train.hpp"
#include "grappa/version.hpp"
