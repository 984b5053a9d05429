#pragma once

#include "repformer/errors.hpp"
#include "repformer/rng.hpp"
#include "repformer/tensor.hpp"
#include "repformer/ops.hpp"
#include "repformer/gradcheck.hpp"
#include "repformer/nn.hpp"
#include "repformer/backbone.hpp"
#include "repformer/pyramid_memory.hpp"
#include "repformer/refinement_head.hpp"
#include "repformer/model.hpp"
#include "repformer/rpft.hpp"
#include "repformer/data.hpp"
#include "repformer/config.hpp"
#include "repformer/trainer.hpp"
#include "repformer/gradcheck_suite.hpp"
