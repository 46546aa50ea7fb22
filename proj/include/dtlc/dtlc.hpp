#pragma once

// Everything except the command-line front end (dtlc/cli.hpp), which
// additionally needs CLI11.

#include "dtlc/checkpoint.hpp"
#include "dtlc/config.hpp"
#include "dtlc/density.hpp"
#include "dtlc/domain.hpp"
#include "dtlc/gradcheck.hpp"
#include "dtlc/image.hpp"
#include "dtlc/model.hpp"
#include "dtlc/ops.hpp"
#include "dtlc/optim.hpp"
#include "dtlc/parallel.hpp"
#include "dtlc/rng.hpp"
#include "dtlc/synthesis.hpp"
#include "dtlc/synthetic_dataset.hpp"
#include "dtlc/tensor.hpp"
#include "dtlc/training.hpp"
#include "dtlc/transfer.hpp"
#include "dtlc/verification.hpp"
