#pragma once

#include "facseq/activation.hpp"
#include "facseq/autodiff.hpp"
#include "facseq/config.hpp"
#include "facseq/data.hpp"
#include "facseq/elbo.hpp"
#include "facseq/errors.hpp"
#include "facseq/evaluation.hpp"
#include "facseq/experiment.hpp"
#include "facseq/gaussian.hpp"
#include "facseq/mlp.hpp"
#include "facseq/model.hpp"
#include "facseq/oracle.hpp"
#include "facseq/parallel.hpp"
#include "facseq/params.hpp"
#include "facseq/render.hpp"
#include "facseq/rng.hpp"
#include "facseq/training.hpp"
