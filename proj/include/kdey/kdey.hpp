#pragma once

#include "kdey/core.hpp"
#include "kdey/classifier.hpp"
#include "kdey/densities.hpp"
#include "kdey/divergences.hpp"
#include "kdey/simplex_opt.hpp"
#include "kdey/quantifiers.hpp"
#include "kdey/protocol.hpp"
#include "kdey/io.hpp"
#include "kdey/experiment.hpp"
