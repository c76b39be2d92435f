#pragma once

#include "lmdrop/chain.hpp"
#include "lmdrop/core.hpp"
#include "lmdrop/estep.hpp"
#include "lmdrop/fit.hpp"
#include "lmdrop/inference.hpp"
#include "lmdrop/io.hpp"
#include "lmdrop/likelihood.hpp"
#include "lmdrop/mstep.hpp"
#include "lmdrop/numeric.hpp"
#include "lmdrop/oracle.hpp"
#include "lmdrop/parallel.hpp"
#include "lmdrop/selection.hpp"
#include "lmdrop/simulate.hpp"
