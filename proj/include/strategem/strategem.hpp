#pragma once

#include "strategem/attention.hpp"
#include "strategem/bilevel.hpp"
#include "strategem/data.hpp"
#include "strategem/equivalence.hpp"
#include "strategem/errors.hpp"
#include "strategem/experiments.hpp"
#include "strategem/parallel.hpp"
#include "strategem/sc_core.hpp"
