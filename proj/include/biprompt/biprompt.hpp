#pragma once

#include "biprompt/adapt.hpp"
#include "biprompt/attention.hpp"
#include "biprompt/core.hpp"
#include "biprompt/debias.hpp"
#include "biprompt/encoders.hpp"
#include "biprompt/evalbench.hpp"
#include "biprompt/objective.hpp"
#include "biprompt/runner.hpp"
