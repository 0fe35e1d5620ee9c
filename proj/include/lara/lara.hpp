#pragma once

#include "lara/cache.hpp"
#include "lara/core.hpp"
#include "lara/decoder.hpp"
#include "lara/error.hpp"
#include "lara/fit.hpp"
#include "lara/harness.hpp"
#include "lara/openai.hpp"
#include "lara/optimizer.hpp"
#include "lara/parallel.hpp"
#include "lara/provider.hpp"
#include "lara/random.hpp"
