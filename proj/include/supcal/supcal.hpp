#pragma once

// Umbrella header. http_backend.hpp is intentionally left out: it pulls
// in the bundled HTTP client, which most translation units don't need.

#include "supcal/backend.hpp"
#include "supcal/baselines.hpp"
#include "supcal/common.hpp"
#include "supcal/config.hpp"
#include "supcal/core.hpp"
#include "supcal/ensemble.hpp"
#include "supcal/harness.hpp"
#include "supcal/objective.hpp"
#include "supcal/solver.hpp"
#include "supcal/surrogate.hpp"
