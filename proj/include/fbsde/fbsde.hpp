#pragma once

// Umbrella header: free-energy estimation for stopped diffusions via the
// least-squares Monte Carlo FBSDE scheme, with adaptive importance sampling
// and a 1D finite-difference reference solver.

#include "fbsde/basis.hpp"
#include "fbsde/control.hpp"
#include "fbsde/harness.hpp"
#include "fbsde/io.hpp"
#include "fbsde/lsmc.hpp"
#include "fbsde/model.hpp"
#include "fbsde/parallel.hpp"
#include "fbsde/pde.hpp"
#include "fbsde/rng.hpp"
#include "fbsde/simulate.hpp"
#include "fbsde/time_grid.hpp"
#include "fbsde/trajectory.hpp"
