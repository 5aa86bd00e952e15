#include "prunecam/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "prunecam/errors.hpp"

namespace prunecam::prune {

PruneMask PruneMask::full(const model::ResidualNet& net) {
  PruneMask m;
  for (const auto& layer : net.prunable_layers())
    m.active[layer228 : layer] = {};
  return m;
}

}  // namespace prunecam::prune
