#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunecam/model.hpp"

namespace prunecam::prune {

// Per prunable conv layer: one flag per output channel, true = active.
// Monotone across pruning steps: once false, never true again. The stem
// conv carries no entry.
struct PruneMask {
  std::map<std::string, std::vector<uint8_t>> active;

  static PruneMask full(const model::ResidualNet& net);
  bool empty() const { return active.empty(); }
  int active_count(const std::string& layer) const;
  int total_count(const std::string& layer) const;
};

// Zeroes weights, bias, and norm scale/shift of deactivated channels.
void apply_mask_to_params(model::ResidualNet& net, const PruneMask& mask);

// Zeroes the gradients of deactivated channels (call after backward,
// before the optimizer step).
void apply_mask_to_grads(model::ResidualNet& net, const PruneMask& mask);

}  // namespace prunecam::prune
