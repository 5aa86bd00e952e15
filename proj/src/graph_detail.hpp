#pragma once

#include <vector>

#include "prunecam/tensor.hpp"

namespace prunecam::detail {

// Propagates node.grad into the grads of its parents (implemented in ops.cpp).
void backward_node(Node& n);

// Recomputes a node's forward value in double precision from double-valued
// parents. Used by the finite-difference gradient check.
std::vector<double> eval_node_fp64(
    const Node& n, const std::vector<const std::vector<double>*>& parent_vals);

}  // namespace prunecam::detail
