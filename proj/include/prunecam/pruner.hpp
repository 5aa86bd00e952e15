#pragma once

#include <map>
#include <string>
#include <vector>

#include "prunecam/masks.hpp"
#include "prunecam/model.hpp"
#include "prunecam/trainer.hpp"

namespace prunecam::prune {

// L1 importance per output channel: sum of |w| over the channel's kernel
// weights. Deactivated channels come back as -infinity so they are never
// re-ranked.
std::vector<double> channel_importance(const model::ResidualNet& net,
                                       const PruneMask& mask,
                                       const std::string& layer);

// Core ranking rule shared by the net-level step and schedule-arithmetic
// checks: deactivates the floor(fraction * active) lowest-importance
// active channels; ties break toward the lower channel index. Returns
// the channel indices to prune (empty when the layer would drop below
// one active channel).
std::vector<int> select_prune_indices(const std::vector<double>& importance,
                                      const std::vector<uint8_t>& active,
                                      double fraction);

struct PruneStepOutcome {
  std::map<std::string, int> pruned_per_layer;
  std::vector<std::string> warnings;  // layers left untouched
};

// One layer-wise local pruning step at the given rate. Zeroes the pruned
// channels' conv weights, bias entries, and norm scale/shift.
PruneStepOutcome prune_step(model::ResidualNet& net, PruneMask& mask,
                            double fraction);

struct SparsityReport {
  double overall = 0.0;
  std::map<std::string, double> per_layer;
};

// Fraction of zero-valued weights among the prunable conv layers.
SparsityReport sparsity(const model::ResidualNet& net);

struct PruneSchedule {
  double fraction_per_step = 0.2;
  int num_steps = 13;
  train::TrainConfig fine_tune;

  void validate() const;
};

struct StepReport {
  int step = 0;
  std::vector<double> fold_accs;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  double best_acc = 0.0;
  int best_fold = 0;
  SparsityReport sparsity;  // of the best model (identical across folds)
};

using StepCallback = std::function<void(const StepReport&)>;

// Iterative prune -> fine-tune over all fold models; step 0 reports the
// incoming models unchanged. Models and masks are updated in place.
std::vector<StepReport> iterate(std::vector<model::ResidualNet>& models,
                                std::vector<PruneMask>& masks,
                                const std::vector<data::LabeledImage>& dataset,
                                const data::FoldPlan& plan,
                                const PruneSchedule& schedule,
                                const StepCallback& on_step = nullptr);

// Eval-mode forward of a physically compacted twin: pruned channels are
// deleted from the weight tensors (and from downstream input slices fed
// by in-block convs); block outputs are scattered back to full width so
// residual additions stay well-formed. Used to demonstrate
// mask-equivalence.
std::vector<float> compact_forward_logits(const model::ResidualNet& net,
                                          const PruneMask& mask,
                                          const Tensor& batch);

}  // namespace prunecam::prune
