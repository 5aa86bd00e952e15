#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "prunecam/data.hpp"
#include "prunecam/masks.hpp"
#include "prunecam/model.hpp"

namespace prunecam::train {

struct TrainConfig {
  float lr = 1e-3f;
  float weight_decay = 1e-4f;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  uint64_t seed = 0;
  bool augment = true;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
};

struct FoldResult {
  int fold = 0;
  double best_val_acc = 0.0;
  int best_epoch = 0;
  std::vector<int> confusion;  // K*K row-major, rows = true class
  std::vector<EpochRecord> history;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<int> confusion;
};

// Planar [N,3,H,W] batch from interleaved normalized images.
Tensor make_batch(const std::vector<const data::LabeledImage*>& images);

EvalResult evaluate(const model::ResidualNet& net,
                    const std::vector<data::LabeledImage>& val_preprocessed,
                    int batch_size);

// Adam + cross entropy with early stopping on validation accuracy
// (strict improvement; ties keep the earlier epoch). The net ends up
// holding the best epoch's parameters. `masks`, when given, freezes
// pruned channels (zero gradients each step).
FoldResult train_one(model::ResidualNet& net, const prune::PruneMask* masks,
                     const std::vector<data::LabeledImage>& train_raw,
                     const std::vector<data::LabeledImage>& val_raw,
                     const TrainConfig& cfg);

struct CvResult {
  data::FoldPlan plan;
  std::vector<FoldResult> folds;
  std::vector<model::ResidualNet> models;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  int best_fold = 0;
};

using FoldCallback = std::function<void(const FoldResult&)>;

CvResult cross_validate(const std::vector<data::LabeledImage>& dataset, int k,
                        const model::NetConfig& net_cfg, const TrainConfig& cfg,
                        const FoldCallback& on_fold = nullptr);

double mean_of(const std::vector<double>& xs);
double sample_std(const std::vector<double>& xs);

}  // namespace prunecam::train
