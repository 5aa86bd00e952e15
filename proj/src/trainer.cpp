#include "prunecam/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prunecam/errors.hpp"
#include "prunecam/optim.hpp"

namespace prunecam::train {

void TrainConfig::validate() const {
  if (lr < 0.0f) throw ConfigError("train: lr must be >= 0");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
}

Tensor make_batch(const std::vector<const data::LabeledImage*>& images) {
  if (images.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int N = static_cast<int>(images.size());
  const int H = images[0]->height, W = images[0]->width;
  std::vector<float> v(static_cast<size_t>(N) * 3 * H * W);
  for (int n = 0; n < N; ++n) {
    const auto& img = *images[n];
    if (img.height != H || img.width != W)
      throw ShapeError("make_batch: mixed image sizes");
    for (int c = 0; c < 3; ++c) {
      float* dst = v.data() + ((static_cast<int64_t>(n) * 3 + c) * H * W);
      for (int p = 0; p < H * W; ++p)
        dst[p] = img.pixels[static_cast<size_t>(p) * 3 + c];
    }
  }
  return Tensor::from_data({N, 3, H, W}, std::move(v));
}

namespace {

int argmax_row(const std::vector<float>& logits, int row, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (logits[static_cast<size_t>(row) * k + j] >
        logits[static_cast<size_t>(row) * k + best])
      best = j;
  return best;
}

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot take_snapshot(model::ResidualNet& net) {
  Snapshot s;
  for (auto& p : net.named_parameters()) s.params.push_back(p.tensor.data());
  for (auto& b : net.named_buffers()) s.buffers.push_back(*b.values);
  return s;
}

void restore_snapshot(model::ResidualNet& net, const Snapshot& s) {
  auto params = net.named_parameters();
  for (size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = s.params[i];
  auto buffers = net.named_buffers();
  for (size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = s.buffers[i];
}

}  // namespace

EvalResult evaluate(const model::ResidualNet& net,
                    const std::vector<data::LabeledImage>& val,
                    int batch_size) {
  const int K = net.config().num_classes;
  EvalResult res;
  res.confusion.assign(static_cast<size_t>(K) * K, 0);
  int correct = 0;
  NoGradGuard ng;
  for (size_t start = 0; start < val.size(); start += batch_size) {
    const size_t end = std::min(val.size(), start + batch_size);
    std::vector<const data::LabeledImage*> ptrs;
    for (size_t i = start; i < end; ++i) ptrs.push_back(&val[i]);
    Tensor logits = net.forward(make_batch(ptrs));
    for (size_t i = start; i < end; ++i) {
      const int pred = argmax_row(logits.data(), static_cast<int>(i - start), K);
      const int truth = val[i].label;
      ++res.confusion[static_cast<size_t>(truth) * K + pred];
      if (pred == truth) ++correct;
    }
  }
  res.accuracy = val.empty() ? 0.0 : static_cast<double>(correct) / val.size();
  return res;
}

FoldResult train_one(model::ResidualNet& net, const prune::PruneMask* masks,
                     const std::vector<data::LabeledImage>& train_raw,
                     const std::vector<data::LabeledImage>& val_raw,
                     const TrainConfig& cfg) {
  cfg.validate();
  if (train_raw.empty()) throw ConfigError("train_one: empty training set");
  if (val_raw.empty()) throw ConfigError("train_one: empty validation set");

  std::vector<data::LabeledImage> val;
  val.reserve(val_raw.size());
  for (const auto& img : val_raw) val.push_back(data::preprocess(img));

  std::vector<optim::ParamRef> refs;
  for (auto& p : net.named_parameters()) refs.push_back({p.tensor, p.decay});
  optim::Adam opt(std::move(refs), cfg.lr, cfg.weight_decay);

  FoldResult result;
  double best_acc = -1.0;
  Snapshot best;
  int since_best = 0;

  std::vector<size_t> order(train_raw.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 erng(data::mix_seed(cfg.seed, 0x9000 + epoch));
    std::shuffle(order.begin(), order.end(), erng);
    std::mt19937_64 drop_rng(data::mix_seed(cfg.seed, 0xd000 + epoch));

    double loss_sum = 0.0;
    int64_t batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<data::LabeledImage> prepped;
      std::vector<const data::LabeledImage*> ptrs;
      std::vector<int> labels;
      prepped.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        const auto& raw = train_raw[order[i]];
        data::LabeledImage img =
            cfg.augment
                ? data::augment(raw, data::mix_seed(cfg.seed,
                                                    (static_cast<uint64_t>(epoch) << 32) |
                                                        order[i]))
                : raw;
        prepped.push_back(data::preprocess(img));
        labels.push_back(raw.label);
      }
      for (const auto& img : prepped) ptrs.push_back(&img);

      Tensor logits = net.forward(make_batch(ptrs), true, &drop_rng);
      Tensor loss = ops::cross_entropy_mean(logits, labels);
      const float lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("train_one: training diverged (non-finite loss) at epoch " +
                           std::to_string(epoch));
      loss_sum += lv;
      ++batches;

      opt.zero_grad();
      backward(loss);
      if (masks) prune::apply_mask_to_grads(net, *masks);
      opt.step();
      if (masks) prune::apply_mask_to_params(net, *masks);
    }

    const EvalResult ev = evaluate(net, val, cfg.batch_size);
    result.history.push_back(
        {epoch, loss_sum / std::max<int64_t>(1, batches), ev.accuracy});

    if (ev.accuracy > best_acc) {
      best_acc = ev.accuracy;
      best = take_snapshot(net);
      result.best_epoch = epoch;
      result.best_val_acc = ev.accuracy;
      result.confusion = ev.confusion;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  restore_snapshot(net, best);
  return result;
}

CvResult cross_validate(const std::vector<data::LabeledImage>& dataset, int k,
                        const model::NetConfig& net_cfg, const TrainConfig& cfg,
                        const FoldCallback& on_fold) {
  CvResult out;
  out.plan = data::stratified_kfold(dataset, k, cfg.seed);

  for (int fold = 0; fold < k; ++fold) {
    std::vector<data::LabeledImage> train_set, val_set;
    for (const auto& img : dataset) {
      if (out.plan.assignments.at(img.id) == fold)
        val_set.push_back(img);
      else
        train_set.push_back(img);
    }
    model::ResidualNet net =
        model::ResidualNet::build(net_cfg, data::mix_seed(cfg.seed, fold));
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + static_cast<uint64_t>(fold);
    FoldResult fr = train_one(net, nullptr, train_set, val_set, fold_cfg);
    fr.fold = fold;
    if (on_fold) on_fold(fr);
    out.folds.push_back(std::move(fr));
    out.models.push_back(std::move(net));
  }

  std::vector<double> accs;
  for (const auto& f : out.folds) accs.push_back(f.best_val_acc);
  out.mean_acc = mean_of(accs);
  out.std_acc = sample_std(accs);
  out.best_fold = 0;
  for (int f = 1; f < k; ++f)
    if (out.folds[f].best_val_acc > out.folds[out.best_fold].best_val_acc)
      out.best_fold = f;
  return out;
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace prunecam::train
