#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "prunecam/tensor.hpp"

namespace prunecam::model {

struct NetConfig {
  std::array<int, 4> stage_channels = {16, 32, 64, 128};
  std::array<int, 4> blocks_per_stage = {2, 2, 2, 2};
  int num_classes = 4;
  float dropout_p = 0.4f;
  int input_size = 64;

  void validate() const;
};

struct Conv2dLayer {
  std::string name;
  Tensor w;  // [O,I,k,k]
  Tensor b;  // [O]
  int stride = 1;
  int pad = 1;
  int out_channels() const { return w.shape()[0]; }
  int in_channels() const { return w.shape()[1]; }
};

struct BatchNormLayer {
  std::string name;
  Tensor gamma;
  Tensor beta;
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

struct BasicBlock {
  std::string name;  // e.g. "s2.b1"
  Conv2dLayer c1;
  BatchNormLayer bn1;
  Conv2dLayer c2;
  BatchNormLayer bn2;
  std::optional<Conv2dLayer> proj;  // 1x1 when shape changes
  std::optional<BatchNormLayer> proj_bn;
  int stride = 1;
};

// ResNet-style classifier: stride-2 stem conv, four stages of basic
// blocks (stage 1 keeps resolution, stages 2-4 halve it), global average
// pool, dropout, fully connected head.
class ResidualNet {
 public:
  static ResidualNet build(const NetConfig& cfg, uint64_t seed);

  const NetConfig& config() const { return cfg_; }

  // Train-mode forward engages dropout and batch statistics (and updates
  // the BN running stats); the rng drives dropout masks.
  Tensor forward(const Tensor& batch, bool train = false,
                 std::mt19937_64* rng = nullptr);
  Tensor forward(const Tensor& batch) const;  // eval mode

  // Eval forward that also yields the penultimate (pooled) feature
  // vector, length stage_channels[3].
  Tensor forward_features(const Tensor& batch, Tensor* features) const;

  // Feature-map tap points, in network order: "stem", then one per block.
  std::vector<std::string> tap_names() const;
  std::string last_tap() const;  // last block output
  // Runs a full eval forward, storing the intermediate at `tap`.
  Tensor forward_capture(const Tensor& batch, const std::string& tap,
                         Tensor* tap_out) const;
  // Resumes an eval forward from an activation supplied at `tap`.
  Tensor forward_from(const std::string& tap, const Tensor& acts) const;

  struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay;  // weight decay applies (conv / fc weights)
  };
  std::vector<NamedParam> named_parameters();
  // Parameters plus BN running stats, for serialization.
  struct NamedBuffer {
    std::string name;
    std::vector<float>* values;
  };
  std::vector<NamedBuffer> named_buffers();

  // Convolutions subject to channel pruning: every block conv, in order.
  // The stem, projection shortcuts, and the FC head are excluded.
  std::vector<std::string> prunable_layers() const;
  Conv2dLayer& conv(const std::string& name);
  const Conv2dLayer& conv(const std::string& name) const;
  BatchNormLayer& bn_of(const std::string& conv_name);

  Conv2dLayer& stem() { return stem_; }
  BatchNormLayer& stem_bn() { return stem_bn_; }
  std::vector<BasicBlock>& blocks() { return blocks_; }
  const std::vector<BasicBlock>& blocks() const { return blocks_; }
  Tensor& fc_w() { return fc_w_; }
  Tensor& fc_b() { return fc_b_; }
  const Tensor& fc_w() const { return fc_w_; }
  const Tensor& fc_b() const { return fc_b_; }

  // Deep copy: fresh tensors, same values.
  ResidualNet clone() const;

 private:
  Tensor forward_impl(const Tensor& batch, bool train, std::mt19937_64* rng,
                      const std::string* tap, Tensor* tap_out,
                      Tensor* features) const;

  NetConfig cfg_;
  Conv2dLayer stem_;
  BatchNormLayer stem_bn_;
  std::vector<BasicBlock> blocks_;
  Tensor fc_w_;
  Tensor fc_b_;
};

}  // namespace prunecam::model
