#include "prunecam/model.hpp"

#include <cmath>

#include "prunecam/errors.hpp"

namespace prunecam::model {

namespace {

using ops::add;
using ops::add_bias;
using ops::batch_norm2d;
using ops::conv2d;
using ops::global_avg_pool;
using ops::linear;
using ops::relu;

Tensor he_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> uni(-bound, bound);
  std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = uni(rng);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Conv2dLayer make_conv(const std::string& name, int in_ch, int out_ch, int k,
                      int stride, int pad, std::mt19937_64& rng) {
  Conv2dLayer c;
  c.name = name;
  c.w = he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng);
  c.b = Tensor::zeros({out_ch}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

BatchNormLayer make_bn(const std::string& name, int ch) {
  BatchNormLayer bn;
  bn.name = name;
  bn.gamma = Tensor::full({ch}, 1.0f, true);
  bn.beta = Tensor::zeros({ch}, true);
  bn.running_mean.assign(ch, 0.0f);
  bn.running_var.assign(ch, 1.0f);
  return bn;
}

Tensor conv_bn(const Conv2dLayer& c, const BatchNormLayer& bn_const,
               const Tensor& x, bool train) {
  auto& bn = const_cast<BatchNormLayer&>(bn_const);
  Tensor h = conv2d(x, c.w, c.stride, c.pad);
  h = add_bias(h, c.b);
  return batch_norm2d(h, bn.gamma, bn.beta, bn.running_mean, bn.running_var,
                      train, bn.momentum, bn.eps);
}

}  // namespace

void NetConfig::validate() const {
  if (dropout_p < 0.0f || dropout_p >= 1.0f)
    throw ConfigError("net: dropout_p must be in [0,1)");
  for (int c : stage_channels)
    if (c < 4) throw ConfigError("net: stage channels must each be >= 4");
  for (int b : blocks_per_stage)
    if (b < 1) throw ConfigError("net: blocks_per_stage must each be >= 1");
  if (num_classes < 2) throw ConfigError("net: num_classes must be >= 2");
  if (input_size < 16)
    throw ConfigError("net: input_size " + std::to_string(input_size) +
                      " too small for 4 stride-2 reductions (need >= 16)");
}

ResidualNet ResidualNet::build(const NetConfig& cfg, uint64_t seed) {
  cfg.validate();
  ResidualNet net;
  net.cfg_ = cfg;
  std::mt19937_64 rng(seed);

  net.stem_ = make_conv("stem", 3, cfg.stage_channels[0], 3, 2, 1, rng);
  net.stem_bn_ = make_bn("stem.bn", cfg.stage_channels[0]);

  int in_ch = cfg.stage_channels[0];
  for (int s = 0; s < 4; ++s) {
    const int out_ch = cfg.stage_channels[s];
    for (int b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      BasicBlock blk;
      blk.name = "s" + std::to_string(s + 1) + ".b" + std::to_string(b + 1);
      blk.stride = (s > 0 && b == 0) ? 2 : 1;
      blk.c1 = make_conv(blk.name + ".c1", in_ch, out_ch, 3, blk.stride, 1, rng);
      blk.bn1 = make_bn(blk.name + ".bn1", out_ch);
      blk.c2 = make_conv(blk.name + ".c2", out_ch, out_ch, 3, 1, 1, rng);
      blk.bn2 = make_bn(blk.name + ".bn2", out_ch);
      if (blk.stride != 1 || in_ch != out_ch) {
        blk.proj = make_conv(blk.name + ".proj", in_ch, out_ch, 1, blk.stride,
                             0, rng);
        blk.proj_bn = make_bn(blk.name + ".proj.bn", out_ch);
      }
      net.blocks_.push_back(std::move(blk));
      in_ch = out_ch;
    }
  }
  net.fc_w_ = he_uniform({cfg.num_classes, cfg.stage_channels[3]},
                         cfg.stage_channels[3], rng);
  net.fc_b_ = Tensor::zeros({cfg.num_classes}, true);
  return net;
}

Tensor ResidualNet::forward_impl(const Tensor& batch, bool train,
                                 std::mt19937_64* rng, const std::string* tap,
                                 Tensor* tap_out, Tensor* features) const {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_size ||
      s[3] != cfg_.input_size)
    throw ShapeError("forward: batch " + shape_str(s) + " does not match Nx3x" +
                     std::to_string(cfg_.input_size) + "x" +
                     std::to_string(cfg_.input_size));
  if (train && cfg_.dropout_p > 0.0f && !rng)
    throw std::invalid_argument("forward: train mode needs an rng for dropout");

  Tensor h = relu(conv_bn(stem_, stem_bn_, batch, train));
  if (tap && *tap == "stem" && tap_out) *tap_out = h;

  for (const auto& blk : blocks_) {
    Tensor main = relu(conv_bn(blk.c1, blk.bn1, h, train));
    main = conv_bn(blk.c2, blk.bn2, main, train);
    Tensor idn = h;
    if (blk.proj) idn = conv_bn(*blk.proj, *blk.proj_bn, h, train);
    h = relu(add(main, idn));
    if (tap && *tap == blk.name && tap_out) *tap_out = h;
  }

  Tensor feat = global_avg_pool(h);
  if (features) *features = feat;
  if (train && cfg_.dropout_p > 0.0f) feat = ops::dropout(feat, cfg_.dropout_p, *rng);
  return linear(feat, fc_w_, fc_b_);
}

Tensor ResidualNet::forward(const Tensor& batch, bool train,
                            std::mt19937_64* rng) {
  return forward_impl(batch, train, rng, nullptr, nullptr, nullptr);
}

Tensor ResidualNet::forward(const Tensor& batch) const {
  return forward_impl(batch, false, nullptr, nullptr, nullptr, nullptr);
}

Tensor ResidualNet::forward_features(const Tensor& batch,
                                     Tensor* features) const {
  return forward_impl(batch, false, nullptr, nullptr, nullptr, features);
}

std::vector<std::string> ResidualNet::tap_names() const {
  std::vector<std::string> names = {"stem"};
  for (const auto& blk : blocks_) names.push_back(blk.name);
  return names;
}

std::string ResidualNet::last_tap() const { return blocks_.back().name; }

Tensor ResidualNet::forward_capture(const Tensor& batch, const std::string& tap,
                                    Tensor* tap_out) const {
  Tensor logits = forward_impl(batch, false, nullptr, &tap, tap_out, nullptr);
  if (tap_out && !tap_out->defined())
    throw std::invalid_argument("forward_capture: unknown tap '" + tap + "'");
  return logits;
}

Tensor ResidualNet::forward_from(const std::string& tap,
                                 const Tensor& acts) const {
  size_t start = 0;
  bool found = false;
  if (tap == "stem") {
    start = 0;
    found = true;
  } else {
    for (size_t i = 0; i < blocks_.size(); ++i) {
      if (blocks_[i].name == tap) {
        start = i + 1;
        found = true;
        break;
      }
    }
  }
  if (!found)
    throw std::invalid_argument("forward_from: unknown tap '" + tap + "'");

  Tensor h = acts;
  for (size_t i = start; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    Tensor main = relu(conv_bn(blk.c1, blk.bn1, h, false));
    main = conv_bn(blk.c2, blk.bn2, main, false);
    Tensor idn = h;
    if (blk.proj) idn = conv_bn(*blk.proj, *blk.proj_bn, h, false);
    h = relu(add(main, idn));
  }
  return linear(global_avg_pool(h), fc_w_, fc_b_);
}

std::vector<ResidualNet::NamedParam> ResidualNet::named_parameters() {
  std::vector<NamedParam> out;
  auto add_conv = [&](Conv2dLayer& c) {
    out.push_back({c.name + ".w", c.w, true});
    out.push_back({c.name + ".b", c.b, false});
  };
  auto add_bn = [&](BatchNormLayer& bn) {
    out.push_back({bn.name + ".g", bn.gamma, false});
    out.push_back({bn.name + ".b", bn.beta, false});
  };
  add_conv(stem_);
  add_bn(stem_bn_);
  for (auto& blk : blocks_) {
    add_conv(blk.c1);
    add_bn(blk.bn1);
    add_conv(blk.c2);
    add_bn(blk.bn2);
    if (blk.proj) {
      add_conv(*blk.proj);
      add_bn(*blk.proj_bn);
    }
  }
  out.push_back({"fc.w", fc_w_, true});
  out.push_back({"fc.b", fc_b_, false});
  return out;
}

std::vector<ResidualNet::NamedBuffer> ResidualNet::named_buffers() {
  std::vector<NamedBuffer> out;
  auto add_bn = [&](BatchNormLayer& bn) {
    out.push_back({bn.name + ".rm", &bn.running_mean});
    out.push_back({bn.name + ".rv", &bn.running_var});
  };
  add_bn(stem_bn_);
  for (auto& blk : blocks_) {
    add_bn(blk.bn1);
    add_bn(blk.bn2);
    if (blk.proj_bn) add_bn(*blk.proj_bn);
  }
  return out;
}

std::vector<std::string> ResidualNet::prunable_layers() const {
  std::vector<std::string> out;
  for (const auto& blk : blocks_) {
    out.push_back(blk.c1.name);
    out.push_back(blk.c2.name);
  }
  return out;
}

Conv2dLayer& ResidualNet::conv(const std::string& name) {
  if (name == "stem") return stem_;
  for (auto& blk : blocks_) {
    if (name == blk.c1.name) return blk.c1;
    if (name == blk.c2.name) return blk.c2;
    if (blk.proj && name == blk.proj->name) return *blk.proj;
  }
  throw std::invalid_argument("unknown layer name: " + name);
}

const Conv2dLayer& ResidualNet::conv(const std::string& name) const {
  return const_cast<ResidualNet*>(this)->conv(name);
}

BatchNormLayer& ResidualNet::bn_of(const std::string& conv_name) {
  if (conv_name == "stem") return stem_bn_;
  for (auto& blk : blocks_) {
    if (conv_name == blk.c1.name) return blk.bn1;
    if (conv_name == blk.c2.name) return blk.bn2;
    if (blk.proj && conv_name == blk.proj->name) return *blk.proj_bn;
  }
  throw std::invalid_argument("unknown layer name: " + conv_name);
}

ResidualNet ResidualNet::clone() const {
  ResidualNet out;
  out.cfg_ = cfg_;
  auto copy_tensor = [](const Tensor& t) {
    return Tensor::from_data(t.shape(), t.data(), t.requires_grad());
  };
  auto copy_conv = [&](const Conv2dLayer& c) {
    Conv2dLayer n = c;
    n.w = copy_tensor(c.w);
    n.b = copy_tensor(c.b);
    return n;
  };
  auto copy_bn = [&](const BatchNormLayer& bn) {
    BatchNormLayer n = bn;
    n.gamma = copy_tensor(bn.gamma);
    n.beta = copy_tensor(bn.beta);
    return n;
  };
  out.stem_ = copy_conv(stem_);
  out.stem_bn_ = copy_bn(stem_bn_);
  for (const auto& blk : blocks_) {
    BasicBlock n;
    n.name = blk.name;
    n.stride = blk.stride;
    n.c1 = copy_conv(blk.c1);
    n.bn1 = copy_bn(blk.bn1);
    n.c2 = copy_conv(blk.c2);
    n.bn2 = copy_bn(blk.bn2);
    if (blk.proj) {
      n.proj = copy_conv(*blk.proj);
      n.proj_bn = copy_bn(*blk.proj_bn);
    }
    out.blocks_.push_back(std::move(n));
  }
  out.fc_w_ = copy_tensor(fc_w_);
  out.fc_b_ = copy_tensor(fc_b_);
  return out;
}

}  // namespace prunecam::model
