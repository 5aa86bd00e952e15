#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "prunecam/errors.hpp"

namespace prunecam {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Operation kinds recorded in the compute graph. Each node keeps enough
// state (op kind + attrs + parent references) to be re-evaluated later,
// which the finite-difference gradient check uses to recompute the loss
// in double precision.
enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,        // multiply by compile-time constant
  kAddBias,      // [N,C,H,W] + [C]
  kConv2d,
  kLinear,
  kRelu,
  kBatchNorm2d,  // parents: x, gamma, beta
  kDropout,
  kGlobalAvgPool,
  kReshape,
  kSum,
  kMean,
  kSelect,       // pick one element -> [1]
  kSoftmax,      // row-wise over [N,K]
  kLogSumExp,    // vector -> [1]
  kRecip,
  kSoftplus,
  kMulScalar,    // x * s where s is a [1] graph node
  kCrossEntropy, // fused log-softmax + NLL mean over batch
};

const char* op_name(Op op);

struct ConvAttrs {
  int stride = 1;
  int pad = 0;
};
struct BnAttrs {
  bool train = false;
  float momentum = 0.1f;
  float eps = 1e-5f;
  // Statistics used by this node: batch stats when train, a copy of the
  // running stats otherwise. Saved so backward and re-evaluation do not
  // depend on layer state that may mutate later.
  std::vector<float> mean;
  std::vector<float> var;
};
struct DropoutAttrs {
  float keep = 1.0f;
  std::vector<uint8_t> mask;
};
struct ScaleAttrs {
  double factor = 1.0;
};
struct SelectAttrs {
  int64_t index = 0;
};
struct CeAttrs {
  std::vector<int> labels;
};

using OpAttrs = std::variant<std::monostate, ConvAttrs, BnAttrs, DropoutAttrs,
                             ScaleAttrs, SelectAttrs, CeAttrs>;

struct Node {
  Op op = Op::kLeaf;
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // sized lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  OpAttrs attrs;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

// Dense tensor handle. Value semantics at the API level, shared node
// storage underneath so graphs can reference inputs without copies.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  std::vector<float>& data();
  const std::vector<float>& data() const;
  float item() const;  // scalar tensors only

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool has_grad() const;
  const std::vector<float>& grad() const;
  void zero_grad();

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Thread-local switch: while a guard is alive, ops compute values but do
// not record graph nodes (results come out as leaves).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(const Tensor& x);
// Mutates running stats when train is true; the node itself stays
// self-contained (stats used are copied into the node attrs).
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<float>& running_mean,
                    std::vector<float>& running_var, bool train,
                    float momentum = 0.1f, float eps = 1e-5f);
Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng);
Tensor global_avg_pool(const Tensor& x);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor select(const Tensor& x, int64_t flat_index);
Tensor softmax(const Tensor& x);
Tensor log_sum_exp(const Tensor& x);
Tensor recip(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels);

}  // namespace ops

// Reverse-mode pass from a scalar loss. Gradients accumulate into the
// `grad` buffers of every node in the graph (callers zero leaf grads as
// needed). Throws ShapeError if the loss is not scalar.
void backward(const Tensor& loss);

bool all_finite(const Tensor& t);

// Compares reverse-mode gradients of `loss` w.r.t. sampled elements of
// `params` against central finite differences obtained by re-evaluating
// the recorded graph in double precision. Returns the max relative error
// |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8) over the sample.
double finite_diff_check(const Tensor& loss, std::span<const Tensor> params,
                         double epsilon = 1e-3, int min_samples = 50,
                         uint64_t seed = 0);

}  // namespace prunecam
