#include "prunecam/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "graph_detail.hpp"

namespace prunecam {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out.empty() ? "scalar" : out;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddBias: return "add_bias";
    case Op::kConv2d: return "conv2d";
    case Op::kLinear: return "linear";
    case Op::kRelu: return "relu";
    case Op::kBatchNorm2d: return "batch_norm2d";
    case Op::kDropout: return "dropout";
    case Op::kGlobalAvgPool: return "global_avg_pool";
    case Op::kReshape: return "reshape";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSelect: return "select";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSumExp: return "log_sum_exp";
    case Op::kRecip: return "recip";
    case Op::kSoftplus: return "softplus";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kCrossEntropy: return "cross_entropy";
  }
  return "?";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(shape_numel(n->shape)), v);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return node_->numel(); }
std::vector<float>& Tensor::data() { return node_->value; }
const std::vector<float>& Tensor::data() const { return node_->value; }

float Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor is " + shape_str(shape()) + ", not scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }
bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->value.size();
}

const std::vector<float>& Tensor::grad() const {
  if (!has_grad())
    throw std::runtime_error("grad: no gradient recorded for this tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->value.size(), 0.0f);
}

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

namespace {

// Iterative post-order DFS over parent edges.
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a defined scalar, got " +
                     (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  Node* root = loss.node().get();
  auto order = topo_order(root);
  for (Node* n : order) {
    if (n->requires_grad && n->grad.size() != n->value.size())
      n->grad.assign(n->value.size(), 0.0f);
  }
  if (!root->requires_grad) root->grad.assign(1, 0.0f);
  root->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->op == Op::kLeaf) continue;
    if (n->grad.empty()) continue;
    detail::backward_node(*n);
  }
}

bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

double finite_diff_check(const Tensor& loss, std::span<const Tensor> params,
                         double epsilon, int min_samples, uint64_t seed) {
  if (epsilon <= 0.0 || epsilon > 1e-2)
    throw std::invalid_argument("finite_diff_check: epsilon must be in (0, 1e-2]");
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("finite_diff_check: loss must be scalar");

  // Reverse-mode gradients on the recorded float graph.
  for (const Tensor& p : params)
    p.node()->grad.assign(p.node()->value.size(), 0.0f);
  backward(loss);

  Node* root = loss.node().get();
  auto order = topo_order(root);

  // Double-precision shadow values for every node in the graph.
  std::unordered_map<Node*, std::vector<double>> vals;
  vals.reserve(order.size());
  for (Node* n : order) {
    if (n->op == Op::kLeaf)
      vals.emplace(n, std::vector<double>(n->value.begin(), n->value.end()));
  }
  auto eval_all = [&]() -> double {
    for (Node* n : order) {
      if (n->op == Op::kLeaf) continue;
      std::vector<const std::vector<double>*> pv;
      pv.reserve(n->parents.size());
      for (auto& p : n->parents) pv.push_back(&vals[p.get()]);
      vals[n] = detail::eval_node_fp64(*n, pv);
    }
    return vals[root][0];
  };

  // Sample parameter elements without replacement across all tensors.
  int64_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  if (total == 0) throw std::invalid_argument("finite_diff_check: no parameters");
  int64_t want = std::min<int64_t>(total, min_samples);
  std::mt19937_64 rng(seed);
  std::vector<int64_t> pool(total);
  for (int64_t i = 0; i < total; ++i) pool[i] = i;
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<size_t>(want));

  double max_err = 0.0;
  for (int64_t flat : pool) {
    // Locate (tensor, element).
    size_t pi = 0;
    int64_t off = flat;
    while (off >= params[pi].numel()) off -= params[pi++].numel();
    Node* leaf = params[pi].node().get();
    auto it = vals.find(leaf);
    double g_fd = 0.0;
    if (it != vals.end()) {
      const double orig = it->second[static_cast<size_t>(off)];
      it->second[static_cast<size_t>(off)] = orig + epsilon;
      const double lp = eval_all();
      it->second[static_cast<size_t>(off)] = orig - epsilon;
      const double lm = eval_all();
      it->second[static_cast<size_t>(off)] = orig;
      g_fd = (lp - lm) / (2.0 * epsilon);
    }
    const double g_ad =
        params[pi].has_grad() ? params[pi].grad()[static_cast<size_t>(off)] : 0.0;
    const double denom = std::max({std::abs(g_ad), std::abs(g_fd), 1e-8});
    max_err = std::max(max_err, std::abs(g_ad - g_fd) / denom);
  }
  // Restore shadow state consistency for any later use.
  eval_all();
  return max_err;
}

}  // namespace prunecam
