#include <algorithm>
#include <cmath>
#include <cstring>

#include "graph_detail.hpp"
#include "prunecam/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace prunecam {
namespace {

std::shared_ptr<Node> make_node(Op op, Shape shape, std::vector<float> value,
                                std::vector<std::shared_ptr<Node>> parents,
                                OpAttrs attrs = std::monostate{}) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool record = grad_enabled();
  bool req = false;
  if (record)
    for (auto& p : parents) req = req || p->requires_grad;
  if (record && req) {
    n->op = op;
    n->parents = std::move(parents);
    n->attrs = std::move(attrs);
    n->requires_grad = true;
  }
  return n;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct ConvDims {
  int N, C, H, W, O, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const Shape& xs, const Shape& ws, int stride, int pad) {
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d: expected NCHW input and OIHW kernel, got " +
                     shape_str(xs) + " and " + shape_str(ws));
  ConvDims d;
  d.N = xs[0]; d.C = xs[1]; d.H = xs[2]; d.W = xs[3];
  d.O = ws[0]; d.kh = ws[2]; d.kw = ws[3];
  if (ws[1] != d.C)
    throw ShapeError("conv2d: input channel mismatch, input " + shape_str(xs) +
                     " vs kernel " + shape_str(ws));
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho <= 0 || d.Wo <= 0)
    throw ShapeError("conv2d: kernel " + shape_str(ws) +
                     " does not fit input " + shape_str(xs));
  return d;
}

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, T* col) {
  const int64_t P = static_cast<int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* dst = col + ((static_cast<int64_t>(c) * kh + i) * kw + j) * P;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + i;
          T* drow = dst + static_cast<int64_t>(ho) * Wo;
          if (hi < 0 || hi >= H) {
            std::fill(drow, drow + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<int64_t>(c) * H + hi) * W;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + j;
            drow[wo] = (wi >= 0 && wi < W) ? src[wi] : T(0);
          }
        }
      }
    }
  }
}

// 64-bit accumulation over the kernel dimension, blocked over spatial
// positions so accumulators stay in registers.
template <typename T>
void gemm_row(const T* wrow, const T* col, T* yrow, int K, int64_t P) {
  constexpr int kBlock = 64;
  for (int64_t p0 = 0; p0 < P; p0 += kBlock) {
    const int pb = static_cast<int>(std::min<int64_t>(kBlock, P - p0));
    double acc[kBlock];
    std::fill(acc, acc + pb, 0.0);
    for (int k = 0; k < K; ++k) {
      const double wv = static_cast<double>(wrow[k]);
      if (wv == 0.0) continue;
      const T* cp = col + static_cast<int64_t>(k) * P + p0;
      for (int i = 0; i < pb; ++i) acc[i] += wv * static_cast<double>(cp[i]);
    }
    for (int i = 0; i < pb; ++i) yrow[p0 + i] = static_cast<T>(acc[i]);
  }
}

template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvDims& d,
                    int stride, int pad) {
  const int K = d.C * d.kh * d.kw;
  const int64_t P = static_cast<int64_t>(d.Ho) * d.Wo;
  std::vector<T> cols(static_cast<size_t>(d.N) * K * P);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.N; ++n)
    im2col(x + static_cast<int64_t>(n) * d.C * d.H * d.W, d.C, d.H, d.W, d.kh,
           d.kw, stride, pad, d.Ho, d.Wo,
           cols.data() + static_cast<size_t>(n) * K * P);
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < d.N; ++n) {
    for (int o = 0; o < d.O; ++o) {
      gemm_row(w + static_cast<int64_t>(o) * K,
               cols.data() + static_cast<size_t>(n) * K * P,
               y + (static_cast<int64_t>(n) * d.O + o) * P, K, P);
    }
  }
}

void conv2d_backward(const float* x, const float* w, const float* gy,
                     float* gx, float* gw, const ConvDims& d, int stride,
                     int pad) {
  const int K = d.C * d.kh * d.kw;
  const int64_t P = static_cast<int64_t>(d.Ho) * d.Wo;
  std::vector<float> cols(static_cast<size_t>(d.N) * K * P);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < d.N; ++n)
    im2col(x + static_cast<int64_t>(n) * d.C * d.H * d.W, d.C, d.H, d.W, d.kh,
           d.kw, stride, pad, d.Ho, d.Wo,
           cols.data() + static_cast<size_t>(n) * K * P);

  if (gw) {
    // dW[o,k] = sum_n sum_p gy[n,o,p] * col[n,k,p]; one thread owns one o.
#pragma omp parallel for schedule(static)
    for (int o = 0; o < d.O; ++o) {
      for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int n = 0; n < d.N; ++n) {
          const float* gyr = gy + (static_cast<int64_t>(n) * d.O + o) * P;
          const float* cr =
              cols.data() + static_cast<size_t>(n) * K * P + static_cast<int64_t>(k) * P;
          for (int64_t p = 0; p < P; ++p)
            acc += static_cast<double>(gyr[p]) * static_cast<double>(cr[p]);
        }
        gw[static_cast<int64_t>(o) * K + k] += static_cast<float>(acc);
      }
    }
  }

  if (gx) {
    std::vector<float> dcol(static_cast<size_t>(d.N) * K * P);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.N; ++n) {
      for (int k = 0; k < K; ++k) {
        float* drow = dcol.data() + static_cast<size_t>(n) * K * P +
                      static_cast<int64_t>(k) * P;
        double acc;
        for (int64_t p = 0; p < P; ++p) {
          acc = 0.0;
          for (int o = 0; o < d.O; ++o)
            acc += static_cast<double>(w[static_cast<int64_t>(o) * K + k]) *
                   static_cast<double>(gy[(static_cast<int64_t>(n) * d.O + o) * P + p]);
          drow[p] = static_cast<float>(acc);
        }
      }
    }
    // col2im scatter-add; parallel over channels so writes never collide.
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < d.N; ++n) {
      for (int c = 0; c < d.C; ++c) {
        float* gxc = gx + (static_cast<int64_t>(n) * d.C + c) * d.H * d.W;
        const float* dc = dcol.data() + static_cast<size_t>(n) * K * P;
        for (int i = 0; i < d.kh; ++i) {
          for (int j = 0; j < d.kw; ++j) {
            const float* src =
                dc + ((static_cast<int64_t>(c) * d.kh + i) * d.kw + j) * P;
            for (int ho = 0; ho < d.Ho; ++ho) {
              const int hi = ho * stride - pad + i;
              if (hi < 0 || hi >= d.H) continue;
              for (int wo = 0; wo < d.Wo; ++wo) {
                const int wi = wo * stride - pad + j;
                if (wi < 0 || wi >= d.W) continue;
                gxc[static_cast<int64_t>(hi) * d.W + wi] +=
                    src[static_cast<int64_t>(ho) * d.Wo + wo];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int N, int F,
                    int O) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      double acc = static_cast<double>(b[o]);
      const T* xr = x + static_cast<int64_t>(n) * F;
      const T* wr = w + static_cast<int64_t>(o) * F;
      for (int f = 0; f < F; ++f)
        acc += static_cast<double>(xr[f]) * static_cast<double>(wr[f]);
      y[static_cast<int64_t>(n) * O + o] = static_cast<T>(acc);
    }
  }
}

template <typename T>
void softmax_rows(const T* x, T* y, int N, int K) {
  for (int n = 0; n < N; ++n) {
    const T* xr = x + static_cast<int64_t>(n) * K;
    T* yr = y + static_cast<int64_t>(n) * K;
    T m = xr[0];
    for (int k = 1; k < K; ++k) m = std::max(m, xr[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(xr[k] - m));
    for (int k = 0; k < K; ++k)
      yr[k] = static_cast<T>(std::exp(static_cast<double>(xr[k] - m)) / s);
  }
}

template <typename T>
double softplus_scalar(T x) {
  const double xd = static_cast<double>(x);
  if (xd > 30.0) return xd;
  if (xd < -30.0) return std::exp(xd);
  return std::log1p(std::exp(xd));
}

// Batch statistics with 64-bit accumulation. var is the biased estimate.
template <typename T>
void bn_batch_stats(const T* x, int N, int C, int HW, std::vector<double>& mean,
                    std::vector<double>& var) {
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  const int64_t M = static_cast<int64_t>(N) * HW;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* xr = x + (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) s += static_cast<double>(xr[i]);
    }
    const double m = s / static_cast<double>(M);
    double v = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* xr = x + (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) {
        const double dlt = static_cast<double>(xr[i]) - m;
        v += dlt * dlt;
      }
    }
    mean[c] = m;
    var[c] = v / static_cast<double>(M);
  }
}

template <typename T>
void bn_apply(const T* x, const T* gamma, const T* beta,
              const std::vector<double>& mean, const std::vector<double>& var,
              float eps, T* y, int N, int C, int HW) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const double inv = 1.0 / std::sqrt(var[c] + static_cast<double>(eps));
      const double g = static_cast<double>(gamma[c]);
      const double b = static_cast<double>(beta[c]);
      const double m = mean[c];
      const T* xr = x + (static_cast<int64_t>(n) * C + c) * HW;
      T* yr = y + (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i)
        yr[i] = static_cast<T>((static_cast<double>(xr[i]) - m) * inv * g + b);
    }
  }
}

int spatial_extent(const Shape& s) {
  // [N,C,H,W] -> H*W
  return s[2] * s[3];
}

}  // namespace

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<float> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return Tensor(make_node(Op::kAdd, a.shape(), std::move(v), {a.node(), b.node()}));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<float> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return Tensor(make_node(Op::kSub, a.shape(), std::move(v), {a.node(), b.node()}));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<float> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return Tensor(make_node(Op::kMul, a.shape(), std::move(v), {a.node(), b.node()}));
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<float> v(a.data().size());
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<float>(a.data()[i] * factor);
  return Tensor(make_node(Op::kScale, a.shape(), std::move(v), {a.node()},
                          ScaleAttrs{factor}));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || bias.shape().size() != 1 || bias.shape()[0] != xs[1])
    throw ShapeError("add_bias: expected [N,C,H,W] + [C], got " +
                     shape_str(xs) + " and " + shape_str(bias.shape()));
  const int N = xs[0], C = xs[1], HW = spatial_extent(xs);
  std::vector<float> v(x.data().size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float b = bias.data()[c];
      const int64_t base = (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) v[base + i] = x.data()[base + i] + b;
    }
  return Tensor(make_node(Op::kAddBias, xs, std::move(v), {x.node(), bias.node()}));
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d = conv_dims(x.shape(), w.shape(), stride, pad);
  std::vector<float> v(static_cast<size_t>(d.N) * d.O * d.Ho * d.Wo);
  conv2d_forward(x.data().data(), w.data().data(), v.data(), d, stride, pad);
  return Tensor(make_node(Op::kConv2d, {d.N, d.O, d.Ho, d.Wo}, std::move(v),
                          {x.node(), w.node()}, ConvAttrs{stride, pad}));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] ||
      b.shape() != Shape{ws[0]})
    throw ShapeError("linear: incompatible shapes x=" + shape_str(xs) +
                     " w=" + shape_str(ws) + " b=" + shape_str(b.shape()));
  const int N = xs[0], F = xs[1], O = ws[0];
  std::vector<float> v(static_cast<size_t>(N) * O);
  linear_forward(x.data().data(), w.data().data(), b.data().data(), v.data(),
                 N, F, O);
  return Tensor(make_node(Op::kLinear, {N, O}, std::move(v),
                          {x.node(), w.node(), b.node()}));
}

Tensor relu(const Tensor& x) {
  std::vector<float> v(x.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0f, x.data()[i]);
  return Tensor(make_node(Op::kRelu, x.shape(), std::move(v), {x.node()}));
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<float>& running_mean,
                    std::vector<float>& running_var, bool train,
                    float momentum, float eps) {
  const Shape& xs = x.shape();
  if (xs.size() != 4)
    throw ShapeError("batch_norm2d: expected [N,C,H,W], got " + shape_str(xs));
  const int N = xs[0], C = xs[1], HW = spatial_extent(xs);
  if (gamma.numel() != C || beta.numel() != C ||
      static_cast<int>(running_mean.size()) != C ||
      static_cast<int>(running_var.size()) != C)
    throw ShapeError("batch_norm2d: parameter size does not match channels " +
                     std::to_string(C));

  BnAttrs attrs;
  attrs.train = train;
  attrs.momentum = momentum;
  attrs.eps = eps;
  std::vector<double> mean(C), var(C);
  if (train) {
    bn_batch_stats(x.data().data(), N, C, HW, mean, var);
    const int64_t M = static_cast<int64_t>(N) * HW;
    const double unbias = M > 1 ? static_cast<double>(M) / (M - 1) : 1.0;
    for (int c = 0; c < C; ++c) {
      running_mean[c] = static_cast<float>((1.0 - momentum) * running_mean[c] +
                                           momentum * mean[c]);
      running_var[c] = static_cast<float>((1.0 - momentum) * running_var[c] +
                                          momentum * var[c] * unbias);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }
  attrs.mean.assign(C, 0.0f);
  attrs.var.assign(C, 0.0f);
  for (int c = 0; c < C; ++c) {
    attrs.mean[c] = static_cast<float>(mean[c]);
    attrs.var[c] = static_cast<float>(var[c]);
  }
  std::vector<float> v(x.data().size());
  bn_apply(x.data().data(), gamma.data().data(), beta.data().data(), mean, var,
           eps, v.data(), N, C, HW);
  return Tensor(make_node(Op::kBatchNorm2d, xs, std::move(v),
                          {x.node(), gamma.node(), beta.node()}, std::move(attrs)));
}

Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng) {
  if (p < 0.0f || p >= 1.0f)
    throw std::invalid_argument("dropout: p must be in [0,1)");
  DropoutAttrs attrs;
  attrs.keep = 1.0f - p;
  attrs.mask.resize(x.data().size());
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  for (auto& m : attrs.mask) m = uni(rng) < attrs.keep ? 1 : 0;
  std::vector<float> v(x.data().size());
  const float inv_keep = 1.0f / attrs.keep;
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = attrs.mask[i] ? x.data()[i] * inv_keep : 0.0f;
  return Tensor(make_node(Op::kDropout, x.shape(), std::move(v), {x.node()},
                          std::move(attrs)));
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4)
    throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + shape_str(xs));
  const int N = xs[0], C = xs[1], HW = spatial_extent(xs);
  std::vector<float> v(static_cast<size_t>(N) * C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      const float* xr = x.data().data() + (static_cast<int64_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) acc += xr[i];
      v[static_cast<int64_t>(n) * C + c] = static_cast<float>(acc / HW);
    }
  return Tensor(make_node(Op::kGlobalAvgPool, {N, C}, std::move(v), {x.node()}));
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  std::vector<float> v = x.data();
  return Tensor(make_node(Op::kReshape, std::move(new_shape), std::move(v),
                          {x.node()}));
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return Tensor(make_node(Op::kSum, {1}, {static_cast<float>(acc)}, {x.node()}));
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  acc /= static_cast<double>(x.numel());
  return Tensor(make_node(Op::kMean, {1}, {static_cast<float>(acc)}, {x.node()}));
}

Tensor select(const Tensor& x, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= x.numel())
    throw ShapeError("select: index " + std::to_string(flat_index) +
                     " out of range for " + shape_str(x.shape()));
  return Tensor(make_node(Op::kSelect, {1},
                          {x.data()[static_cast<size_t>(flat_index)]},
                          {x.node()}, SelectAttrs{flat_index}));
}

Tensor softmax(const Tensor& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 2)
    throw ShapeError("softmax: expected [N,K], got " + shape_str(xs));
  std::vector<float> v(x.data().size());
  softmax_rows(x.data().data(), v.data(), xs[0], xs[1]);
  return Tensor(make_node(Op::kSoftmax, xs, std::move(v), {x.node()}));
}

Tensor log_sum_exp(const Tensor& x) {
  const auto& d = x.data();
  if (d.empty()) throw ShapeError("log_sum_exp: empty tensor");
  float m = d[0];
  for (float v : d) m = std::max(m, v);
  double s = 0.0;
  for (float v : d) s += std::exp(static_cast<double>(v - m));
  const float out = static_cast<float>(m + std::log(s));
  return Tensor(make_node(Op::kLogSumExp, {1}, {out}, {x.node()}));
}

Tensor recip(const Tensor& x) {
  std::vector<float> v(x.data().size());
  for (size_t i = 0; i < v.size(); ++i) {
    if (std::abs(x.data()[i]) < 1e-30f)
      throw NumericError("recip: division by zero");
    v[i] = 1.0f / x.data()[i];
  }
  return Tensor(make_node(Op::kRecip, x.shape(), std::move(v), {x.node()}));
}

Tensor softplus(const Tensor& x) {
  std::vector<float> v(x.data().size());
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<float>(softplus_scalar(x.data()[i]));
  return Tensor(make_node(Op::kSoftplus, x.shape(), std::move(v), {x.node()}));
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    throw ShapeError("mul_scalar: scalar operand is " + shape_str(s.shape()));
  const float sv = s.data()[0];
  std::vector<float> v(x.data().size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = x.data()[i] * sv;
  return Tensor(make_node(Op::kMulScalar, x.shape(), std::move(v),
                          {x.node(), s.node()}));
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  const Shape& xs = logits.shape();
  if (xs.size() != 2)
    throw ShapeError("cross_entropy: expected [N,K] logits, got " + shape_str(xs));
  const int N = xs[0], K = xs[1];
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(N));
  for (int y : labels)
    if (y < 0 || y >= K)
      throw std::invalid_argument("cross_entropy: label out of range");
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* z = logits.data().data() + static_cast<int64_t>(n) * K;
    float m = z[0];
    for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(z[k] - m));
    total += (static_cast<double>(m) + std::log(s)) - static_cast<double>(z[labels[n]]);
  }
  return Tensor(make_node(Op::kCrossEntropy, {1},
                          {static_cast<float>(total / N)}, {logits.node()},
                          CeAttrs{labels}));
}

}  // namespace ops

namespace detail {

namespace {

// Lazily sized gradient accumulator for a parent that requires grad.
float* grad_buf(Node& p) {
  if (!p.requires_grad) return nullptr;
  if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0f);
  return p.grad.data();
}

}  // namespace

void backward_node(Node& n) {
  const std::vector<float>& g = n.grad;
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kAdd: {
      for (int side = 0; side < 2; ++side)
        if (float* gp = grad_buf(*n.parents[side]))
          for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      return;
    }
    case Op::kSub: {
      if (float* ga = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (float* gb = grad_buf(*n.parents[1]))
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      return;
    }
    case Op::kMul: {
      const auto& a = n.parents[0]->value;
      const auto& b = n.parents[1]->value;
      if (float* ga = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      if (float* gb = grad_buf(*n.parents[1]))
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      return;
    }
    case Op::kScale: {
      const double f = std::get<ScaleAttrs>(n.attrs).factor;
      if (float* gp = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i)
          gp[i] += static_cast<float>(g[i] * f);
      return;
    }
    case Op::kAddBias: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (float* gb = grad_buf(*n.parents[1])) {
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int n_i = 0; n_i < N; ++n_i) {
            const float* gr = g.data() + (static_cast<int64_t>(n_i) * C + c) * HW;
            for (int i = 0; i < HW; ++i) acc += gr[i];
          }
          gb[c] += static_cast<float>(acc);
        }
      }
      return;
    }
    case Op::kConv2d: {
      const auto& attrs = std::get<ConvAttrs>(n.attrs);
      ConvDims d = conv_dims(n.parents[0]->shape, n.parents[1]->shape,
                             attrs.stride, attrs.pad);
      float* gx = grad_buf(*n.parents[0]);
      float* gw = grad_buf(*n.parents[1]);
      conv2d_backward(n.parents[0]->value.data(), n.parents[1]->value.data(),
                      g.data(), gx, gw, d, attrs.stride, attrs.pad);
      return;
    }
    case Op::kLinear: {
      const Shape& xs = n.parents[0]->shape;
      const Shape& ws = n.parents[1]->shape;
      const int N = xs[0], F = xs[1], O = ws[0];
      const auto& x = n.parents[0]->value;
      const auto& w = n.parents[1]->value;
      if (float* gx = grad_buf(*n.parents[0])) {
        for (int n_i = 0; n_i < N; ++n_i)
          for (int f = 0; f < F; ++f) {
            double acc = 0.0;
            for (int o = 0; o < O; ++o)
              acc += static_cast<double>(g[static_cast<int64_t>(n_i) * O + o]) *
                     static_cast<double>(w[static_cast<int64_t>(o) * F + f]);
            gx[static_cast<int64_t>(n_i) * F + f] += static_cast<float>(acc);
          }
      }
      if (float* gw = grad_buf(*n.parents[1])) {
        for (int o = 0; o < O; ++o)
          for (int f = 0; f < F; ++f) {
            double acc = 0.0;
            for (int n_i = 0; n_i < N; ++n_i)
              acc += static_cast<double>(g[static_cast<int64_t>(n_i) * O + o]) *
                     static_cast<double>(x[static_cast<int64_t>(n_i) * F + f]);
            gw[static_cast<int64_t>(o) * F + f] += static_cast<float>(acc);
          }
      }
      if (float* gb = grad_buf(*n.parents[2])) {
        for (int o = 0; o < O; ++o) {
          double acc = 0.0;
          for (int n_i = 0; n_i < N; ++n_i)
            acc += g[static_cast<int64_t>(n_i) * O + o];
          gb[o] += static_cast<float>(acc);
        }
      }
      return;
    }
    case Op::kRelu: {
      const auto& x = n.parents[0]->value;
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0f) gx[i] += g[i];
      return;
    }
    case Op::kBatchNorm2d: {
      const auto& attrs = std::get<BnAttrs>(n.attrs);
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      const int64_t M = static_cast<int64_t>(N) * HW;
      const auto& x = n.parents[0]->value;
      const auto& gamma = n.parents[1]->value;
      float* gx = grad_buf(*n.parents[0]);
      float* gg = grad_buf(*n.parents[1]);
      float* gb = grad_buf(*n.parents[2]);
#pragma omp parallel for schedule(static)
      for (int c = 0; c < C; ++c) {
        const double m = attrs.mean[c];
        const double inv =
            1.0 / std::sqrt(static_cast<double>(attrs.var[c]) + attrs.eps);
        double sum_g = 0.0, sum_gxh = 0.0;
        for (int n_i = 0; n_i < N; ++n_i) {
          const int64_t base = (static_cast<int64_t>(n_i) * C + c) * HW;
          for (int i = 0; i < HW; ++i) {
            const double gi = g[base + i];
            const double xh = (static_cast<double>(x[base + i]) - m) * inv;
            sum_g += gi;
            sum_gxh += gi * xh;
          }
        }
        if (gg) gg[c] += static_cast<float>(sum_gxh);
        if (gb) gb[c] += static_cast<float>(sum_g);
        if (gx) {
          const double gam = gamma[c];
          if (attrs.train) {
            const double mg = sum_g / static_cast<double>(M);
            const double mgxh = sum_gxh / static_cast<double>(M);
            for (int n_i = 0; n_i < N; ++n_i) {
              const int64_t base = (static_cast<int64_t>(n_i) * C + c) * HW;
              for (int i = 0; i < HW; ++i) {
                const double xh = (static_cast<double>(x[base + i]) - m) * inv;
                gx[base + i] += static_cast<float>(
                    gam * inv * (static_cast<double>(g[base + i]) - mg - xh * mgxh));
              }
            }
          } else {
            for (int n_i = 0; n_i < N; ++n_i) {
              const int64_t base = (static_cast<int64_t>(n_i) * C + c) * HW;
              for (int i = 0; i < HW; ++i)
                gx[base + i] += static_cast<float>(gam * inv * g[base + i]);
            }
          }
        }
      }
      return;
    }
    case Op::kDropout: {
      const auto& attrs = std::get<DropoutAttrs>(n.attrs);
      const float inv_keep = 1.0f / attrs.keep;
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i)
          if (attrs.mask[i]) gx[i] += g[i] * inv_keep;
      return;
    }
    case Op::kGlobalAvgPool: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      if (float* gx = grad_buf(*n.parents[0])) {
        const float inv = 1.0f / static_cast<float>(HW);
        for (int n_i = 0; n_i < N; ++n_i)
          for (int c = 0; c < C; ++c) {
            const float gv = g[static_cast<int64_t>(n_i) * C + c] * inv;
            float* gxr = gx + (static_cast<int64_t>(n_i) * C + c) * HW;
            for (int i = 0; i < HW; ++i) gxr[i] += gv;
          }
      }
      return;
    }
    case Op::kReshape: {
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      return;
    }
    case Op::kSum: {
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < n.parents[0]->value.size(); ++i) gx[i] += g[0];
      return;
    }
    case Op::kMean: {
      if (float* gx = grad_buf(*n.parents[0])) {
        const float gv = g[0] / static_cast<float>(n.parents[0]->value.size());
        for (size_t i = 0; i < n.parents[0]->value.size(); ++i) gx[i] += gv;
      }
      return;
    }
    case Op::kSelect: {
      const auto idx = std::get<SelectAttrs>(n.attrs).index;
      if (float* gx = grad_buf(*n.parents[0]))
        gx[static_cast<size_t>(idx)] += g[0];
      return;
    }
    case Op::kSoftmax: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], K = xs[1];
      const auto& p = n.value;
      if (float* gx = grad_buf(*n.parents[0])) {
        for (int n_i = 0; n_i < N; ++n_i) {
          const float* pr = p.data() + static_cast<int64_t>(n_i) * K;
          const float* gr = g.data() + static_cast<int64_t>(n_i) * K;
          double dot = 0.0;
          for (int k = 0; k < K; ++k)
            dot += static_cast<double>(gr[k]) * static_cast<double>(pr[k]);
          for (int k = 0; k < K; ++k)
            gx[static_cast<int64_t>(n_i) * K + k] +=
                static_cast<float>(pr[k] * (gr[k] - dot));
        }
      }
      return;
    }
    case Op::kLogSumExp: {
      const auto& x = n.parents[0]->value;
      const float out = n.value[0];
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < x.size(); ++i)
          gx[i] += g[0] * std::exp(x[i] - out);
      return;
    }
    case Op::kRecip: {
      const auto& y = n.value;
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * y[i] * y[i];
      return;
    }
    case Op::kSoftplus: {
      const auto& x = n.parents[0]->value;
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) {
          const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
          gx[i] += static_cast<float>(g[i] * sig);
        }
      return;
    }
    case Op::kMulScalar: {
      const auto& x = n.parents[0]->value;
      const float s = n.parents[1]->value[0];
      if (float* gx = grad_buf(*n.parents[0]))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
      if (float* gs = grad_buf(*n.parents[1])) {
        double acc = 0.0;
        for (size_t i = 0; i < g.size(); ++i)
          acc += static_cast<double>(g[i]) * static_cast<double>(x[i]);
        gs[0] += static_cast<float>(acc);
      }
      return;
    }
    case Op::kCrossEntropy: {
      const auto& labels = std::get<CeAttrs>(n.attrs).labels;
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], K = xs[1];
      const auto& z = n.parents[0]->value;
      if (float* gx = grad_buf(*n.parents[0])) {
        const double gscale = static_cast<double>(g[0]) / N;
        for (int n_i = 0; n_i < N; ++n_i) {
          const float* zr = z.data() + static_cast<int64_t>(n_i) * K;
          float m = zr[0];
          for (int k = 1; k < K; ++k) m = std::max(m, zr[k]);
          double s = 0.0;
          for (int k = 0; k < K; ++k)
            s += std::exp(static_cast<double>(zr[k] - m));
          for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(zr[k] - m)) / s;
            const double onehot = (k == labels[n_i]) ? 1.0 : 0.0;
            gx[static_cast<int64_t>(n_i) * K + k] +=
                static_cast<float>((p - onehot) * gscale);
          }
        }
      }
      return;
    }
  }
}

std::vector<double> eval_node_fp64(
    const Node& n, const std::vector<const std::vector<double>*>& pv) {
  switch (n.op) {
    case Op::kLeaf:
      return std::vector<double>(n.value.begin(), n.value.end());
    case Op::kAdd: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = (*pv[0])[i] + (*pv[1])[i];
      return v;
    }
    case Op::kSub: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = (*pv[0])[i] - (*pv[1])[i];
      return v;
    }
    case Op::kMul: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = (*pv[0])[i] * (*pv[1])[i];
      return v;
    }
    case Op::kScale: {
      const double f = std::get<ScaleAttrs>(n.attrs).factor;
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = (*pv[0])[i] * f;
      return v;
    }
    case Op::kAddBias: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      std::vector<double> v(pv[0]->size());
      for (int n_i = 0; n_i < N; ++n_i)
        for (int c = 0; c < C; ++c) {
          const int64_t base = (static_cast<int64_t>(n_i) * C + c) * HW;
          for (int i = 0; i < HW; ++i)
            v[base + i] = (*pv[0])[base + i] + (*pv[1])[c];
        }
      return v;
    }
    case Op::kConv2d: {
      const auto& attrs = std::get<ConvAttrs>(n.attrs);
      ConvDims d = conv_dims(n.parents[0]->shape, n.parents[1]->shape,
                             attrs.stride, attrs.pad);
      std::vector<double> v(static_cast<size_t>(d.N) * d.O * d.Ho * d.Wo);
      conv2d_forward(pv[0]->data(), pv[1]->data(), v.data(), d, attrs.stride,
                     attrs.pad);
      return v;
    }
    case Op::kLinear: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], F = xs[1], O = n.parents[1]->shape[0];
      std::vector<double> v(static_cast<size_t>(N) * O);
      linear_forward(pv[0]->data(), pv[1]->data(), pv[2]->data(), v.data(), N,
                     F, O);
      return v;
    }
    case Op::kRelu: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = std::max(0.0, (*pv[0])[i]);
      return v;
    }
    case Op::kBatchNorm2d: {
      const auto& attrs = std::get<BnAttrs>(n.attrs);
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      std::vector<double> mean(C), var(C);
      if (attrs.train) {
        bn_batch_stats(pv[0]->data(), N, C, HW, mean, var);
      } else {
        for (int c = 0; c < C; ++c) {
          mean[c] = attrs.mean[c];
          var[c] = attrs.var[c];
        }
      }
      std::vector<double> v(pv[0]->size());
      bn_apply(pv[0]->data(), pv[1]->data(), pv[2]->data(), mean, var,
               attrs.eps, v.data(), N, C, HW);
      return v;
    }
    case Op::kDropout: {
      const auto& attrs = std::get<DropoutAttrs>(n.attrs);
      const double inv_keep = 1.0 / attrs.keep;
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i)
        v[i] = attrs.mask[i] ? (*pv[0])[i] * inv_keep : 0.0;
      return v;
    }
    case Op::kGlobalAvgPool: {
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
      std::vector<double> v(static_cast<size_t>(N) * C);
      for (int n_i = 0; n_i < N; ++n_i)
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          const double* xr = pv[0]->data() + (static_cast<int64_t>(n_i) * C + c) * HW;
          for (int i = 0; i < HW; ++i) acc += xr[i];
          v[static_cast<int64_t>(n_i) * C + c] = acc / HW;
        }
      return v;
    }
    case Op::kReshape:
      return *pv[0];
    case Op::kSum: {
      double acc = 0.0;
      for (double x : *pv[0]) acc += x;
      return {acc};
    }
    case Op::kMean: {
      double acc = 0.0;
      for (double x : *pv[0]) acc += x;
      return {acc / static_cast<double>(pv[0]->size())};
    }
    case Op::kSelect: {
      const auto idx = std::get<SelectAttrs>(n.attrs).index;
      return {(*pv[0])[static_cast<size_t>(idx)]};
    }
    case Op::kSoftmax: {
      const Shape& xs = n.parents[0]->shape;
      std::vector<double> v(pv[0]->size());
      softmax_rows(pv[0]->data(), v.data(), xs[0], xs[1]);
      return v;
    }
    case Op::kLogSumExp: {
      double m = (*pv[0])[0];
      for (double x : *pv[0]) m = std::max(m, x);
      double s = 0.0;
      for (double x : *pv[0]) s += std::exp(x - m);
      return {m + std::log(s)};
    }
    case Op::kRecip: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (*pv[0])[i];
      return v;
    }
    case Op::kSoftplus: {
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i)
        v[i] = softplus_scalar((*pv[0])[i]);
      return v;
    }
    case Op::kMulScalar: {
      const double s = (*pv[1])[0];
      std::vector<double> v(pv[0]->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = (*pv[0])[i] * s;
      return v;
    }
    case Op::kCrossEntropy: {
      const auto& labels = std::get<CeAttrs>(n.attrs).labels;
      const Shape& xs = n.parents[0]->shape;
      const int N = xs[0], K = xs[1];
      double total = 0.0;
      for (int n_i = 0; n_i < N; ++n_i) {
        const double* z = pv[0]->data() + static_cast<int64_t>(n_i) * K;
        double m = z[0];
        for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(z[k] - m);
        total += (m + std::log(s)) - z[labels[n_i]];
      }
      return {total / N};
    }
  }
  throw std::logic_error("eval_node_fp64: unhandled op");
}

}  // namespace detail
}  // namespace prunecam
