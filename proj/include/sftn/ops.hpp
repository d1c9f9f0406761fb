// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>

#include "sftn/kernels.hpp"
#include "sftn/tensor.hpp"

// Differentiable primitives. Forward results are recorded in the graph only
// when an input requires grad; backward rules accumulate additively so a
// tensor feeding k consumers receives the sum of k single-use gradients.

namespace sftn::ops {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <class T>
std::vector<T> scratch_mul(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> out(a.size());
  kern::mul(out.data(), a.data(), b.data(), int64_t(a.size()));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  kern::add(out.data(), a.data().data(), b.data().data(), a.size());
  auto an = a.node(), bn = b.node();
  return sftn::detail::make_result<T>(
      a.shape(), std::move(out), "add", {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          kern::add(an->grad.data(), an->grad.data(), n.grad.data(), int64_t(n.grad.size()));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          kern::add(bn->grad.data(), bn->grad.data(), n.grad.data(), int64_t(n.grad.size()));
        }
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  kern::sub(out.data(), a.data().data(), b.data().data(), a.size());
  auto an = a.node(), bn = b.node();
  return sftn::detail::make_result<T>(
      a.shape(), std::move(out), "sub", {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          kern::add(an->grad.data(), an->grad.data(), n.grad.data(), int64_t(n.grad.size()));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          kern::axpy(bn->grad.data(), T(-1), n.grad.data(), int64_t(n.grad.size()));
        }
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  kern::mul(out.data(), a.data().data(), b.data().data(), a.size());
  auto an = a.node(), bn = b.node();
  return sftn::detail::make_result<T>(
      a.shape(), std::move(out), "mul", {an, bn}, [an, bn](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();
          auto t = detail::scratch_mul(n.grad, bn->value);
          kern::add(an->grad.data(), an->grad.data(), t.data(), int64_t(t.size()));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          auto t = detail::scratch_mul(n.grad, an->value);
          kern::add(bn->grad.data(), bn->grad.data(), t.data(), int64_t(t.size()));
        }
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  kern::scale(out.data(), a.data().data(), c, a.size());
  auto an = a.node();
  return sftn::detail::make_result<T>(
      a.shape(), std::move(out), "scale", {an}, [an, c](Node<T>& n) {
        an->ensure_grad();
        kern::axpy(an->grad.data(), c, n.grad.data(), int64_t(n.grad.size()));
      });
}

// x[N,K] + bias[K], broadcast over rows
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(x.ndim() == 2 && bias.ndim() == 1 && x.dim(1) == bias.dim(0),
                  "add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                      shape_str(bias.shape()));
  const int N = x.dim(0), K = x.dim(1);
  std::vector<T> out(x.size());
  for (int i = 0; i < N; ++i)
    kern::add(out.data() + int64_t(i) * K, x.data().data() + int64_t(i) * K,
              bias.data().data(), K);
  auto xn = x.node(), bn = bias.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "add_bias", {xn, bn}, [xn, bn, N, K](Node<T>& n) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          kern::add(xn->grad.data(), xn->grad.data(), n.grad.data(), int64_t(n.grad.size()));
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < N; ++i)
            kern::add(bn->grad.data(), bn->grad.data(), n.grad.data() + int64_t(i) * K, K);
        }
      });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(int64_t(M) * N);
  kern::gemm_nn(M, N, K, a.data().data(), K, b.data().data(), N, out.data(), N, false);
  auto an = a.node(), bn = b.node();
  return sftn::detail::make_result<T>(
      {M, N}, std::move(out), "matmul", {an, bn}, [an, bn, M, K, N](Node<T>& n) {
        if (an->requires_grad) {
          an->ensure_grad();  // dA += G * B^T
          kern::gemm_nt(M, K, N, n.grad.data(), N, bn->value.data(), N, an->grad.data(), K, true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();  // dB += A^T * G
          kern::gemm_tn(K, N, M, an->value.data(), K, n.grad.data(), N, bn->grad.data(), N, true);
        }
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.ndim() == 2, "transpose: expected 2-d tensor, got " + shape_str(a.shape()));
  const int M = a.dim(0), N = a.dim(1);
  std::vector<T> out(a.size());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[int64_t(j) * M + i] = a.data()[int64_t(i) * N + j];
  auto an = a.node();
  return sftn::detail::make_result<T>(
      {N, M}, std::move(out), "transpose", {an}, [an, M, N](Node<T>& n) {
        an->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j)
            an->grad[int64_t(i) * N + j] += n.grad[int64_t(j) * M + i];
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and pointwise transcendentals
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  kern::relu(out.data(), x.data().data(), x.size());
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "relu", {xn}, [xn](Node<T>& n) {
        xn->ensure_grad();
        kern::relu_bwd_acc(xn->grad.data(), xn->value.data(), n.grad.data(),
                           int64_t(n.grad.size()));
      });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::log(x.data()[i]);
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "log", {xn}, [xn](Node<T>& n) {
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i] / xn->value[i];
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::exp(x.data()[i]);
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "exp", {xn}, [xn](Node<T>& n) {
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i] * n.value[i];
      });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  const T s = kern::sum(x.data().data(), x.size());
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      {1}, {s}, "sum", {xn}, [xn](Node<T>& n) {
        xn->ensure_grad();
        const T g = n.grad[0];
        for (auto& v : xn->grad) v += g;
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::require(x.size() > 0, "mean: empty tensor");
  const T s = kern::sum(x.data().data(), x.size()) / T(x.size());
  auto xn = x.node();
  const T inv = T(1) / T(x.size());
  return sftn::detail::make_result<T>(
      {1}, {s}, "mean", {xn}, [xn, inv](Node<T>& n) {
        xn->ensure_grad();
        const T g = n.grad[0] * inv;
        for (auto& v : xn->grad) v += g;
      });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.size(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out = x.data();
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      std::move(shape), std::move(out), "reshape", {xn}, [xn](Node<T>& n) {
        xn->ensure_grad();
        kern::add(xn->grad.data(), xn->grad.data(), n.grad.data(), int64_t(n.grad.size()));
      });
}

// ---------------------------------------------------------------------------
// Row-wise softmax machinery (max-subtracted, log-space)
// ---------------------------------------------------------------------------

// log_softmax over the last axis of a [N,K] tensor.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  detail::require(x.ndim() == 2, "log_softmax: expected [N,K], got " + shape_str(x.shape()));
  const int N = x.dim(0), K = x.dim(1);
  std::vector<T> out(x.size());
  for (int i = 0; i < N; ++i) {
    const T* row = x.data().data() + int64_t(i) * K;
    T* o = out.data() + int64_t(i) * K;
    T mx = row[0];
    for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    T se = T(0);
    for (int j = 0; j < K; ++j) se += std::exp(row[j] - mx);
    const T lse = mx + std::log(se);
    for (int j = 0; j < K; ++j) o[j] = row[j] - lse;
  }
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "log_softmax", {xn}, [xn, N, K](Node<T>& n) {
        xn->ensure_grad();
        // dx = g - softmax(x) * rowsum(g)
        for (int i = 0; i < N; ++i) {
          const T* g = n.grad.data() + int64_t(i) * K;
          const T* lp = n.value.data() + int64_t(i) * K;
          T* dx = xn->grad.data() + int64_t(i) * K;
          T gs = T(0);
          for (int j = 0; j < K; ++j) gs += g[j];
          for (int j = 0; j < K; ++j) dx[j] += g[j] - std::exp(lp[j]) * gs;
        }
      });
}

// Mean negative log-likelihood of integer labels under [N,K] log-probs.
template <class T>
Tensor<T> nll_loss(const Tensor<T>& logp, const std::vector<int>& labels) {
  detail::require(logp.ndim() == 2, "nll_loss: expected [N,K], got " + shape_str(logp.shape()));
  const int N = logp.dim(0), K = logp.dim(1);
  detail::require(int(labels.size()) == N, "nll_loss: label count " +
                      std::to_string(labels.size()) + " != batch " + std::to_string(N));
  detail::require(N > 0, "nll_loss: empty batch");
  T s = T(0);
  for (int i = 0; i < N; ++i) {
    detail::require(labels[i] >= 0 && labels[i] < K,
                    "nll_loss: label " + std::to_string(labels[i]) + " out of range [0," +
                        std::to_string(K) + ")");
    s -= logp.data()[int64_t(i) * K + labels[i]];
  }
  s /= T(N);
  auto pn = logp.node();
  auto lbl = labels;
  return sftn::detail::make_result<T>(
      {1}, {s}, "nll_loss", {pn}, [pn, lbl, N, K](Node<T>& n) {
        pn->ensure_grad();
        const T g = n.grad[0] / T(N);
        for (int i = 0; i < N; ++i) pn->grad[int64_t(i) * K + lbl[i]] -= g;
      });
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + gemm in all six forward/backward paths)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int pad, int groups = 1) {
  detail::require(x.ndim() == 4 && w.ndim() == 4,
                  "conv2d: expected 4-d input/weight, got " + shape_str(x.shape()) + " and " +
                      shape_str(w.shape()));
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), Cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require(groups >= 1 && Ci % groups == 0 && Co % groups == 0 && Cig == Ci / groups,
                  "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                      shape_str(w.shape()) + " at groups=" + std::to_string(groups));
  detail::require(bias.ndim() == 1 && bias.dim(0) == Co,
                  "conv2d: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                      shape_str(w.shape()));
  const int Ho = kern::conv_out_extent(H, kh, stride, pad);
  const int Wo = kern::conv_out_extent(W, kw, stride, pad);
  detail::require(Ho > 0 && Wo > 0, "conv2d: kernel " + shape_str(w.shape()) +
                      " does not fit input " + shape_str(x.shape()));
  const int Cog = Co / groups;
  const int K = Cig * kh * kw;
  const int64_t plane = int64_t(Ho) * Wo;

  std::vector<T> out(int64_t(N) * Co * plane);
  parallel_for(N, [&](int64_t lo, int64_t hi) {
    std::vector<T> col(int64_t(K) * plane);
    for (int64_t n = lo; n < hi; ++n) {
      for (int g = 0; g < groups; ++g) {
        const T* xg = x.data().data() + ((n * Ci) + int64_t(g) * Cig) * H * W;
        kern::im2col(xg, Cig, H, W, kh, kw, stride, pad, col.data());
        T* og = out.data() + ((n * Co) + int64_t(g) * Cog) * plane;
        kern::gemm_nn(Cog, int(plane), K, w.data().data() + int64_t(g) * Cog * K, K,
                      col.data(), int(plane), og, int(plane), false);
      }
      for (int c = 0; c < Co; ++c) {
        T* oc = out.data() + (n * Co + c) * plane;
        const T b = bias.data()[c];
        for (int64_t i = 0; i < plane; ++i) oc[i] += b;
      }
    }
  });

  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return sftn::detail::make_result<T>(
      {N, Co, Ho, Wo}, std::move(out), "conv2d", {xn, wn, bn},
      [xn, wn, bn, N, Ci, H, W, Co, Cig, Cog, kh, kw, stride, pad, groups, K,
       plane](Node<T>& n) {
        std::vector<T> col(int64_t(K) * plane);
        std::vector<T> dcol(int64_t(K) * plane);
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int64_t s = 0; s < N; ++s) {
          for (int g = 0; g < groups; ++g) {
            const T* gout = n.grad.data() + ((s * Co) + int64_t(g) * Cog) * plane;
            if (wn->requires_grad) {  // dW_g += G_g * col^T
              const T* xg = xn->value.data() + ((s * Ci) + int64_t(g) * Cig) * H * W;
              kern::im2col(xg, Cig, H, W, kh, kw, stride, pad, col.data());
              kern::gemm_nt(Cog, K, int(plane), gout, int(plane), col.data(), int(plane),
                            wn->grad.data() + int64_t(g) * Cog * K, K, true);
            }
            if (xn->requires_grad) {  // dcol = W_g^T * G_g, then scatter
              kern::gemm_tn(K, int(plane), Cog, wn->value.data() + int64_t(g) * Cog * K, K,
                            gout, int(plane), dcol.data(), int(plane), false);
              T* dxg = xn->grad.data() + ((s * Ci) + int64_t(g) * Cig) * H * W;
              kern::col2im_acc(dcol.data(), Cig, H, W, kh, kw, stride, pad, dxg);
            }
          }
          if (bn->requires_grad) {
            for (int c = 0; c < Co; ++c) {
              const T* gc = n.grad.data() + (s * Co + c) * plane;
              bn->grad[c] += kern::sum(gc, plane);
            }
          }
        }
      });
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           int stride, int pad) {
  detail::require(x.ndim() == 4 && w.ndim() == 4,
                  "conv_transpose2d: expected 4-d input/weight, got " + shape_str(x.shape()) +
                      " and " + shape_str(w.shape()));
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Wci = w.dim(0), Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  detail::require(Wci == Ci, "conv_transpose2d: input " + shape_str(x.shape()) +
                      " incompatible with weight " + shape_str(w.shape()));
  detail::require(bias.ndim() == 1 && bias.dim(0) == Co,
                  "conv_transpose2d: bias " + shape_str(bias.shape()) +
                      " incompatible with weight " + shape_str(w.shape()));
  const int Ho = (H - 1) * stride - 2 * pad + kh;
  const int Wo = (W - 1) * stride - 2 * pad + kw;
  detail::require(Ho > 0 && Wo > 0, "conv_transpose2d: degenerate output for input " +
                      shape_str(x.shape()));
  const int K = Co * kh * kw;  // rows of the scattered col matrix
  const int64_t in_plane = int64_t(H) * W;
  const int64_t out_plane = int64_t(Ho) * Wo;

  std::vector<T> out(int64_t(N) * Co * out_plane, T(0));
  parallel_for(N, [&](int64_t lo, int64_t hi) {
    std::vector<T> colt(int64_t(K) * in_plane);
    for (int64_t n = lo; n < hi; ++n) {
      const T* xs = x.data().data() + n * Ci * in_plane;
      // colt = W^T [K,Ci] * x [Ci,HW]
      kern::gemm_tn(K, int(in_plane), Ci, w.data().data(), K, xs, int(in_plane),
                    colt.data(), int(in_plane), false);
      T* os = out.data() + n * Co * out_plane;
      kern::col2im_acc(colt.data(), Co, Ho, Wo, kh, kw, stride, pad, os);
      for (int c = 0; c < Co; ++c) {
        T* oc = os + int64_t(c) * out_plane;
        const T b = bias.data()[c];
        for (int64_t i = 0; i < out_plane; ++i) oc[i] += b;
      }
    }
  });

  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return sftn::detail::make_result<T>(
      {N, Co, Ho, Wo}, std::move(out), "conv_transpose2d", {xn, wn, bn},
      [xn, wn, bn, N, Ci, Co, Ho, Wo, kh, kw, stride, pad, K, in_plane,
       out_plane](Node<T>& n) {
        std::vector<T> colg(int64_t(K) * in_plane);
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int64_t s = 0; s < N; ++s) {
          const T* gs = n.grad.data() + s * Co * out_plane;
          kern::im2col(gs, Co, Ho, Wo, kh, kw, stride, pad, colg.data());
          if (xn->requires_grad) {  // dx += W [Ci,K] * colg [K,HW]
            kern::gemm_nn(Ci, int(in_plane), K, wn->value.data(), K, colg.data(),
                          int(in_plane), xn->grad.data() + s * Ci * in_plane, int(in_plane),
                          true);
          }
          if (wn->requires_grad) {  // dW += x [Ci,HW] * colg^T [HW,K]
            kern::gemm_nt(Ci, K, int(in_plane), xn->value.data() + s * Ci * in_plane,
                          int(in_plane), colg.data(), int(in_plane), wn->grad.data(), K, true);
          }
          if (bn->requires_grad) {
            for (int c = 0; c < Co; ++c)
              bn->grad[c] += kern::sum(gs + int64_t(c) * out_plane, out_plane);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Ties go to the first element in row-major window scan order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride) {
  detail::require(x.ndim() == 4, "maxpool2d: expected 4-d input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  detail::require(Ho > 0 && Wo > 0,
                  "maxpool2d: window " + std::to_string(k) + " does not fit input " +
                      shape_str(x.shape()));
  std::vector<T> out(int64_t(N) * C * Ho * Wo);
  auto arg = std::make_shared<std::vector<int64_t>>(out.size());
  const int64_t planes = int64_t(N) * C;
  parallel_for(planes, [&](int64_t lo, int64_t hi) {
    for (int64_t p = lo; p < hi; ++p) {
      const T* in = x.data().data() + p * H * W;
      T* o = out.data() + p * Ho * Wo;
      int64_t* am = arg->data() + p * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          int64_t best_idx = int64_t(oh * stride) * W + ow * stride;
          T best = in[best_idx];
          for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
              const int64_t idx = int64_t(oh * stride + ki) * W + ow * stride + kj;
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          }
          o[int64_t(oh) * Wo + ow] = best;
          am[int64_t(oh) * Wo + ow] = p * H * W + best_idx;
        }
      }
    }
  });
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      {N, C, Ho, Wo}, std::move(out), "maxpool2d", {xn}, [xn, arg](Node<T>& n) {
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[(*arg)[i]] += n.grad[i];
      });
}

// [N,C,H,W] -> [N,C] spatial mean
template <class T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  detail::require(x.ndim() == 4,
                  "global_avgpool: expected 4-d input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const int64_t plane = int64_t(x.dim(2)) * x.dim(3);
  std::vector<T> out(int64_t(N) * C);
  const T inv = T(1) / T(plane);
  for (int64_t p = 0; p < int64_t(N) * C; ++p)
    out[p] = kern::sum(x.data().data() + p * plane, plane) * inv;
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      {N, C}, std::move(out), "global_avgpool", {xn}, [xn, plane, inv](Node<T>& n) {
        xn->ensure_grad();
        for (size_t p = 0; p < n.grad.size(); ++p) {
          const T g = n.grad[p] * inv;
          T* dst = xn->grad.data() + int64_t(p) * plane;
          for (int64_t i = 0; i < plane; ++i) dst[i] += g;
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization (2-d, per channel)
// ---------------------------------------------------------------------------

template <class T>
struct BnBuffers {
  std::vector<T> running_mean, running_var;  // var stored unbiased
  void init(int channels) {
    running_mean.assign(channels, T(0));
    running_var.assign(channels, T(1));
  }
};

// Training mode uses batch statistics over N*H*W per channel and updates the
// running buffers; eval mode (and the batch-size-1 degenerate case) uses the
// running statistics and treats them as constants in backward.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BnBuffers<T>& buf, bool training, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  detail::require(x.ndim() == 4, "batchnorm2d: expected 4-d input, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
                  "batchnorm2d: affine shapes " + shape_str(gamma.shape()) + "/" +
                      shape_str(beta.shape()) + " incompatible with input " +
                      shape_str(x.shape()));
  detail::require(int(buf.running_mean.size()) == C, "batchnorm2d: running buffers not sized");
  const int64_t plane = int64_t(H) * W;
  const int64_t ns = int64_t(N) * plane;
  const bool batch_stats = training && N > 1;

  std::vector<T> mean(C), invstd(C);
  if (batch_stats) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (int n = 0; n < N; ++n)
        m += kern::sum(x.data().data() + (int64_t(n) * C + c) * plane, plane);
      m /= T(ns);
      T v = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data().data() + (int64_t(n) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const T d = p[i] - m;
          v += d * d;
        }
      }
      v /= T(ns);
      mean[c] = m;
      invstd[c] = T(1) / std::sqrt(v + eps);
      buf.running_mean[c] = (T(1) - momentum) * buf.running_mean[c] + momentum * m;
      const T vu = ns > 1 ? v * T(ns) / T(ns - 1) : v;
      buf.running_var[c] = (T(1) - momentum) * buf.running_var[c] + momentum * vu;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = buf.running_mean[c];
      invstd[c] = T(1) / std::sqrt(buf.running_var[c] + eps);
    }
  }

  std::vector<T> out(x.size());
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* p = x.data().data() + (int64_t(n) * C + c) * plane;
      T* o = out.data() + (int64_t(n) * C + c) * plane;
      T* xh = xhat->data() + (int64_t(n) * C + c) * plane;
      const T m = mean[c], is = invstd[c];
      const T g = gamma.data()[c], b = beta.data()[c];
      for (int64_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - m) * is;
        o[i] = g * xh[i] + b;
      }
    }
  }

  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  auto is_sh = std::make_shared<std::vector<T>>(std::move(invstd));
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "batchnorm2d", {xn, gn, bn},
      [xn, gn, bn, xhat, is_sh, N, C, plane, ns, batch_stats](Node<T>& n) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int c = 0; c < C; ++c) {
          // channel-wise reductions of g and g*xhat
          T gsum = T(0), gxsum = T(0);
          for (int s = 0; s < N; ++s) {
            const T* g = n.grad.data() + (int64_t(s) * C + c) * plane;
            const T* xh = xhat->data() + (int64_t(s) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              gsum += g[i];
              gxsum += g[i] * xh[i];
            }
          }
          if (gn->requires_grad) gn->grad[c] += gxsum;
          if (bn->requires_grad) bn->grad[c] += gsum;
          if (xn->requires_grad) {
            const T gam = gn->value[c];
            const T is = (*is_sh)[c];
            if (batch_stats) {
              const T k1 = gam * is;
              const T m_g = gsum / T(ns), m_gx = gxsum / T(ns);
              for (int s = 0; s < N; ++s) {
                const T* g = n.grad.data() + (int64_t(s) * C + c) * plane;
                const T* xh = xhat->data() + (int64_t(s) * C + c) * plane;
                T* dx = xn->grad.data() + (int64_t(s) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i)
                  dx[i] += k1 * (g[i] - m_g - xh[i] * m_gx);
              }
            } else {
              const T k1 = gam * is;
              for (int s = 0; s < N; ++s) {
                const T* g = n.grad.data() + (int64_t(s) * C + c) * plane;
                T* dx = xn->grad.data() + (int64_t(s) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) dx[i] += k1 * g[i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Row normalization (similarity-preserving distillation)
// ---------------------------------------------------------------------------

// y_i = x_i / ||x_i||_2 per row of [N,M]; rows of norm < tiny pass through a
// guarded denominator instead of dividing by zero.
template <class T>
Tensor<T> row_l2_normalize(const Tensor<T>& x) {
  detail::require(x.ndim() == 2,
                  "row_l2_normalize: expected [N,M], got " + shape_str(x.shape()));
  const int N = x.dim(0), M = x.dim(1);
  std::vector<T> out(x.size());
  auto norms = std::make_shared<std::vector<T>>(N);
  for (int i = 0; i < N; ++i) {
    const T* row = x.data().data() + int64_t(i) * M;
    T r = std::sqrt(kern::dot(row, row, M));
    if (r < T(1e-12)) r = T(1e-12);
    (*norms)[i] = r;
    kern::scale(out.data() + int64_t(i) * M, row, T(1) / r, M);
  }
  auto xn = x.node();
  return sftn::detail::make_result<T>(
      x.shape(), std::move(out), "row_l2_normalize", {xn}, [xn, norms, N, M](Node<T>& n) {
        xn->ensure_grad();
        for (int i = 0; i < N; ++i) {
          const T* g = n.grad.data() + int64_t(i) * M;
          const T* y = n.value.data() + int64_t(i) * M;
          T* dx = xn->grad.data() + int64_t(i) * M;
          const T gy = kern::dot(g, y, M);
          const T inv = T(1) / (*norms)[i];
          for (int j = 0; j < M; ++j) dx[j] += (g[j] - y[j] * gy) * inv;
        }
      });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const int N = x.dim(0), K = x.dim(1);
  std::vector<int> out(N);
  for (int i = 0; i < N; ++i) {
    const T* row = x.data().data() + int64_t(i) * K;
    int best = 0;
    for (int j = 1; j < K; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace sftn::ops
