#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "efi/parallel.hpp"
#include "efi/tensor.hpp"

namespace efi {

// Reverse-mode autodiff over TensorT values. Each NodeT carries its forward
// value, a lazily materialized gradient and a closure that scatters the
// node's gradient into its parents. Graphs are DAGs of shared_ptrs built
// fresh per forward pass; parameters are long-lived leaf nodes.

template <typename S>
struct NodeT;

template <typename S>
using NodeRef = std::shared_ptr<NodeT<S>>;

template <typename S>
struct NodeT {
  TensorT<S> value;
  TensorT<S> grad;  // sized by backward(); empty otherwise
  bool requires_grad = false;
  std::vector<NodeRef<S>> parents;
  std::function<void(NodeT<S>&)> backprop;
};

namespace detail {
inline thread_local int g_no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

// RAII switch that makes ops produce plain constants (inference paths).
struct NoGradGuard {
  NoGradGuard() { ++detail::g_no_grad_depth; }
  ~NoGradGuard() { --detail::g_no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
NodeRef<S> make_param(TensorT<S> v) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

template <typename S>
NodeRef<S> make_const(TensorT<S> v) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(v);
  return n;
}

template <typename S>
NodeRef<S> make_op(TensorT<S> value, std::vector<NodeRef<S>> parents,
                   std::function<void(NodeT<S>&)> backprop) {
  auto n = std::make_shared<NodeT<S>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backprop = std::move(backprop);
    }
  }
  return n;
}

// ---------------------------------------------------------------------------
// backward

template <typename S>
inline void topo_visit(NodeT<S>* root, std::vector<NodeT<S>*>& order) {
  // Iterative post-order DFS; parent order fixes the traversal, so gradient
  // accumulation order is deterministic.
  std::unordered_set<NodeT<S>*> seen;
  std::vector<std::pair<NodeT<S>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      NodeT<S>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

// Reverse topological sweep from a scalar loss. Gradients of every node in
// the reachable requires_grad subgraph are zeroed first, so repeated calls
// never see stale accumulations; contributions of shared subexpressions sum.
template <typename S>
void backward(const NodeRef<S>& loss) {
  if (loss->value.numel() != 1) {
    throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss->value.shape()));
  }
  if (!loss->requires_grad) {
    throw UsageError("backward: loss does not depend on any parameter");
  }
  std::vector<NodeT<S>*> order;
  topo_visit(loss.get(), order);
  for (NodeT<S>* n : order) n->grad = TensorT<S>(n->value.shape());
  loss->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT<S>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise / reduction ops

template <typename S>
NodeRef<S> add(NodeRef<S> a, NodeRef<S> b) {
  if (!a->value.same_shape(b->value)) {
    throw InputError("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  TensorT<S> out(a->value.shape());
  const S* pa = a->value.data();
  const S* pb = b->value.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  return make_op<S>(std::move(out), {a, b}, [a, b](NodeT<S>& self) {
    const S* g = self.grad.data();
    if (a->requires_grad) {
      S* ga = a->grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      S* gb = b->grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gb[i] += g[i];
    }
  });
}

template <typename S>
NodeRef<S> sub(NodeRef<S> a, NodeRef<S> b) {
  if (!a->value.same_shape(b->value)) {
    throw InputError("sub: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                     shape_str(b->value.shape()));
  }
  TensorT<S> out(a->value.shape());
  const S* pa = a->value.data();
  const S* pb = b->value.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  return make_op<S>(std::move(out), {a, b}, [a, b](NodeT<S>& self) {
    const S* g = self.grad.data();
    if (a->requires_grad) {
      S* ga = a->grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      S* gb = b->grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename S>
NodeRef<S> scale(NodeRef<S> a, S k) {
  TensorT<S> out(a->value.shape());
  const S* pa = a->value.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = k * pa[i];
  return make_op<S>(std::move(out), {a}, [a, k](NodeT<S>& self) {
    if (!a->requires_grad) return;
    const S* g = self.grad.data();
    S* ga = a->grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += k * g[i];
  });
}

template <typename S>
NodeRef<S> relu(NodeRef<S> a) {
  TensorT<S> out(a->value.shape());
  const S* pa = a->value.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > S(0) ? pa[i] : S(0);
  return make_op<S>(std::move(out), {a}, [a](NodeT<S>& self) {
    if (!a->requires_grad) return;
    const S* g = self.grad.data();
    const S* pa = a->value.data();
    S* ga = a->grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      if (pa[i] > S(0)) ga[i] += g[i];
    }
  });
}

// Identity forward, zero partial derivatives: the result is a detached
// constant, so no gradient ever flows into `a` through it.
template <typename S>
NodeRef<S> stop_gradient(const NodeRef<S>& a) {
  return make_const(a->value);
}

template <typename S>
NodeRef<S> sum(NodeRef<S> a) {
  S acc = 0;
  const S* pa = a->value.data();
  for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += pa[i];
  return make_op<S>(TensorT<S>::scalar(acc), {a}, [a](NodeT<S>& self) {
    if (!a->requires_grad) return;
    const S g = self.grad[0];
    S* ga = a->grad.data();
    for (std::int64_t i = 0; i < a->value.numel(); ++i) ga[i] += g;
  });
}

template <typename S>
NodeRef<S> sum_squares(NodeRef<S> a) {
  S acc = 0;
  const S* pa = a->value.data();
  for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += pa[i] * pa[i];
  return make_op<S>(TensorT<S>::scalar(acc), {a}, [a](NodeT<S>& self) {
    if (!a->requires_grad) return;
    const S g = self.grad[0];
    const S* pa = a->value.data();
    S* ga = a->grad.data();
    for (std::int64_t i = 0; i < a->value.numel(); ++i) ga[i] += S(2) * g * pa[i];
  });
}

// Squared L2 norm of (x - x_hat), summed over elements; for rank >= 2 the
// leading dimension is the batch and the sum is divided by it.
template <typename S>
NodeRef<S> mse_norm(NodeRef<S> x, NodeRef<S> x_hat) {
  if (!x->value.same_shape(x_hat->value)) {
    throw InputError("mse_norm: shape mismatch " + shape_str(x->value.shape()) + " vs " +
                     shape_str(x_hat->value.shape()));
  }
  const S batch = x->value.rank() >= 2 ? static_cast<S>(x->value.dim(0)) : S(1);
  S acc = 0;
  const S* px = x->value.data();
  const S* py = x_hat->value.data();
  for (std::int64_t i = 0; i < x->value.numel(); ++i) {
    const S d = px[i] - py[i];
    acc += d * d;
  }
  acc /= batch;
  return make_op<S>(TensorT<S>::scalar(acc), {x, x_hat}, [x, x_hat, batch](NodeT<S>& self) {
    const S g = self.grad[0] * S(2) / batch;
    const S* px = x->value.data();
    const S* py = x_hat->value.data();
    if (x->requires_grad) {
      S* gx = x->grad.data();
      for (std::int64_t i = 0; i < x->value.numel(); ++i) gx[i] += g * (px[i] - py[i]);
    }
    if (x_hat->requires_grad) {
      S* gy = x_hat->grad.data();
      for (std::int64_t i = 0; i < x->value.numel(); ++i) gy[i] -= g * (px[i] - py[i]);
    }
  });
}

template <typename S>
NodeRef<S> reshape(NodeRef<S> a, Shape shape) {
  if (shape_numel(shape) != a->value.numel()) {
    throw InputError("reshape: cannot view " + shape_str(a->value.shape()) + " as " +
                     shape_str(shape));
  }
  TensorT<S> out(std::move(shape), a->value.raw());
  return make_op<S>(std::move(out), {a}, [a](NodeT<S>& self) {
    if (!a->requires_grad) return;
    const S* g = self.grad.data();
    S* ga = a->grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// dense layer

template <typename S>
NodeRef<S> dense(NodeRef<S> x, NodeRef<S> weight, NodeRef<S> bias) {
  const auto& ws = weight->value.shape();
  if (weight->value.rank() != 2) throw ConfigError("dense: weight must be rank 2");
  const int m = ws[0];
  const int n = ws[1];
  if (bias && (bias->value.rank() != 1 || bias->value.dim(0) != m)) {
    throw ConfigError("dense: bias shape must be (" + std::to_string(m) + ")");
  }
  const bool batched = x->value.rank() == 2;
  if (!batched && x->value.rank() != 1) throw ConfigError("dense: input must be rank 1 or 2");
  const int in_dim = batched ? x->value.dim(1) : x->value.dim(0);
  if (in_dim != n) {
    throw ConfigError("dense: input dim " + std::to_string(in_dim) + " != weight cols " +
                      std::to_string(n));
  }
  const int b = batched ? x->value.dim(0) : 1;

  TensorT<S> out(batched ? Shape{b, m} : Shape{m});
  const S* px = x->value.data();
  const S* pw = weight->value.data();
  S* po = out.data();
  for (int r = 0; r < b; ++r) {
    const S* xr = px + static_cast<std::int64_t>(r) * n;
    S* orow = po + static_cast<std::int64_t>(r) * m;
    for (int i = 0; i < m; ++i) {
      const S* wrow = pw + static_cast<std::int64_t>(i) * n;
      S acc = bias ? bias->value[i] : S(0);
      for (int j = 0; j < n; ++j) acc += wrow[j] * xr[j];
      orow[i] = acc;
    }
  }

  std::vector<NodeRef<S>> parents = {x, weight};
  if (bias) parents.push_back(bias);
  return make_op<S>(std::move(out), std::move(parents),
                    [x, weight, bias, b, m, n](NodeT<S>& self) {
                      const S* g = self.grad.data();
                      const S* px = x->value.data();
                      const S* pw = weight->value.data();
                      for (int r = 0; r < b; ++r) {
                        const S* grow = g + static_cast<std::int64_t>(r) * m;
                        const S* xr = px + static_cast<std::int64_t>(r) * n;
                        if (x->requires_grad) {
                          S* gx = x->grad.data() + static_cast<std::int64_t>(r) * n;
                          for (int i = 0; i < m; ++i) {
                            const S gi = grow[i];
                            const S* wrow = pw + static_cast<std::int64_t>(i) * n;
                            for (int j = 0; j < n; ++j) gx[j] += gi * wrow[j];
                          }
                        }
                        if (weight->requires_grad) {
                          S* gw = weight->grad.data();
                          for (int i = 0; i < m; ++i) {
                            const S gi = grow[i];
                            S* gwrow = gw + static_cast<std::int64_t>(i) * n;
                            for (int j = 0; j < n; ++j) gwrow[j] += gi * xr[j];
                          }
                        }
                        if (bias && bias->requires_grad) {
                          S* gb = bias->grad.data();
                          for (int i = 0; i < m; ++i) gb[i] += grow[i];
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// convolution ops; tensors are (N,C,H,W), rank-3 inputs mean batch of one

namespace detail {
inline Shape as_batched(const Shape& s) {
  if (s.size() == 4) return s;
  return {1, s[0], s[1], s[2]};
}
}  // namespace detail

// Valid (no padding) cross-correlation. kernel is (C_out, C_in, kH, kW).
template <typename S>
NodeRef<S> conv2d(NodeRef<S> input, NodeRef<S> kernel, int sh, int sw) {
  const int rank = input->value.rank();
  if (rank != 3 && rank != 4) throw ConfigError("conv2d: input must be rank 3 or 4");
  if (kernel->value.rank() != 4) throw ConfigError("conv2d: kernel must be rank 4");
  if (sh <= 0 || sw <= 0) throw ConfigError("conv2d: strides must be positive");
  const Shape is = detail::as_batched(input->value.shape());
  const int nb = is[0], ci = is[1], h = is[2], w = is[3];
  const Shape& ks = kernel->value.shape();
  const int co = ks[0], kci = ks[1], kh = ks[2], kw = ks[3];
  if (kci != ci) {
    throw ConfigError("conv2d: input channels " + std::to_string(ci) + " != kernel channels " +
                      std::to_string(kci));
  }
  if (h < kh || w < kw) {
    throw ConfigError("conv2d: kernel (" + std::to_string(kh) + "," + std::to_string(kw) +
                      ") larger than input (" + std::to_string(h) + "," + std::to_string(w) + ")");
  }
  const int oh = (h - kh) / sh + 1;
  const int ow = (w - kw) / sw + 1;

  TensorT<S> out(rank == 4 ? Shape{nb, co, oh, ow} : Shape{co, oh, ow});
  const S* pin = input->value.data();
  const S* pk = kernel->value.data();
  S* po = out.data();
  parallel_for(static_cast<std::int64_t>(nb) * co, 4, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t t = b0; t < b1; ++t) {
      const int n = static_cast<int>(t / co);
      const int oc = static_cast<int>(t % co);
      const S* in_n = pin + static_cast<std::int64_t>(n) * ci * h * w;
      const S* k_oc = pk + static_cast<std::int64_t>(oc) * ci * kh * kw;
      S* o = po + t * oh * ow;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          S acc = 0;
          for (int c = 0; c < ci; ++c) {
            const S* in_c = in_n + static_cast<std::int64_t>(c) * h * w + (i * sh) * w + j * sw;
            const S* k_c = k_oc + static_cast<std::int64_t>(c) * kh * kw;
            for (int y = 0; y < kh; ++y) {
              const S* in_row = in_c + static_cast<std::int64_t>(y) * w;
              const S* k_row = k_c + static_cast<std::int64_t>(y) * kw;
              for (int x = 0; x < kw; ++x) acc += in_row[x] * k_row[x];
            }
          }
          o[static_cast<std::int64_t>(i) * ow + j] = acc;
        }
      }
    }
  });

  return make_op<S>(
      std::move(out), {input, kernel},
      [input, kernel, nb, ci, h, w, co, kh, kw, sh, sw, oh, ow](NodeT<S>& self) {
        const S* g = self.grad.data();
        const S* pin = input->value.data();
        const S* pk = kernel->value.data();
        if (input->requires_grad) {
          S* gin = input->grad.data();
          // per-sample slots are disjoint across n
          parallel_for(nb, 1, [&](std::int64_t n0, std::int64_t n1) {
            for (std::int64_t n = n0; n < n1; ++n) {
              S* gin_n = gin + n * ci * h * w;
              const S* g_n = g + n * co * oh * ow;
              for (int oc = 0; oc < co; ++oc) {
                const S* g_oc = g_n + static_cast<std::int64_t>(oc) * oh * ow;
                const S* k_oc = pk + static_cast<std::int64_t>(oc) * ci * kh * kw;
                for (int i = 0; i < oh; ++i) {
                  for (int j = 0; j < ow; ++j) {
                    const S gv = g_oc[static_cast<std::int64_t>(i) * ow + j];
                    if (gv == S(0)) continue;
                    for (int c = 0; c < ci; ++c) {
                      S* gin_c = gin_n + static_cast<std::int64_t>(c) * h * w + (i * sh) * w + j * sw;
                      const S* k_c = k_oc + static_cast<std::int64_t>(c) * kh * kw;
                      for (int y = 0; y < kh; ++y) {
                        S* gin_row = gin_c + static_cast<std::int64_t>(y) * w;
                        const S* k_row = k_c + static_cast<std::int64_t>(y) * kw;
                        for (int x = 0; x < kw; ++x) gin_row[x] += gv * k_row[x];
                      }
                    }
                  }
                }
              }
            }
          });
        }
        if (kernel->requires_grad) {
          S* gk = kernel->grad.data();
          // per-output-channel slots are disjoint across oc
          parallel_for(co, 1, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t oc = c0; oc < c1; ++oc) {
              S* gk_oc = gk + oc * ci * kh * kw;
              for (int n = 0; n < nb; ++n) {
                const S* in_n = pin + static_cast<std::int64_t>(n) * ci * h * w;
                const S* g_oc = g + (static_cast<std::int64_t>(n) * co + oc) * oh * ow;
                for (int i = 0; i < oh; ++i) {
                  for (int j = 0; j < ow; ++j) {
                    const S gv = g_oc[static_cast<std::int64_t>(i) * ow + j];
                    if (gv == S(0)) continue;
                    for (int c = 0; c < ci; ++c) {
                      const S* in_c = in_n + static_cast<std::int64_t>(c) * h * w + (i * sh) * w + j * sw;
                      S* gk_c = gk_oc + static_cast<std::int64_t>(c) * kh * kw;
                      for (int y = 0; y < kh; ++y) {
                        const S* in_row = in_c + static_cast<std::int64_t>(y) * w;
                        S* gk_row = gk_c + static_cast<std::int64_t>(y) * kw;
                        for (int x = 0; x < kw; ++x) gk_row[x] += gv * in_row[x];
                      }
                    }
                  }
                }
              }
            }
          });
        }
      });
}

// Transposed convolution (adjoint of conv2d over the spatial map).
// kernel is (C_in, C_out, kH, kW); output spatial dims (H-1)*s + k.
template <typename S>
NodeRef<S> conv_transpose2d(NodeRef<S> input, NodeRef<S> kernel, int sh, int sw) {
  const int rank = input->value.rank();
  if (rank != 3 && rank != 4) throw ConfigError("conv_transpose2d: input must be rank 3 or 4");
  if (kernel->value.rank() != 4) throw ConfigError("conv_transpose2d: kernel must be rank 4");
  if (sh <= 0 || sw <= 0) throw ConfigError("conv_transpose2d: strides must be positive");
  const Shape is = detail::as_batched(input->value.shape());
  const int nb = is[0], ci = is[1], h = is[2], w = is[3];
  const Shape& ks = kernel->value.shape();
  const int kci = ks[0], co = ks[1], kh = ks[2], kw = ks[3];
  if (kci != ci) {
    throw ConfigError("conv_transpose2d: input channels " + std::to_string(ci) +
                      " != kernel channels " + std::to_string(kci));
  }
  const int oh = (h - 1) * sh + kh;
  const int ow = (w - 1) * sw + kw;

  TensorT<S> out(rank == 4 ? Shape{nb, co, oh, ow} : Shape{co, oh, ow});
  const S* pin = input->value.data();
  const S* pk = kernel->value.data();
  S* po = out.data();
  parallel_for(static_cast<std::int64_t>(nb) * co, 4, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t t = b0; t < b1; ++t) {
      const int n = static_cast<int>(t / co);
      const int oc = static_cast<int>(t % co);
      const S* in_n = pin + static_cast<std::int64_t>(n) * ci * h * w;
      S* o = po + t * oh * ow;
      for (int c = 0; c < ci; ++c) {
        const S* in_c = in_n + static_cast<std::int64_t>(c) * h * w;
        const S* k_c = pk + (static_cast<std::int64_t>(c) * co + oc) * kh * kw;
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            const S v = in_c[static_cast<std::int64_t>(i) * w + j];
            if (v == S(0)) continue;
            S* obase = o + static_cast<std::int64_t>(i * sh) * ow + j * sw;
            for (int y = 0; y < kh; ++y) {
              S* orow = obase + static_cast<std::int64_t>(y) * ow;
              const S* k_row = k_c + static_cast<std::int64_t>(y) * kw;
              for (int x = 0; x < kw; ++x) orow[x] += v * k_row[x];
            }
          }
        }
      }
    }
  });

  return make_op<S>(
      std::move(out), {input, kernel},
      [input, kernel, nb, ci, h, w, co, kh, kw, sh, sw, oh, ow](NodeT<S>& self) {
        const S* g = self.grad.data();
        const S* pin = input->value.data();
        const S* pk = kernel->value.data();
        if (input->requires_grad) {
          S* gin = input->grad.data();
          parallel_for(static_cast<std::int64_t>(nb) * ci, 4, [&](std::int64_t b0, std::int64_t b1) {
            for (std::int64_t t = b0; t < b1; ++t) {
              const int n = static_cast<int>(t / ci);
              const int c = static_cast<int>(t % ci);
              S* gin_c = gin + t * h * w;
              const S* g_n = g + static_cast<std::int64_t>(n) * co * oh * ow;
              for (int oc = 0; oc < co; ++oc) {
                const S* g_oc = g_n + static_cast<std::int64_t>(oc) * oh * ow;
                const S* k_c = pk + (static_cast<std::int64_t>(c) * co + oc) * kh * kw;
                for (int i = 0; i < h; ++i) {
                  for (int j = 0; j < w; ++j) {
                    const S* gbase = g_oc + static_cast<std::int64_t>(i * sh) * ow + j * sw;
                    S acc = 0;
                    for (int y = 0; y < kh; ++y) {
                      const S* grow = gbase + static_cast<std::int64_t>(y) * ow;
                      const S* k_row = k_c + static_cast<std::int64_t>(y) * kw;
                      for (int x = 0; x < kw; ++x) acc += grow[x] * k_row[x];
                    }
                    gin_c[static_cast<std::int64_t>(i) * w + j] += acc;
                  }
                }
              }
            }
          });
        }
        if (kernel->requires_grad) {
          S* gk = kernel->grad.data();
          parallel_for(ci, 1, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t c = c0; c < c1; ++c) {
              for (int n = 0; n < nb; ++n) {
                const S* in_c = pin + (static_cast<std::int64_t>(n) * ci + c) * h * w;
                const S* g_n = g + static_cast<std::int64_t>(n) * co * oh * ow;
                for (int oc = 0; oc < co; ++oc) {
                  const S* g_oc = g_n + static_cast<std::int64_t>(oc) * oh * ow;
                  S* gk_c = gk + (c * co + oc) * kh * kw;
                  for (int i = 0; i < h; ++i) {
                    for (int j = 0; j < w; ++j) {
                      const S v = in_c[static_cast<std::int64_t>(i) * w + j];
                      if (v == S(0)) continue;
                      const S* gbase = g_oc + static_cast<std::int64_t>(i * sh) * ow + j * sw;
                      for (int y = 0; y < kh; ++y) {
                        const S* grow = gbase + static_cast<std::int64_t>(y) * ow;
                        S* gk_row = gk_c + static_cast<std::int64_t>(y) * kw;
                        for (int x = 0; x < kw; ++x) gk_row[x] += v * grow[x];
                      }
                    }
                  }
                }
              }
            }
          });
        }
      });
}

// Adds bias[c] to every spatial position of channel c.
template <typename S>
NodeRef<S> bias_channels(NodeRef<S> input, NodeRef<S> bias) {
  const int rank = input->value.rank();
  if (rank != 3 && rank != 4) throw ConfigError("bias_channels: input must be rank 3 or 4");
  const Shape is = detail::as_batched(input->value.shape());
  const int nb = is[0], c = is[1];
  const std::int64_t plane = static_cast<std::int64_t>(is[2]) * is[3];
  if (bias->value.rank() != 1 || bias->value.dim(0) != c) {
    throw ConfigError("bias_channels: bias shape must be (" + std::to_string(c) + ")");
  }
  TensorT<S> out(input->value.shape());
  const S* pin = input->value.data();
  const S* pb = bias->value.data();
  S* po = out.data();
  for (int n = 0; n < nb; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const S b = pb[ch];
      const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * plane;
      for (std::int64_t i = 0; i < plane; ++i) po[base + i] = pin[base + i] + b;
    }
  }
  return make_op<S>(std::move(out), {input, bias}, [input, bias, nb, c, plane](NodeT<S>& self) {
    const S* g = self.grad.data();
    if (input->requires_grad) {
      S* gi = input->grad.data();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gi[i] += g[i];
    }
    if (bias->requires_grad) {
      S* gb = bias->grad.data();
      for (int n = 0; n < nb; ++n) {
        for (int ch = 0; ch < c; ++ch) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * c + ch) * plane;
          S acc = 0;
          for (std::int64_t i = 0; i < plane; ++i) acc += g[base + i];
          gb[ch] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// pooling

// Per-window argmax positions as linear indices into the (H,W) plane of the
// owning (n,c) slice, in output-cell order.
struct ArgmaxMap {
  Shape out_shape;
  std::vector<int> plane_index;
};

template <typename S>
std::pair<NodeRef<S>, ArgmaxMap> maxpool2d_with_argmax(NodeRef<S> input, int wh, int ww, int sh,
                                                       int sw) {
  const int rank = input->value.rank();
  if (rank != 3 && rank != 4) throw ConfigError("maxpool2d: input must be rank 3 or 4");
  if (wh <= 0 || ww <= 0 || sh <= 0 || sw <= 0) throw ConfigError("maxpool2d: bad window/stride");
  const Shape is = detail::as_batched(input->value.shape());
  const int nb = is[0], c = is[1], h = is[2], w = is[3];
  if (wh > h || ww > w) {
    throw ConfigError("maxpool2d: window (" + std::to_string(wh) + "," + std::to_string(ww) +
                      ") larger than input (" + std::to_string(h) + "," + std::to_string(w) + ")");
  }
  const int oh = (h - wh) / sh + 1;
  const int ow = (w - ww) / sw + 1;

  TensorT<S> out(rank == 4 ? Shape{nb, c, oh, ow} : Shape{c, oh, ow});
  ArgmaxMap map;
  map.out_shape = out.shape();
  map.plane_index.assign(static_cast<std::size_t>(out.numel()), 0);
  const S* pin = input->value.data();
  S* po = out.data();
  std::int64_t cell = 0;
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(nb) * c; ++t) {
    const S* plane = pin + t * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j, ++cell) {
        S best = plane[static_cast<std::int64_t>(i * sh) * w + j * sw];
        int best_idx = (i * sh) * w + j * sw;
        for (int y = 0; y < wh; ++y) {
          for (int x = 0; x < ww; ++x) {
            const int idx = (i * sh + y) * w + (j * sw + x);
            const S v = plane[idx];
            if (v > best) {  // strict: ties keep the lowest linear index
              best = v;
              best_idx = idx;
            }
          }
        }
        po[cell] = best;
        map.plane_index[static_cast<std::size_t>(cell)] = best_idx;
      }
    }
  }

  auto indices = map.plane_index;  // captured copy for the backward closure
  auto node = make_op<S>(std::move(out), {input},
                         [input, indices, nb, c, h, w, oh, ow](NodeT<S>& self) {
                           if (!input->requires_grad) return;
                           const S* g = self.grad.data();
                           S* gi = input->grad.data();
                           std::int64_t cell = 0;
                           for (std::int64_t t = 0; t < static_cast<std::int64_t>(nb) * c; ++t) {
                             S* gplane = gi + t * h * w;
                             for (std::int64_t k = 0; k < static_cast<std::int64_t>(oh) * ow;
                                  ++k, ++cell) {
                               gplane[indices[static_cast<std::size_t>(cell)]] += g[cell];
                             }
                           }
                         });
  return {node, std::move(map)};
}

// Places each value at the top-left cell of its window, zeros elsewhere.
// Deliberately does not consume pooling argmax indices: the deployed decoder
// never has them, so training uses the same fixed placement.
template <typename S>
NodeRef<S> max_unpool2d_fixed(NodeRef<S> input, int wh, int ww, int sh, int sw) {
  const int rank = input->value.rank();
  if (rank != 3 && rank != 4) throw ConfigError("max_unpool2d: input must be rank 3 or 4");
  if (wh <= 0 || ww <= 0 || sh <= 0 || sw <= 0) throw ConfigError("max_unpool2d: bad window/stride");
  const Shape is = detail::as_batched(input->value.shape());
  const int nb = is[0], c = is[1], h = is[2], w = is[3];
  const int oh = (h - 1) * sh + wh;
  const int ow = (w - 1) * sw + ww;

  TensorT<S> out(rank == 4 ? Shape{nb, c, oh, ow} : Shape{c, oh, ow});
  const S* pin = input->value.data();
  S* po = out.data();
  for (std::int64_t t = 0; t < static_cast<std::int64_t>(nb) * c; ++t) {
    const S* plane = pin + t * h * w;
    S* oplane = po + t * oh * ow;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        oplane[static_cast<std::int64_t>(i * sh) * ow + j * sw] =
            plane[static_cast<std::int64_t>(i) * w + j];
      }
    }
  }
  return make_op<S>(std::move(out), {input}, [input, nb, c, h, w, oh, ow, sh, sw](NodeT<S>& self) {
    if (!input->requires_grad) return;
    const S* g = self.grad.data();
    S* gi = input->grad.data();
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(nb) * c; ++t) {
      const S* gplane = g + t * oh * ow;
      S* giplane = gi + t * h * w;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          giplane[static_cast<std::int64_t>(i) * w + j] +=
              gplane[static_cast<std::int64_t>(i * sh) * ow + j * sw];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// classification losses

// Mean over the batch of -log softmax(logits)[label]; max-subtraction for
// numerical stability. Rank-1 logits take a single label.
template <typename S>
NodeRef<S> softmax_crossentropy(NodeRef<S> logits, const std::vector<int>& labels) {
  const int rank = logits->value.rank();
  if (rank != 1 && rank != 2) throw ConfigError("softmax_crossentropy: logits must be rank 1 or 2");
  const int b = rank == 2 ? logits->value.dim(0) : 1;
  const int t = rank == 2 ? logits->value.dim(1) : logits->value.dim(0);
  if (static_cast<int>(labels.size()) != b) {
    throw InputError("softmax_crossentropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(b));
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= t) {
      throw InputError("softmax_crossentropy: label " + std::to_string(lab) + " out of range [0," +
                       std::to_string(t) + ")");
    }
  }
  const S* pl = logits->value.data();
  S total = 0;
  for (int r = 0; r < b; ++r) {
    const S* row = pl + static_cast<std::int64_t>(r) * t;
    S mx = row[0];
    for (int i = 1; i < t; ++i) mx = std::max(mx, row[i]);
    S lse = 0;
    for (int i = 0; i < t; ++i) lse += std::exp(row[i] - mx);
    total += mx + std::log(lse) - row[labels[static_cast<std::size_t>(r)]];
  }
  total /= static_cast<S>(b);

  return make_op<S>(TensorT<S>::scalar(total), {logits}, [logits, labels, b, t](NodeT<S>& self) {
    if (!logits->requires_grad) return;
    const S g = self.grad[0] / static_cast<S>(b);
    const S* pl = logits->value.data();
    S* gl = logits->grad.data();
    for (int r = 0; r < b; ++r) {
      const S* row = pl + static_cast<std::int64_t>(r) * t;
      S* grow = gl + static_cast<std::int64_t>(r) * t;
      S mx = row[0];
      for (int i = 1; i < t; ++i) mx = std::max(mx, row[i]);
      S z = 0;
      for (int i = 0; i < t; ++i) z += std::exp(row[i] - mx);
      for (int i = 0; i < t; ++i) {
        S p = std::exp(row[i] - mx) / z;
        if (i == labels[static_cast<std::size_t>(r)]) p -= S(1);
        grow[i] += g * p;
      }
    }
  });
}

// Plain softmax over the last axis of a rank-1/2 tensor (inference only).
template <typename S>
TensorT<S> softmax(const TensorT<S>& logits) {
  const int rank = logits.rank();
  const int b = rank == 2 ? logits.dim(0) : 1;
  const int t = rank == 2 ? logits.dim(1) : logits.dim(0);
  TensorT<S> out(logits.shape());
  for (int r = 0; r < b; ++r) {
    const S* row = logits.data() + static_cast<std::int64_t>(r) * t;
    S* orow = out.data() + static_cast<std::int64_t>(r) * t;
    S mx = row[0];
    for (int i = 1; i < t; ++i) mx = std::max(mx, row[i]);
    S z = 0;
    for (int i = 0; i < t; ++i) {
      orow[i] = std::exp(row[i] - mx);
      z += orow[i];
    }
    for (int i = 0; i < t; ++i) orow[i] /= z;
  }
  return out;
}

// Selects rows of a (K,D) table; gradient scatter-adds into selected rows.
template <typename S>
NodeRef<S> gather_rows(NodeRef<S> table, std::vector<int> indices) {
  if (table->value.rank() != 2) throw ConfigError("gather_rows: table must be rank 2");
  const int k = table->value.dim(0);
  const int d = table->value.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= k) {
      throw InputError("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(k) + ")");
    }
  }
  const int m = static_cast<int>(indices.size());
  TensorT<S> out({m, d});
  const S* pt = table->value.data();
  S* po = out.data();
  for (int r = 0; r < m; ++r) {
    const S* src = pt + static_cast<std::int64_t>(indices[static_cast<std::size_t>(r)]) * d;
    S* dst = po + static_cast<std::int64_t>(r) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  return make_op<S>(std::move(out), {table}, [table, indices = std::move(indices), d](NodeT<S>& self) {
    if (!table->requires_grad) return;
    const S* g = self.grad.data();
    S* gt = table->grad.data();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      S* dst = gt + static_cast<std::int64_t>(indices[r]) * d;
      const S* src = g + static_cast<std::int64_t>(r) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------------------
// optimizer

// v <- mu*v + g ; p <- p - lr*v
template <typename S>
void sgd_momentum_update(TensorT<S>& param, const TensorT<S>& grad, TensorT<S>& velocity, S lr,
                         S momentum) {
  if (!param.same_shape(grad) || !param.same_shape(velocity)) {
    throw InputError("sgd_momentum_update: shape mismatch");
  }
  S* p = param.data();
  const S* g = grad.data();
  S* v = velocity.data();
  for (std::int64_t i = 0; i < param.numel(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(S lr, S momentum) : lr_(lr), momentum_(momentum) {}

  S learning_rate() const { return lr_; }
  void set_learning_rate(S lr) { lr_ = lr; }
  S momentum() const { return momentum_; }

  // Applies one update to each node from its accumulated gradient.
  void step(const std::vector<NodeRef<S>>& params) {
    for (const auto& p : params) {
      if (p->grad.numel() != p->value.numel()) {
        throw UsageError("SgdMomentum::step: parameter has no gradient; run backward first");
      }
      auto [it, inserted] = velocity_.try_emplace(p.get(), TensorT<S>(p->value.shape()));
      sgd_momentum_update(p->value, p->grad, it->second, lr_, momentum_);
    }
  }

 private:
  S lr_;
  S momentum_;
  std::unordered_map<NodeT<S>*, TensorT<S>> velocity_;
};

}  // namespace efi
