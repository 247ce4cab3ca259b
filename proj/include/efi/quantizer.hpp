#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "efi/autograd.hpp"
#include "efi/parallel.hpp"
#include "efi/tensor.hpp"

namespace efi {

// Learnable codebook of K vectors of dimension D, stored as a (K,D) tensor.
template <typename S>
struct CodebookT {
  TensorT<S> entries;
  int size() const { return entries.rank() == 2 ? entries.dim(0) : 0; }
  int dim() const { return entries.rank() == 2 ? entries.dim(1) : 0; }
};

using Codebook = CodebookT<float>;

// Entries i.i.d. uniform on [-1/K, 1/K], deterministic under seed.
template <typename S = float>
CodebookT<S> codebook_init(int k, int d, std::uint64_t seed) {
  if (k <= 0 || d <= 0) throw ConfigError("codebook_init: K and D must be positive");
  CodebookT<S> cb;
  cb.entries = TensorT<S>({k, d});
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / static_cast<double>(k);
  std::uniform_real_distribution<double> dist(-bound, bound);
  S* p = cb.entries.data();
  for (std::int64_t i = 0; i < cb.entries.numel(); ++i) p[i] = static_cast<S>(dist(rng));
  return cb;
}

// Nearest codebook entry per latent row by squared Euclidean distance;
// ties resolve to the lowest index. latent is (M,D) row-major, codebook (K,D).
template <typename S>
std::pair<std::vector<int>, TensorT<S>> quantize_nearest(const TensorT<S>& latent,
                                                         const TensorT<S>& codebook) {
  if (latent.rank() != 2 || codebook.rank() != 2) {
    throw ConfigError("quantize_nearest: latent and codebook must be rank 2");
  }
  const int m = latent.dim(0);
  const int d = latent.dim(1);
  const int k = codebook.dim(0);
  if (codebook.dim(1) != d) {
    throw ConfigError("quantize_nearest: latent dim " + std::to_string(d) +
                      " != codebook dim " + std::to_string(codebook.dim(1)));
  }
  std::vector<int> indices(static_cast<std::size_t>(m), 0);
  TensorT<S> quantized({m, d});
  const S* pl = latent.data();
  const S* pc = codebook.data();
  S* pq = quantized.data();
  parallel_for(m, 64, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const S* row = pl + r * d;
      S best = std::numeric_limits<S>::max();
      int best_idx = 0;
      for (int i = 0; i < k; ++i) {
        const S* entry = pc + static_cast<std::int64_t>(i) * d;
        // strictly sequential accumulation; partial sums only grow, so the
        // early exit cannot change the selected index
        S acc = 0;
        for (int j = 0; j < d; ++j) {
          const S df = row[j] - entry[j];
          acc += df * df;
          if ((j & 15) == 15 && acc >= best) break;
        }
        if (acc < best) {
          best = acc;
          best_idx = i;
        }
      }
      indices[static_cast<std::size_t>(r)] = best_idx;
      const S* src = pc + static_cast<std::int64_t>(best_idx) * d;
      S* dst = pq + r * d;
      for (int j = 0; j < d; ++j) dst[j] = src[j];
    }
  });
  return {std::move(indices), std::move(quantized)};
}

// Rebuilds the latent rows from indices; inverse of quantize_nearest on
// already-quantized input.
template <typename S>
TensorT<S> dequantize(const std::vector<int>& indices, const TensorT<S>& codebook) {
  if (codebook.rank() != 2) throw ConfigError("dequantize: codebook must be rank 2");
  const int k = codebook.dim(0);
  const int d = codebook.dim(1);
  TensorT<S> out({static_cast<int>(indices.size()), d});
  const S* pc = codebook.data();
  S* po = out.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int idx = indices[r];
    if (idx < 0 || idx >= k) {
      throw CorruptMessageError("dequantize: index " + std::to_string(idx) + " out of range [0," +
                                std::to_string(k) + ")");
    }
    const S* src = pc + static_cast<std::int64_t>(idx) * d;
    S* dst = po + static_cast<std::int64_t>(r) * d;
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  return out;
}

// e_c + sg[e_d - e_c] as a single op: the forward value is exactly e_d, the
// backward pass hands the incoming gradient to e_c unchanged (identity
// Jacobian).
template <typename S>
NodeRef<S> straight_through_compose(NodeRef<S> e_c, const TensorT<S>& e_d) {
  if (!e_c->value.same_shape(e_d)) {
    throw InputError("straight_through_compose: shape mismatch " + shape_str(e_c->value.shape()) +
                     " vs " + shape_str(e_d.shape()));
  }
  return make_op<S>(e_d, {e_c}, [e_c](NodeT<S>& self) {
    if (!e_c->requires_grad) return;
    const S* g = self.grad.data();
    S* ga = e_c->grad.data();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) ga[i] += g[i];
  });
}

// || sg[E_c] - E_d ||^2 / batch as a function of the codebook node; gradient
// reaches only the selected entries.
template <typename S>
NodeRef<S> codebook_loss(const TensorT<S>& e_c_rows, const std::vector<int>& indices,
                         NodeRef<S> codebook, int batch = 1) {
  if (e_c_rows.rank() != 2 || e_c_rows.dim(0) != static_cast<int>(indices.size())) {
    throw InputError("codebook_loss: latent rows do not match indices");
  }
  auto selected = gather_rows(codebook, indices);
  auto diff = sub(selected, make_const(e_c_rows));
  auto loss = sum_squares(diff);
  return batch == 1 ? loss : scale(loss, S(1) / static_cast<S>(batch));
}

// lambda * || E_c - sg[E_d] ||^2 / batch; gradient reaches only e_c.
template <typename S>
NodeRef<S> commitment_loss(NodeRef<S> e_c, const TensorT<S>& e_d, S lambda, int batch = 1) {
  if (lambda < S(0)) throw InputError("commitment_loss: lambda must be >= 0");
  if (!e_c->value.same_shape(e_d)) {
    throw InputError("commitment_loss: shape mismatch " + shape_str(e_c->value.shape()) + " vs " +
                     shape_str(e_d.shape()));
  }
  auto diff = sub(e_c, make_const(e_d));
  return scale(sum_squares(diff), lambda / static_cast<S>(batch));
}

}  // namespace efi
