#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "efi/quantizer.hpp"
#include "test_util.hpp"

using namespace efi;
using test::random_tensor;

namespace {

// independent exhaustive scan, written against the math, not the engine
int brute_force_nearest(const float* row, const Tensor& codebook) {
  const int k = codebook.dim(0);
  const int d = codebook.dim(1);
  int best_idx = 0;
  float best = std::numeric_limits<float>::max();
  for (int i = 0; i < k; ++i) {
    float dist = 0;
    for (int j = 0; j < d; ++j) {
      const float diff = row[j] - codebook.at2(i, j);
      dist += diff * diff;
    }
    if (dist < best) {
      best = dist;
      best_idx = i;
    }
  }
  return best_idx;
}

}  // namespace

TEST_CASE("quantize_nearest hand examples") {
  Tensor codebook({2, 2}, {0, 0, 1, 1});
  Tensor z({1, 2}, {0.9f, 0.8f});
  auto [idx, quant] = quantize_nearest(z, codebook);
  CHECK(idx[0] == 1);  // distances 1.45 vs 0.05
  CHECK(quant.at2(0, 0) == 1.0f);
  CHECK(quant.at2(0, 1) == 1.0f);

  Tensor exact({1, 2}, {0, 0});
  auto [idx2, quant2] = quantize_nearest(exact, codebook);
  CHECK(idx2[0] == 0);
  CHECK(quant2.at2(0, 0) == 0.0f);

  // equidistant: tie resolves to the lowest index
  Tensor mid({1, 2}, {0.5f, 0.5f});
  CHECK(quantize_nearest(mid, codebook).first[0] == 0);

  Tensor bad({1, 3});
  CHECK_THROWS_AS(quantize_nearest(bad, codebook), ConfigError);
}

TEST_CASE("quantize_nearest matches the brute-force oracle") {
  std::mt19937_64 rng(31);
  for (int k : {16, 64, 257}) {
    Tensor codebook = random_tensor<float>({k, 24}, rng);
    Tensor latents = random_tensor<float>({200, 24}, rng);
    auto [indices, quant] = quantize_nearest(latents, codebook);
    for (int r = 0; r < 200; ++r) {
      const int expect = brute_force_nearest(latents.data() + r * 24, codebook);
      REQUIRE(indices[static_cast<std::size_t>(r)] == expect);
    }
  }
}

TEST_CASE("dequantize") {
  Tensor codebook({2, 2}, {0, 0, 1, 1});
  Tensor feat = dequantize({1, 0}, codebook);
  CHECK(feat.at2(0, 0) == 1.0f);
  CHECK(feat.at2(0, 1) == 1.0f);
  CHECK(feat.at2(1, 0) == 0.0f);

  // fixed point: re-quantizing a dequantized feature returns the indices
  std::mt19937_64 rng(32);
  Tensor cb = random_tensor<float>({8, 4}, rng);
  std::vector<int> idx = {3, 1, 7, 0, 3};
  Tensor rows = dequantize(idx, cb);
  auto [idx2, rows2] = quantize_nearest(rows, cb);
  CHECK(idx2 == idx);

  Tensor empty = dequantize({}, cb);
  CHECK(empty.dim(0) == 0);

  CHECK_THROWS_AS(dequantize({9}, cb), CorruptMessageError);
}

TEST_CASE("straight_through_compose forwards e_d and passes gradient to e_c") {
  // identity decoder, target x=1, E_c=0.3 quantized onto codebook {0,1}
  Tensor codebook({2, 1}, {0.0f, 1.0f});
  auto e_c = make_param(Tensor({1, 1}, {0.3f}));
  auto [idx, e_d] = quantize_nearest(e_c->value, codebook);
  CHECK(idx[0] == 0);
  auto st = straight_through_compose(e_c, e_d);
  CHECK(st->value[0] == 0.0f);
  auto target = make_const(Tensor({1, 1}, {1.0f}));
  auto loss = mse_norm(target, st);
  CHECK(loss->value[0] == doctest::Approx(1.0f));  // (0-1)^2
  backward(loss);
  CHECK(e_c->grad[0] == doctest::Approx(-2.0f));

  // e_c already quantized: forward unchanged
  auto fixed = make_param(Tensor({1, 1}, {1.0f}));
  auto st2 = straight_through_compose(fixed, dequantize({1}, codebook));
  CHECK(st2->value[0] == 1.0f);

  auto wrong = make_param(Tensor({2, 1}));
  CHECK_THROWS_AS(straight_through_compose(wrong, e_d), InputError);
}

TEST_CASE("straight-through gradient equals the decoder-input gradient") {
  // autodiff cross-check: the gradient reaching e_c through the composed
  // path must equal the gradient w.r.t. a leaf holding the quantized value
  // fed straight into the same decoder
  std::mt19937_64 rng(33);
  Tensor w = random_tensor<float>({3, 4}, rng);
  Tensor target = random_tensor<float>({3}, rng);
  Tensor e_d = random_tensor<float>({4}, rng);

  auto e_c = make_param(random_tensor<float>({4}, rng));
  auto st = straight_through_compose(e_c, e_d);
  backward(mse_norm(make_const(target), dense(st, make_const(w), NodeRef<float>{})));

  auto direct = make_param(e_d);
  backward(mse_norm(make_const(target), dense(direct, make_const(w), NodeRef<float>{})));

  for (int j = 0; j < 4; ++j) {
    CHECK(e_c->grad[j] == direct->grad[j]);
  }
}

TEST_CASE("codebook_loss value and gradient routing") {
  // E_c=(1,1), selected entry (0,0): loss 2, d/dc = (-2,-2)
  auto codebook = make_param(Tensor({3, 2}, {0, 0, 5, 5, -7, 2}));
  Tensor e_c({1, 2}, {1, 1});
  auto loss = codebook_loss(e_c, {0}, codebook);
  CHECK(loss->value[0] == doctest::Approx(2.0f));
  backward(loss);
  CHECK(codebook->grad.at2(0, 0) == doctest::Approx(-2.0f));
  CHECK(codebook->grad.at2(0, 1) == doctest::Approx(-2.0f));
  // unselected entries receive exactly zero
  for (int i = 1; i < 3; ++i) {
    CHECK(codebook->grad.at2(i, 0) == 0.0f);
    CHECK(codebook->grad.at2(i, 1) == 0.0f);
  }

  // selected entry equal to E_c gives zero loss
  Tensor match({1, 2}, {5, 5});
  CHECK(codebook_loss(match, {1}, codebook)->value[0] == 0.0f);
}

TEST_CASE("commitment_loss") {
  auto e_c = make_param(Tensor({1, 2}, {1, 1}));
  Tensor e_d({1, 2}, {0, 0});
  CHECK(commitment_loss(e_c, e_d, 0.5f)->value[0] == doctest::Approx(1.0f));
  CHECK(commitment_loss(e_c, e_d, 0.0f)->value[0] == 0.0f);
  CHECK(commitment_loss(e_c, e_c->value, 0.5f)->value[0] == 0.0f);
  CHECK_THROWS_AS(commitment_loss(e_c, e_d, -1.0f), InputError);

  // gradient reaches e_c only (e_d is plain data, nothing else to reach)
  auto loss = commitment_loss(e_c, e_d, 0.5f);
  backward(loss);
  CHECK(e_c->grad[0] == doctest::Approx(1.0f));  // 0.5 * 2 * (1-0)
}

TEST_CASE("codebook_loss and commitment_loss agree at lambda=1") {
  std::mt19937_64 rng(34);
  auto codebook = make_param(random_tensor<float>({6, 3}, rng));
  Tensor latent = random_tensor<float>({4, 3}, rng);
  auto [idx, e_d_rows] = quantize_nearest(latent, codebook->value);

  auto lc = codebook_loss(latent, idx, codebook);
  auto e_c_node = make_param(latent);
  auto le = commitment_loss(e_c_node, e_d_rows, 1.0f);
  CHECK(lc->value[0] == doctest::Approx(le->value[0]).epsilon(1e-6));
}

TEST_CASE("codebook_init") {
  auto cb1 = codebook_init<float>(16, 4, 99);
  auto cb2 = codebook_init<float>(16, 4, 99);
  CHECK(cb1.size() == 16);
  CHECK(cb1.dim() == 4);
  for (std::int64_t i = 0; i < cb1.entries.numel(); ++i) {
    CHECK(cb1.entries[i] == cb2.entries[i]);
    CHECK(std::abs(cb1.entries[i]) <= 1.0f / 16.0f);
  }
  auto cb3 = codebook_init<float>(16, 4, 100);
  bool any_diff = false;
  for (std::int64_t i = 0; i < cb3.entries.numel(); ++i) {
    any_diff = any_diff || cb3.entries[i] != cb1.entries[i];
  }
  CHECK(any_diff);

  auto big = codebook_init<float>(256, 256, 1);
  CHECK(big.entries.shape() == Shape{256, 256});

  CHECK_THROWS_AS(codebook_init<float>(0, 4, 1), ConfigError);
}

TEST_CASE("one VQ gradient step does not increase quantization distance") {
  std::mt19937_64 rng(35);
  auto codebook = make_param(random_tensor<float>({12, 6}, rng));
  Tensor latent = random_tensor<float>({30, 6}, rng);
  auto [idx, e_d] = quantize_nearest(latent, codebook->value);

  auto dist_to = [&](const Tensor& cb) {
    double total = 0;
    Tensor rows = dequantize(idx, cb);
    for (std::int64_t i = 0; i < rows.numel(); ++i) {
      const double d = static_cast<double>(latent[i]) - rows[i];
      total += d * d;
    }
    return total;
  };
  const double before = dist_to(codebook->value);
  auto loss = codebook_loss(latent, idx, codebook);
  backward(loss);
  Tensor velocity({12, 6});
  sgd_momentum_update(codebook->value, codebook->grad, velocity, 1e-3f, 0.0f);
  CHECK(dist_to(codebook->value) <= before);
}
