#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <tuple>

#include "efi/autograd.hpp"
#include "efi/parallel.hpp"
#include "test_util.hpp"

using namespace efi;
using test::grad_check;
using test::random_tensor;

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor({2}, {1.0f, 2.0f, 3.0f}), InputError);
  Tensor empty({0, 5});
  CHECK(empty.numel() == 0);
}

TEST_CASE("conv2d hand examples") {
  // one row: [1,2,3] * [1,1] -> [3,5]
  auto x = make_param(Tensor({1, 1, 3}, {1, 2, 3}));
  auto k = make_param(Tensor({1, 1, 1, 2}, {1, 1}));
  auto y = conv2d(x, k, 1, 1);
  REQUIRE(y->value.shape() == Shape{1, 1, 2});
  CHECK(y->value[0] == doctest::Approx(3.0f));
  CHECK(y->value[1] == doctest::Approx(5.0f));

  // scalar kernel of value 1 is the identity
  auto k1 = make_param(Tensor({1, 1, 1, 1}, {1}));
  auto y1 = conv2d(x, k1, 1, 1);
  for (int i = 0; i < 3; ++i) CHECK(y1->value[i] == x->value[i]);

  // output shape formula on the full-size geometry
  auto big = make_const(Tensor({3, 114, 500}));
  auto bigk = make_const(Tensor({32, 3, 15, 23}));
  CHECK(conv2d(big, bigk, 9, 9)->value.shape() == Shape{32, 12, 54});

  // channel mismatch
  auto badk = make_const(Tensor({4, 2, 1, 1}));
  CHECK_THROWS_AS(conv2d(x, badk, 1, 1), ConfigError);
  // kernel larger than input
  auto hugek = make_const(Tensor({1, 1, 1, 7}));
  CHECK_THROWS_AS(conv2d(x, hugek, 1, 1), ConfigError);
}

TEST_CASE("conv_transpose2d hand examples") {
  // single-pixel stamp: [1] against kernel [1,2,3]
  auto x = make_param(Tensor({1, 1, 1}, {1}));
  auto k = make_param(Tensor({1, 1, 1, 3}, {1, 2, 3}));
  auto y = conv_transpose2d(x, k, 1, 1);
  REQUIRE(y->value.shape() == Shape{1, 1, 3});
  CHECK(y->value[0] == doctest::Approx(1.0f));
  CHECK(y->value[1] == doctest::Approx(2.0f));
  CHECK(y->value[2] == doctest::Approx(3.0f));

  // (n-1)*s + k arithmetic back to (114,500)
  auto z = make_const(Tensor({2, 12, 54}));
  auto kt = make_const(Tensor({2, 1, 15, 23}));
  CHECK(conv_transpose2d(z, kt, 9, 9)->value.shape() == Shape{1, 114, 500});

  auto badk = make_const(Tensor({5, 1, 2, 2}));
  CHECK_THROWS_AS(conv_transpose2d(z, badk, 1, 1), ConfigError);
}

TEST_CASE("conv gradients vs finite differences (float32)") {
  std::mt19937_64 rng(11);
  auto x = make_param(random_tensor<float>({1, 2, 4, 5}, rng, -0.5, 0.5));
  auto k = make_param(random_tensor<float>({2, 2, 2, 3}, rng, -0.5, 0.5));
  auto forward = [&] { return sum_squares(conv2d(x, k, 1, 2)); };
  auto rx = grad_check<float>(x, forward, 1e-3, 40, rng);
  CHECK(rx.checked > 0);
  CHECK(rx.max_rel_err < 1e-3);
  auto rk = grad_check<float>(k, forward, 1e-3, 40, rng);
  CHECK(rk.max_rel_err < 1e-3);
}

TEST_CASE("conv_transpose composed with conv vs finite differences") {
  std::mt19937_64 rng(12);
  auto x = make_param(random_tensor<float>({1, 4, 5}, rng, -0.5, 0.5));
  auto k = make_param(random_tensor<float>({2, 1, 2, 2}, rng, -0.5, 0.5));
  auto kt = make_param(random_tensor<float>({2, 1, 2, 2}, rng, -0.5, 0.5));
  auto forward = [&] { return sum_squares(conv_transpose2d(conv2d(x, k, 1, 1), kt, 1, 1)); };
  for (auto& leaf : {x, k, kt}) {
    auto r = grad_check<float>(leaf, forward, 1e-3, 30, rng);
    CHECK(r.max_rel_err < 1e-3);
  }
}

TEST_CASE("conv64 gradients in double precision") {
  std::mt19937_64 rng(13);
  auto x = make_param(random_tensor<double>({2, 3, 6, 7}, rng));
  auto k = make_param(random_tensor<double>({4, 3, 3, 3}, rng));
  auto forward = [&] { return sum_squares(conv2d(x, k, 2, 2)); };
  CHECK(grad_check<double>(x, forward, 1e-5, 40, rng).max_rel_err < 1e-6);
  CHECK(grad_check<double>(k, forward, 1e-5, 40, rng).max_rel_err < 1e-6);
}

TEST_CASE("maxpool values, argmax and gradient routing") {
  auto x = make_param(Tensor({1, 1, 4}, {1, 3, 2, 4}));
  auto [y, map] = maxpool2d_with_argmax(x, 1, 2, 1, 2);
  REQUIRE(y->value.shape() == Shape{1, 1, 2});
  CHECK(y->value[0] == 3.0f);
  CHECK(y->value[1] == 4.0f);
  REQUIRE(map.plane_index.size() == 2);
  CHECK(map.plane_index[0] == 1);
  CHECK(map.plane_index[1] == 3);

  // ties keep the lowest linear index
  auto c = make_param(Tensor::filled({1, 1, 4}, 7.0f));
  auto [cy, cmap] = maxpool2d_with_argmax(c, 1, 2, 1, 2);
  CHECK(cmap.plane_index[0] == 0);
  CHECK(cmap.plane_index[1] == 2);

  // gradient of sum(pool(x)) is 1 exactly at argmax positions
  auto loss = sum(y);
  backward(loss);
  CHECK(x->grad[0] == 0.0f);
  CHECK(x->grad[1] == 1.0f);
  CHECK(x->grad[2] == 0.0f);
  CHECK(x->grad[3] == 1.0f);

  auto big = make_const(Tensor({1, 2, 2}));
  CHECK_THROWS_AS(maxpool2d_with_argmax(big, 3, 3, 1, 1), ConfigError);
}

TEST_CASE("maxpool gradient is a one-per-window routing mask") {
  std::mt19937_64 rng(14);
  auto x = make_param(random_tensor<float>({2, 3, 4, 6}, rng));
  auto [y, map] = maxpool2d_with_argmax(x, 2, 2, 2, 2);
  backward(sum(y));
  int ones = 0;
  for (std::int64_t i = 0; i < x->grad.numel(); ++i) {
    CHECK((x->grad[i] == 0.0f || x->grad[i] == 1.0f));
    if (x->grad[i] == 1.0f) ++ones;
  }
  CHECK(ones == y->value.numel());
}

TEST_CASE("max_unpool2d fixed placement") {
  auto x = make_param(Tensor({1, 1, 2}, {3, 4}));
  auto y = max_unpool2d_fixed(x, 1, 2, 1, 2);
  REQUIRE(y->value.shape() == Shape{1, 1, 4});
  CHECK(y->value[0] == 3.0f);
  CHECK(y->value[1] == 0.0f);
  CHECK(y->value[2] == 4.0f);
  CHECK(y->value[3] == 0.0f);

  auto z = make_const(Tensor({2, 3, 3}));
  auto zy = max_unpool2d_fixed(z, 1, 2, 1, 2);
  for (std::int64_t i = 0; i < zy->value.numel(); ++i) CHECK(zy->value[i] == 0.0f);

  // pool recovers the input after unpool when values are nonnegative
  std::mt19937_64 rng(15);
  auto v = make_const(random_tensor<float>({1, 2, 4}, rng, 0.0, 2.0));
  auto up = max_unpool2d_fixed(v, 1, 2, 1, 2);
  auto [down, map] = maxpool2d_with_argmax(up, 1, 2, 1, 2);
  for (std::int64_t i = 0; i < v->value.numel(); ++i) CHECK(down->value[i] == v->value[i]);
}

TEST_CASE("dense layer") {
  auto id = make_param(Tensor({2, 2}, {1, 0, 0, 1}));
  auto b0 = make_param(Tensor({2}));
  auto x = make_param(Tensor({2}, {5, -3}));
  auto y = dense(x, id, b0);
  CHECK(y->value[0] == 5.0f);
  CHECK(y->value[1] == -3.0f);

  auto w = make_param(Tensor({2, 2}, {1, 2, 3, 4}));
  auto ones = make_param(Tensor({2}, {1, 1}));
  auto y2 = dense(ones, w, b0);
  CHECK(y2->value[0] == doctest::Approx(3.0f));
  CHECK(y2->value[1] == doctest::Approx(7.0f));

  auto badw = make_param(Tensor({2, 3}));
  CHECK_THROWS_AS(dense(x, badw, b0), ConfigError);

  std::mt19937_64 rng(16);
  auto bx = make_param(random_tensor<float>({3, 5}, rng, -0.5, 0.5));
  auto bw = make_param(random_tensor<float>({4, 5}, rng, -0.5, 0.5));
  auto bb = make_param(random_tensor<float>({4}, rng, -0.5, 0.5));
  auto forward = [&] { return sum_squares(dense(bx, bw, bb)); };
  for (auto& leaf : {bx, bw, bb}) {
    CHECK(grad_check<float>(leaf, forward, 1e-3, 30, rng).max_rel_err < 1e-3);
  }
}

TEST_CASE("relu") {
  auto x = make_param(Tensor({3}, {-1, 0, 2}));
  auto y = relu(x);
  CHECK(y->value[0] == 0.0f);
  CHECK(y->value[1] == 0.0f);
  CHECK(y->value[2] == 2.0f);
  backward(sum(y));
  CHECK(x->grad[0] == 0.0f);
  CHECK(x->grad[1] == 0.0f);  // subgradient at zero is zero
  CHECK(x->grad[2] == 1.0f);

  auto neg = make_param(Tensor({3}, {-5, -1, -2}));
  auto yn = relu(neg);
  backward(sum(yn));
  for (int i = 0; i < 3; ++i) {
    CHECK(yn->value[i] == 0.0f);
    CHECK(neg->grad[i] == 0.0f);
  }

  auto pos = make_param(Tensor({3}, {5, 1, 2}));
  auto yp = relu(pos);
  backward(sum(yp));
  for (int i = 0; i < 3; ++i) {
    CHECK(yp->value[i] == pos->value[i]);
    CHECK(pos->grad[i] == 1.0f);
  }
}

TEST_CASE("softmax cross-entropy") {
  auto uniform = make_param(Tensor({6}));
  auto l1 = softmax_crossentropy(uniform, {0});
  CHECK(l1->value[0] == doctest::Approx(std::log(6.0)).epsilon(1e-5));

  auto two = make_param(Tensor({2}, {1, 0}));
  auto l2 = softmax_crossentropy(two, {0});
  CHECK(l2->value[0] == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-5));

  auto confident = make_param(Tensor({3}, {100, 0, 0}));
  auto l3 = softmax_crossentropy(confident, {0});
  CHECK(l3->value[0] < 1e-6);

  CHECK_THROWS_AS(softmax_crossentropy(two, {2}), InputError);
  CHECK_THROWS_AS(softmax_crossentropy(two, {-1}), InputError);

  std::mt19937_64 rng(17);
  auto logits = make_param(random_tensor<float>({4, 5}, rng));
  auto forward = [&] { return softmax_crossentropy(logits, {1, 0, 4, 2}); };
  CHECK(grad_check<float>(logits, forward, 1e-3, 20, rng).max_rel_err < 1e-3);
}

TEST_CASE("mse_norm") {
  auto a = make_param(Tensor({2}, {1, 2}));
  auto b = make_param(Tensor({2}, {0, 0}));
  CHECK(mse_norm(a, b)->value[0] == doctest::Approx(5.0f));
  CHECK(mse_norm(b, a)->value[0] == doctest::Approx(5.0f));  // symmetric
  CHECK(mse_norm(a, a)->value[0] == 0.0f);

  auto c = make_param(Tensor({3}));
  CHECK_THROWS_AS(mse_norm(a, c), InputError);

  // batch averaging: two identical rows give the per-row sum
  auto x = make_param(Tensor({2, 2}, {1, 2, 1, 2}));
  auto y = make_param(Tensor({2, 2}, {0, 0, 0, 0}));
  CHECK(mse_norm(x, y)->value[0] == doctest::Approx(5.0f));

  std::mt19937_64 rng(18);
  auto u = make_param(random_tensor<float>({3, 4}, rng));
  auto v = make_param(random_tensor<float>({3, 4}, rng));
  auto forward = [&] { return mse_norm(u, v); };
  CHECK(grad_check<float>(u, forward, 1e-3, 12, rng).max_rel_err < 1e-3);
  CHECK(grad_check<float>(v, forward, 1e-3, 12, rng).max_rel_err < 1e-3);
}

TEST_CASE("stop_gradient semantics") {
  std::mt19937_64 rng(19);
  auto x = make_param(random_tensor<float>({7}, rng));
  auto sg = stop_gradient(x);
  for (std::int64_t i = 0; i < x->value.numel(); ++i) {
    CHECK(std::memcmp(&sg->value[i], &x->value[i], sizeof(float)) == 0);  // bit-for-bit
  }
  CHECK_FALSE(sg->requires_grad);

  // a loss made only of sg(x) has no parameters left to differentiate
  CHECK_THROWS_AS(backward(sum(sg)), UsageError);

  // sg contributes zero gradient where x also enters directly
  auto mixed = add(sum(stop_gradient(x)), sum(x));
  backward(mixed);
  for (std::int64_t i = 0; i < x->value.numel(); ++i) CHECK(x->grad[i] == 1.0f);

  // straight-through pattern: d(sum(x + sg(y-x)))/dx = 1, /dy = 0
  auto y = make_param(random_tensor<float>({7}, rng));
  auto composed = add(x, stop_gradient(sub(y, x)));
  for (std::int64_t i = 0; i < y->value.numel(); ++i) {
    CHECK(composed->value[i] == doctest::Approx(y->value[i]));
  }
  backward(sum(composed));
  for (std::int64_t i = 0; i < x->value.numel(); ++i) {
    CHECK(x->grad[i] == 1.0f);
  }
  // y only entered through the stopped branch, so it never receives any
  // gradient at all
  CHECK(y->grad.numel() == 0);
}

TEST_CASE("backward basics and accumulation") {
  auto x = make_param(Tensor({1}, {1.0f}));
  auto sq = sum_squares(x);  // x^2 at x=1
  backward(sq);
  CHECK(x->grad[0] == doctest::Approx(2.0f));

  auto doubled = add(x, x);  // x + x
  backward(sum(doubled));
  CHECK(x->grad[0] == doctest::Approx(2.0f));

  auto mat = make_param(Tensor({2, 2}));
  CHECK_THROWS_AS(backward(mat), UsageError);  // non-scalar loss
}

TEST_CASE("small encoder-decoder chain vs finite differences") {
  std::mt19937_64 rng(21);
  auto x = make_param(random_tensor<double>({1, 3, 6, 10}, rng));
  auto k1 = make_param(random_tensor<double>({4, 3, 3, 3}, rng, -0.4, 0.4));
  auto b1 = make_param(random_tensor<double>({4}, rng, -0.1, 0.1));
  auto kt = make_param(random_tensor<double>({4, 3, 3, 3}, rng, -0.4, 0.4));
  auto target = make_const(random_tensor<double>({1, 3, 6, 10}, rng));
  auto forward = [&] {
    auto h = relu(bias_channels(conv2d(x, k1, 1, 1), b1));
    auto pooled = maxpool2d_with_argmax(h, 1, 2, 1, 2).first;
    auto up = max_unpool2d_fixed(pooled, 1, 2, 1, 2);
    auto rec = conv_transpose2d(up, kt, 1, 1);
    return mse_norm(target, rec);
  };
  for (auto& leaf : {x, k1, kt}) {
    auto r = grad_check<double>(leaf, forward, 1e-5, 25, rng);
    CHECK(r.max_rel_err < 1e-6);
  }
  CHECK(grad_check<double>(b1, forward, 1e-5, 4, rng).max_rel_err < 1e-6);
}

TEST_CASE("sgd momentum update") {
  Tensor p({1}, {1.0f});
  Tensor g({1}, {1.0f});
  Tensor v({1});
  sgd_momentum_update(p, g, v, 0.1f, 0.9f);
  CHECK(v[0] == doctest::Approx(1.0f));
  CHECK(p[0] == doctest::Approx(0.9f));
  sgd_momentum_update(p, g, v, 0.1f, 0.9f);
  CHECK(v[0] == doctest::Approx(1.9f));
  CHECK(p[0] == doctest::Approx(0.71f));

  // zero gradient leaves parameters unchanged
  Tensor p2({3}, {1, 2, 3});
  Tensor g2({3});
  Tensor v2({3});
  sgd_momentum_update(p2, g2, v2, 0.5f, 0.0f);
  CHECK(p2[0] == 1.0f);
  CHECK(p2[1] == 2.0f);
  CHECK(p2[2] == 3.0f);
}

TEST_CASE("forward and backward are deterministic and thread-count independent") {
  std::mt19937_64 rng(22);
  Tensor xv = random_tensor<float>({2, 3, 8, 9}, rng);
  Tensor kv = random_tensor<float>({4, 3, 3, 3}, rng);

  auto run = [&](int threads) {
    set_max_threads(threads);
    auto x = make_param(xv);
    auto k = make_param(kv);
    auto loss = sum_squares(conv2d(x, k, 1, 1));
    backward(loss);
    set_max_threads(0);
    return std::tuple{loss->value[0], x->grad, k->grad};
  };
  auto [l1, gx1, gk1] = run(1);
  auto [l2, gx2, gk2] = run(2);
  CHECK(std::memcmp(&l1, &l2, sizeof(float)) == 0);
  CHECK(std::memcmp(gx1.data(), gx2.data(), gx1.numel() * sizeof(float)) == 0);
  CHECK(std::memcmp(gk1.data(), gk2.data(), gk1.numel() * sizeof(float)) == 0);
}

TEST_CASE("no-grad mode produces plain constants") {
  auto x = make_param(Tensor({2}, {1, 2}));
  NodeRef<float> y;
  {
    NoGradGuard ng;
    y = relu(x);
  }
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
}
