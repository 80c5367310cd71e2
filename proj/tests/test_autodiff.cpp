#include <doctest.h>

#include <cmath>

#include "subseg/autodiff.hpp"
#include "subseg/rng.hpp"
#include "test_helpers.hpp"

using namespace subseg;
using namespace subseg::ad;
using subseg::testing::max_grad_err;
using subseg::testing::random_tensor;

namespace {

Var leaf(Tensor t) { return Var::param(std::move(t)); }

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(11);
  Var a = leaf(random_tensor({3, 4}, rng));
  Var b = leaf(random_tensor({3, 4}, rng));

  CHECK(max_grad_err({a, b}, [&] { return mean_all(mul(add(a, b), sub(a, b))); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(gelu(a)); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(tanh_op(a)); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(sigmoid_op(a)); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return sum_all(scalar_add(scalar_mul(a, 1.7), 0.3)); }) < 1e-7);
}

TEST_CASE("scale_by routes gradients to both scalar and tensor") {
  Rng rng(12);
  Var s = leaf(Tensor::scalar(0.37));
  Var x = leaf(random_tensor({2, 5}, rng));
  CHECK(max_grad_err({s, x}, [&] { return mean_all(scale_by(s, x)); }) < 1e-7);
}

TEST_CASE("matmul, transpose and bias broadcast match finite differences") {
  Rng rng(13);
  Var a = leaf(random_tensor({3, 4}, rng));
  Var b = leaf(random_tensor({4, 2}, rng));
  Var bias = leaf(random_tensor({2}, rng));
  CHECK(max_grad_err({a, b, bias}, [&] {
          return mean_all(add_row(matmul(a, b), bias));
        }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(transpose(a)); }) < 1e-7);
}

TEST_CASE("shape ops preserve gradients") {
  Rng rng(14);
  Var a = leaf(random_tensor({4, 6}, rng));
  Var b = leaf(random_tensor({2, 6}, rng));
  CHECK(max_grad_err({a}, [&] { return mean_all(reshape_copy(a, {2, 12})); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(slice_rows(a, 1, 2)); }) < 1e-7);
  CHECK(max_grad_err({a}, [&] { return mean_all(slice_cols(a, 2, 3)); }) < 1e-7);
  CHECK(max_grad_err({a, b}, [&] {
          return mean_all(concat_rows({a, b}));
        }) < 1e-7);
  Var c = leaf(random_tensor({4, 3}, rng));
  CHECK(max_grad_err({a, c}, [&] { return mean_all(concat_cols({a, c})); }) < 1e-7);
}

TEST_CASE("softmax and layernorm match finite differences") {
  Rng rng(15);
  Var x = leaf(random_tensor({3, 5}, rng));
  Var g = leaf(random_tensor({5}, rng, 0.5, 1.5));
  Var be = leaf(random_tensor({5}, rng));
  Var w = leaf(random_tensor({5}, rng));
  CHECK(max_grad_err({x, w}, [&] {
          return mean_all(mul(softmax_rows(x), concat_rows({reshape_copy(w, {1, 5}),
                                                            reshape_copy(w, {1, 5}),
                                                            reshape_copy(w, {1, 5})})));
        }) < 1e-6);
  CHECK(max_grad_err({x, g, be}, [&] {
          return mean_all(mul(layernorm_rows(x, g, be), layernorm_rows(x, g, be)));
        }) < 1e-6);
  Var e = leaf(random_tensor({4}, rng));
  Var wv = leaf(random_tensor({4}, rng));
  CHECK(max_grad_err({e, wv}, [&] {
          return sum_all(mul(softmax_vec_canonical(e), wv));
        }) < 1e-6);
}

TEST_CASE("gap reduces spatially and matches finite differences") {
  Rng rng(16);
  Var x = leaf(random_tensor({3, 4, 5}, rng));
  Var w = leaf(random_tensor({3}, rng));
  CHECK(max_grad_err({x, w}, [&] { return sum_all(mul(gap_chw(x), w)); }) < 1e-7);
}

TEST_CASE("conv2d matches finite differences for stride and padding variants") {
  Rng rng(17);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{2, 0}}) {
    Var x = leaf(random_tensor({2, 6, 6}, rng));
    Var w = leaf(random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
    Var b = leaf(random_tensor({3}, rng));
    CHECK(max_grad_err({x, w, b}, [&, s = stride, p = pad] {
            return mean_all(conv2d(x, w, b, s, p));
          }) < 1e-6);
  }
  Var x = leaf(random_tensor({2, 6, 6}, rng));
  Var w = leaf(random_tensor({3, 2, 2, 2}, rng, -0.5, 0.5));
  Var b = leaf(random_tensor({3}, rng));
  CHECK(max_grad_err({x, w, b}, [&] { return mean_all(conv2d(x, w, b, 2, 0)); }) < 1e-6);
}

TEST_CASE("upconv2x doubles resolution and matches finite differences") {
  Rng rng(18);
  Var x = leaf(random_tensor({3, 4, 4}, rng));
  Var w = leaf(random_tensor({3, 2, 2, 2}, rng, -0.5, 0.5));
  Var b = leaf(random_tensor({2}, rng));
  Var out = upconv2x(x, w, b);
  CHECK(out.value().dims == std::vector<long>{2, 8, 8});
  CHECK(max_grad_err({x, w, b}, [&] { return mean_all(upconv2x(x, w, b)); }) < 1e-6);
}

TEST_CASE("bilinear upsampling interpolates and matches finite differences") {
  Rng rng(19);
  Var x = leaf(random_tensor({2, 3, 3}, rng));
  Var c = Var::constant(Tensor::full({2, 4, 4}, 0.7));
  SUBCASE("constant input stays constant") {
    Var flat = Var::constant(Tensor::full({1, 3, 3}, 2.5));
    Var up = upsample_bilinear(flat, 9, 9);
    for (double v : up.value().data) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
  }
  SUBCASE("gradients match") {
    CHECK(max_grad_err({x}, [&] { return mean_all(upsample_bilinear(x, 7, 5)); }) < 1e-7);
  }
  (void)c;
}

TEST_CASE("loss primitives match finite differences") {
  Rng rng(20);
  Var logits = leaf(random_tensor({4, 4}, rng, -2.0, 2.0));
  Tensor target({4, 4});
  for (double& v : target.data) v = rng.below(2) ? 1.0 : 0.0;
  CHECK(max_grad_err({logits}, [&] { return bce_logits_mean(logits, target); }) < 1e-7);
  CHECK(max_grad_err({logits}, [&] { return soft_dice_loss(logits, target, 1.0); }) < 1e-7);
}

TEST_CASE("fuse_convex stays in bounds and matches finite differences") {
  Rng rng(21);
  Var alpha = leaf(Tensor::from({3}, {0.2, 0.5, 0.3}));
  std::vector<Var> maps;
  for (int m = 0; m < 3; ++m) maps.push_back(leaf(random_tensor({2, 3, 3}, rng)));
  Var fused = fuse_convex(alpha, maps);
  for (long i = 0; i < fused.value().numel(); ++i) {
    double lo = maps[0].value()[i], hi = lo;
    for (int m = 1; m < 3; ++m) {
      lo = std::min(lo, maps[m].value()[i]);
      hi = std::max(hi, maps[m].value()[i]);
    }
    CHECK(fused.value()[i] >= lo);
    CHECK(fused.value()[i] <= hi);
  }
  std::vector<Var> leaves{alpha, maps[0], maps[1], maps[2]};
  CHECK(max_grad_err(leaves, [&] { return mean_all(fuse_convex(alpha, maps)); }) < 1e-7);
}

TEST_CASE("no-grad mode records nothing") {
  Var p = leaf(Tensor::scalar(2.0));
  ad::Var y;
  {
    NoGradGuard guard;
    y = scalar_mul(p, 3.0);
  }
  CHECK(!y.requires_grad());
  CHECK(y.value()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward accumulates through shared subexpressions") {
  Var p = leaf(Tensor::scalar(1.5));
  Var y = add(mul(p, p), scalar_mul(p, 2.0));  // p^2 + 2p, dy/dp = 2p + 2
  p.zero_grad();
  backward(y);
  CHECK(p.grad()[0] == doctest::Approx(2.0 * 1.5 + 2.0).epsilon(1e-12));
}
