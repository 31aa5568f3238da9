#include <doctest.h>

#include "ckd/nn.hpp"
#include "ckd/optim.hpp"

#include <cmath>
#include <functional>

using namespace ckd;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(scale * rng.normal());
  return t;
}

/// Central finite differences of a scalar loss wrt every layer input and
/// parameter, compared with the analytic backward.
void check_layer_gradients(Layer& layer, const Tensor& x0, double tol = 2e-2, double eps = 1e-2) {
  // Scalar loss: weighted sum of outputs, weights fixed by index.
  auto loss_of = [&](const Tensor& y) {
    double s = 0.0;
    for (std::int64_t i = 0; i < y.size(); ++i) {
      s += y[i] * std::sin(0.137 * static_cast<double>(i + 1));
    }
    return s;
  };

  Tensor x = x0;
  Tensor y = layer.forward(x, /*train=*/true);
  Tensor dy(y.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i) {
    dy[i] = static_cast<float>(std::sin(0.137 * static_cast<double>(i + 1)));
  }
  std::vector<Param*> params;
  layer.collect_params(params);
  zero_grads(params);
  Tensor dx = layer.backward(dy);

  auto check_close = [&](double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    CHECK(std::abs(analytic - numeric) / denom < tol);
  };

  // Input gradient, spot-checked on a stride through the tensor.
  const std::int64_t stride_x = std::max<std::int64_t>(1, x.size() / 23);
  for (std::int64_t i = 0; i < x.size(); i += stride_x) {
    Tensor xp = x0, xm = x0;
    xp[i] += static_cast<float>(eps);
    xm[i] -= static_cast<float>(eps);
    const double lp = loss_of(layer.forward(xp, true));
    const double lm = loss_of(layer.forward(xm, true));
    check_close(dx[i], (lp - lm) / (2 * eps));
  }

  // Parameter gradients. Re-run forward/backward to restore caches for x0.
  layer.forward(x, true);
  zero_grads(params);
  layer.backward(dy);
  for (Param* p : params) {
    const std::int64_t stride_p = std::max<std::int64_t>(1, p->value.size() / 17);
    for (std::int64_t i = 0; i < p->value.size(); i += stride_p) {
      const float saved = p->value[i];
      p->value[i] = saved + static_cast<float>(eps);
      const double lp = loss_of(layer.forward(x, true));
      p->value[i] = saved - static_cast<float>(eps);
      const double lm = loss_of(layer.forward(x, true));
      p->value[i] = saved;
      check_close(p->grad[i], (lp - lm) / (2 * eps));
    }
  }
  // Leave the layer caches consistent.
  layer.forward(x, true);
}

}  // namespace

TEST_CASE("conv2d gradient check (dense, stride 1 and 2, bias)") {
  Rng rng(11);
  Conv2d conv(3, 5, 3, 1, 1, true, rng);
  check_layer_gradients(conv, random_tensor({2, 3, 6, 6}, rng));

  Conv2d strided(4, 6, 3, 2, 1, false, rng);
  check_layer_gradients(strided, random_tensor({2, 4, 7, 7}, rng));

  Conv2d one_by_one(4, 2, 1, 2, 0, false, rng);
  check_layer_gradients(one_by_one, random_tensor({3, 4, 6, 6}, rng));
}

TEST_CASE("conv2d gradient check (depthwise)") {
  Rng rng(12);
  Conv2d dw(4, 4, 3, 1, 1, true, rng, /*depthwise=*/true);
  check_layer_gradients(dw, random_tensor({2, 4, 5, 5}, rng));
  Conv2d dw2(3, 3, 3, 2, 1, false, rng, /*depthwise=*/true);
  check_layer_gradients(dw2, random_tensor({2, 3, 8, 8}, rng));
}

TEST_CASE("depthwise conv requires matching channels") {
  Rng rng(1);
  CHECK_THROWS_AS(Conv2d(4, 8, 3, 1, 1, false, rng, true), ShapeError);
}

TEST_CASE("batchnorm gradient check and running stats") {
  Rng rng(13);
  BatchNorm2d bn(4);
  check_layer_gradients(bn, random_tensor({3, 4, 5, 5}, rng, 2.0));

  // Eval mode uses running statistics and is a pure function.
  BatchNorm2d bn2(2);
  Tensor x = random_tensor({8, 2, 4, 4}, rng);
  bn2.forward(x, true);
  Tensor y1 = bn2.forward(x, false);
  Tensor y2 = bn2.forward(x, false);
  for (std::int64_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
  CHECK_THROWS_AS(bn2.backward(y1), Error);
}

TEST_CASE("linear gradient check") {
  Rng rng(14);
  Linear fc(7, 4, true, rng);
  check_layer_gradients(fc, random_tensor({3, 7}, rng));
}

TEST_CASE("relu, sigmoid, pooling, resize gradient checks") {
  Rng rng(15);
  ReLU relu;
  // Keep inputs away from the kink at 0 so central differences are valid.
  Tensor relu_in({2, 3, 4, 4});
  for (auto& v : relu_in.vec()) {
    const double z = rng.normal();
    v = static_cast<float>(z >= 0 ? z + 0.1 : z - 0.1);
  }
  check_layer_gradients(relu, relu_in);
  Sigmoid sig;
  check_layer_gradients(sig, random_tensor({2, 3, 3, 3}, rng));
  GlobalAvgPool gap;
  check_layer_gradients(gap, random_tensor({2, 5, 4, 4}, rng));
  BilinearResize up(9, 9);
  check_layer_gradients(up, random_tensor({2, 3, 4, 4}, rng));
  BilinearResize down(3, 3);
  check_layer_gradients(down, random_tensor({2, 2, 8, 8}, rng));
}

TEST_CASE("bilinear resize interpolates linear ramps exactly in the interior") {
  Tensor x({1, 1, 4, 4});
  for (int h = 0; h < 4; ++h) {
    for (int w = 0; w < 4; ++w) x.at(0, 0, h, w) = static_cast<float>(w);
  }
  BilinearResize up(8, 8);
  Tensor y = up.forward(x, false);
  // Half-pixel mapping keeps row ramps monotone.
  for (int w = 1; w < 8; ++w) CHECK(y.at(0, 0, 4, w) >= y.at(0, 0, 4, w - 1));
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(0.0f));
  CHECK(y.at(0, 0, 7, 7) == doctest::Approx(3.0f));
}

TEST_CASE("softmax cross-entropy batch matches closed forms") {
  Tensor logits({2, 3});
  logits.fill(0.0f);
  Tensor dlogits;
  const double loss = softmax_xent_batch(logits, {0, 2}, dlogits);
  CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-9));
  CHECK(dlogits[0] == doctest::Approx((1.0 / 3 - 1.0) / 2));
  CHECK(dlogits[1] == doctest::Approx((1.0 / 3) / 2));
  CHECK_THROWS_AS(softmax_xent_batch(logits, {0, 3}, dlogits), ArgumentError);
  CHECK_THROWS_AS(softmax_xent_batch(logits, {0}, dlogits), ArgumentError);
}

TEST_CASE("top1 accuracy ties break to the lowest index") {
  Tensor logits({2, 3});
  logits.fill(1.0f);  // all ties -> argmax 0
  CHECK(top1_accuracy(logits, {0, 0}) == doctest::Approx(1.0));
  CHECK(top1_accuracy(logits, {1, 2}) == doctest::Approx(0.0));
}

TEST_CASE("sgd with momentum and weight decay steps as expected") {
  Param p({1});
  p.value[0] = 1.0f;
  p.grad[0] = 0.5f;
  Sgd opt(0.1, 0.9, 0.0);
  opt.step({&p});
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  p.grad[0] = 0.0f;
  opt.step({&p});  // velocity carries over
  CHECK(p.value[0] == doctest::Approx(0.95 - 0.1 * 0.45));

  Param q({1});
  q.value[0] = 2.0f;
  q.grad[0] = 0.0f;
  Sgd wd(0.1, 0.0, 0.01);
  wd.step({&q});
  CHECK(q.value[0] == doctest::Approx(2.0 - 0.1 * 0.02));
}

TEST_CASE("adam converges on a quadratic") {
  Param p({2});
  p.value[0] = 3.0f;
  p.value[1] = -2.0f;
  Adam opt(0.05);
  for (int step = 0; step < 400; ++step) {
    p.grad[0] = 2.0f * (p.value[0] - 1.0f);
    p.grad[1] = 2.0f * (p.value[1] + 0.5f);
    opt.step({&p});
  }
  CHECK(p.value[0] == doctest::Approx(1.0f).epsilon(0.02));
  CHECK(p.value[1] == doctest::Approx(-0.5f).epsilon(0.02));
}
