#include <doctest.h>

#include "ckd/dataset.hpp"

#include <algorithm>
#include <set>

using namespace ckd;

namespace {
SyntheticSpec tiny_spec() {
  SyntheticSpec s;
  s.num_classes = 4;
  s.train_per_class = 12;
  s.test_per_class = 5;
  s.resolution = 16;
  s.seed = 99;
  return s;
}
}  // namespace

TEST_CASE("synthetic dataset shape, range and determinism") {
  const auto spec = tiny_spec();
  Dataset a = make_synthetic(spec);
  CHECK(a.train.count() == 48);
  CHECK(a.test.count() == 20);
  CHECK(a.num_classes == 4);
  CHECK(a.train.images.shape() == std::vector<int>({48, 3, 16, 16}));
  for (std::int64_t i = 0; i < a.train.images.size(); ++i) {
    CHECK(a.train.images[i] >= 0.0f);
    CHECK(a.train.images[i] <= 1.0f);
  }
  Dataset b = make_synthetic(spec);
  for (std::int64_t i = 0; i < a.train.images.size(); ++i) {
    CHECK(a.train.images[i] == b.train.images[i]);
  }
  auto spec2 = spec;
  spec2.seed = 100;
  Dataset c = make_synthetic(spec2);
  bool identical = true;
  for (std::int64_t i = 0; i < a.train.images.size() && identical; ++i) {
    identical = a.train.images[i] == c.train.images[i];
  }
  CHECK(!identical);
}

TEST_CASE("synthetic classes are balanced and labeled in range") {
  Dataset ds = make_synthetic(tiny_spec());
  std::vector<int> counts(4, 0);
  for (int label : ds.train.labels) {
    REQUIRE(label >= 0);
    REQUIRE(label < 4);
    ++counts[static_cast<std::size_t>(label)];
  }
  for (int c : counts) CHECK(c == 12);
}

TEST_CASE("stratified train subset keeps the test split intact") {
  Dataset ds = make_synthetic(tiny_spec());
  Dataset half = subset_train(ds, 0.5, 1);
  CHECK(half.test.count() == ds.test.count());
  CHECK(half.train.count() == 24);  // ceil(0.5 * 12) per class
  std::vector<int> counts(4, 0);
  for (int label : half.train.labels) ++counts[static_cast<std::size_t>(label)];
  for (int c : counts) CHECK(c == 6);
  CHECK_THROWS_AS(subset_train(ds, 0.0, 1), ArgumentError);
  CHECK_THROWS_AS(subset_train(ds, 1.5, 1), ArgumentError);
}

TEST_CASE("gather_batch pulls the right samples") {
  Dataset ds = make_synthetic(tiny_spec());
  Tensor images;
  std::vector<int> labels;
  gather_batch(ds.train, {0, 13, 47}, images, labels);
  CHECK(images.dim(0) == 3);
  CHECK(labels[0] == ds.train.labels[0]);
  CHECK(labels[1] == ds.train.labels[13]);
  CHECK(labels[2] == ds.train.labels[47]);
  const std::int64_t stride = 3 * 16 * 16;
  for (std::int64_t i = 0; i < stride; ++i) {
    CHECK(images[stride + i] == ds.train.images[13 * stride + i]);
  }
}

TEST_CASE("augmentation is seed-deterministic and shape-preserving") {
  Dataset ds = make_synthetic(tiny_spec());
  Tensor a, b;
  std::vector<int> labels;
  gather_batch(ds.train, {0, 1, 2, 3}, a, labels);
  gather_batch(ds.train, {0, 1, 2, 3}, b, labels);
  Rng r1(123), r2(123), r3(456);
  augment_standard(a, r1);
  augment_standard(b, r2);
  for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  Tensor c;
  gather_batch(ds.train, {0, 1, 2, 3}, c, labels);
  augment_standard(c, r3);
  bool identical = true;
  for (std::int64_t i = 0; i < a.size() && identical; ++i) identical = a[i] == c[i];
  CHECK(!identical);
}

TEST_CASE("epoch batches cover every index exactly once") {
  Rng rng(17);
  auto batches = make_batches(23, 8, rng);
  CHECK(batches.size() == 3);
  std::set<int> seen;
  for (const auto& b : batches) {
    for (int i : b) seen.insert(i);
  }
  CHECK(seen.size() == 23);

  auto eval = make_eval_batches(23, 8);
  CHECK(eval.back().size() == 7);
  CHECK(eval[0][0] == 0);
  CHECK(eval[2][6] == 22);
}

TEST_CASE("cifar loaders reject missing directories") {
  CHECK_THROWS_AS(load_cifar10("/nonexistent/cifar"), IoError);
  CHECK_THROWS_AS(load_cifar100("/nonexistent/cifar"), IoError);
}
