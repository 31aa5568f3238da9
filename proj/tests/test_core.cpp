#include <doctest.h>

#include "ckd/common.hpp"
#include "ckd/serialize.hpp"
#include "ckd/tensor.hpp"

#include <filesystem>

using namespace ckd;

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng c(mix_seed(7, "shuffle", 1)), d(mix_seed(7, "augment", 1));
  CHECK(c.next_u64() != d.next_u64());

  Rng e(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = e.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("rng normal has roughly standard moments") {
  Rng r(3);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("rng shuffle permutes") {
  Rng r(5);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
  auto w = v;
  r.shuffle(w);
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}

TEST_CASE("tensor shape and views") {
  Tensor t({2, 3, 4, 4});
  CHECK(t.size() == 96);
  t.at(1, 2, 3, 3) = 5.0f;
  CHECK(t[95] == 5.0f);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  CHECK_THROWS_AS(t.as_matrix(7, 7), ShapeError);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK(!t.all_finite());
}

TEST_CASE("tensor container round-trips") {
  const auto path = std::filesystem::temp_directory_path() / "ckd_test_tensors.bin";
  Tensor a({2, 3});
  for (int i = 0; i < 6; ++i) a[i] = static_cast<float>(i) * 0.5f;
  Tensor b({4});
  b.fill(-1.25f);
  save_tensors(path, {{"alpha", &a}, {"beta", &b}});
  auto loaded = load_tensors(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("alpha").shape() == std::vector<int>({2, 3}));
  CHECK(loaded.at("alpha")[3] == 1.5f);
  CHECK(loaded.at("beta")[0] == -1.25f);
  std::filesystem::remove(path);
}

TEST_CASE("hash helpers are stable") {
  const std::string s = "ckd";
  CHECK(fnv1a64(s.data(), s.size()) == fnv1a64(s.data(), s.size()));
  CHECK(hash_hex(0x1234abcdULL).size() == 16);
  CHECK(hash_hex(0) == "0000000000000000");
}
