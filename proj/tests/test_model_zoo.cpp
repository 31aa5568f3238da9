#include <doctest.h>

#include "ckd/model_zoo.hpp"
#include "ckd/serialize.hpp"

#include <filesystem>

using namespace ckd;

namespace {
Tensor zero_batch(int n, int res) { return Tensor({n, 3, res, res}); }
}  // namespace

TEST_CASE("preset parsing") {
  auto t = arch_preset("wrn-d40-w2", 100);
  CHECK(t.family == Family::WideResidual);
  CHECK(t.depth == 40);
  CHECK(t.width_multiplier == 2.0);
  CHECK(t.num_classes == 100);

  auto m = arch_preset("mobile-w0.75", 100);
  CHECK(m.family == Family::Mobile);
  CHECK(m.width_multiplier == doctest::Approx(0.75));

  auto r = arch_preset("resnet-d110", 100);
  CHECK(r.depth == 110);

  CHECK_THROWS_AS(arch_preset("vit-b16", 10), ConfigError);
  CHECK_THROWS_AS(arch_preset("wrn-d15-w1", 10), ConfigError);  // 15 != 6n+4
  CHECK_THROWS_AS(arch_preset("wrn-x2", 10), ConfigError);
}

TEST_CASE("malformed specs name the offending field") {
  ArchSpec bad;
  bad.family = Family::WideResidual;
  bad.depth = 17;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("depth") != std::string::npos);
  }
  bad.depth = 16;
  bad.width_multiplier = -1;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("width_multiplier") != std::string::npos);
  }
}

TEST_CASE("identical (spec, seed) builds bit-identical parameters") {
  const auto spec = arch_preset("wrn-d10-w0.5", 10, 16);
  Model a(spec, 7), b(spec, 7), c(spec, 8);
  auto ta = a.named_tensors(), tb = b.named_tensors();
  REQUIRE(ta.size() == tb.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].name == tb[i].name);
    for (std::int64_t j = 0; j < ta[i].tensor->size(); ++j) {
      if ((*ta[i].tensor)[j] != (*tb[i].tensor)[j]) all_equal = false;
    }
  }
  CHECK(all_equal);
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());
}

TEST_CASE("forward contract: shapes, determinism, finiteness") {
  for (const char* id : {"wrn-d10-w0.5", "resnet-d8-w0.5", "mobile-w0.25-d3"}) {
    const auto spec = arch_preset(id, 7, 16);
    Model m(spec, 3);
    Tensor x = zero_batch(4, 16);
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>((i % 17) / 17.0);
    auto out1 = m.forward(x, /*train=*/false);
    CHECK(out1.logits.shape() == std::vector<int>({4, 7}));
    CHECK(out1.features.rank() == 4);
    CHECK(out1.features.dim(0) == 4);
    CHECK(out1.features.dim(1) == m.feature_channels());
    auto out2 = m.forward(x, /*train=*/false);
    for (std::int64_t i = 0; i < out1.logits.size(); ++i) CHECK(out1.logits[i] == out2.logits[i]);
  }
}

TEST_CASE("logits length follows num_classes") {
  Model m(arch_preset("mobile-w0.75", 100), 0);
  Tensor x = zero_batch(2, 32);
  auto out = m.forward(x, false);
  CHECK(out.logits.shape() == std::vector<int>({2, 100}));
  CHECK(out.logits.all_finite());  // all-zero input stays finite
}

TEST_CASE("resolution mismatch raises a shape error") {
  Model m(arch_preset("wrn-d10-w0.5", 10, 32), 0);
  CHECK_THROWS_AS(m.forward(zero_batch(1, 16), false), ShapeError);
}

// Parameter counts of the shipped teacher/student preset pairs, counted once
// and frozen here.
TEST_CASE("teacher presets strictly out-param their paired students") {
  struct Pair {
    const char* teacher;
    const char* student;
    int num_classes;
    long long teacher_params;
    long long student_params;
  };
  const Pair pairs[] = {
      {"wrn-d16-w2", "wrn-d16-w1", 100, 703284, 180916},
      {"wrn-d16-w2", "mobile-w0.75", 100, 703284, 192340},
      {"wrn-d40-w2", "wrn-d40-w1", 100, 2255156, 569780},
      {"wrn-d10-w1", "wrn-d10-w0.5", 10, 77850, 20794},
  };
  for (const auto& p : pairs) {
    Model teacher(arch_preset(p.teacher, p.num_classes), 0);
    Model student(arch_preset(p.student, p.num_classes), 0);
    CHECK(teacher.param_count() == p.teacher_params);
    CHECK(student.param_count() == p.student_params);
    CHECK(teacher.param_count() > student.param_count());
  }
}

TEST_CASE("save/load round-trips parameters and rejects mismatched shapes") {
  const auto dir = std::filesystem::temp_directory_path() / "ckd_zoo_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.bin";

  Model m(arch_preset("wrn-d10-w0.5", 10, 16), 5);
  const auto before = m.checksum();
  m.save(path);
  Model m2(arch_preset("wrn-d10-w0.5", 10, 16), 99);
  CHECK(m2.checksum() != before);
  m2.load(path);
  CHECK(m2.checksum() == before);

  Model wrong(arch_preset("wrn-d10-w1", 10, 16), 0);
  CHECK_THROWS_AS(wrong.load(path), IoError);
  std::filesystem::remove_all(dir);
}
