#include <doctest.h>

#include "ckd/training.hpp"

#include <cmath>
#include <filesystem>

using namespace ckd;
namespace fs = std::filesystem;

namespace {

Dataset micro_dataset() {
  SyntheticSpec s;
  s.num_classes = 3;
  s.train_per_class = 20;
  s.test_per_class = 8;
  s.resolution = 16;
  s.seed = 5;
  return make_synthetic(s);
}

TrainRecipe micro_recipe() {
  TrainRecipe r;
  r.epochs = 3;
  r.batch_size = 16;
  r.initial_lr = 0.05;
  r.checkpoint_every = 1;
  r.seed = 11;
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 200, 0.1) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(cosine_lr(200, 200, 0.1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine_lr(100, 200, 0.1) == doctest::Approx(0.05).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(-1, 200, 0.1), ArgumentError);
  CHECK_THROWS_AS(cosine_lr(201, 200, 0.1), ArgumentError);
}

TEST_CASE("cosine_lr is monotonically non-increasing") {
  double prev = cosine_lr(0, 137, 0.3);
  for (int e = 1; e <= 137; ++e) {
    const double lr = cosine_lr(e, 137, 0.3);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("early_stop_check") {
  // Strictly increasing: never stops.
  std::vector<double> rising;
  for (int i = 0; i < 30; ++i) rising.push_back(i * 0.01);
  CHECK(!early_stop_check(rising, 10).has_value());

  // Plateau after a peak at index 1.
  std::vector<double> plateau = {0.5, 0.6};
  for (int i = 0; i < 10; ++i) plateau.push_back(0.6);
  auto stop = early_stop_check(plateau, 10);
  REQUIRE(stop.has_value());
  CHECK(*stop == 1);

  // Shorter than patience+1: insufficient evidence.
  CHECK(!early_stop_check({0.5, 0.4, 0.3}, 10).has_value());

  CHECK_THROWS_AS(early_stop_check({}, 10), ArgumentError);
  CHECK_THROWS_AS(early_stop_check({0.5}, 0), ArgumentError);
}

TEST_CASE("checkpoint epoch grid") {
  TrainRecipe r;
  r.epochs = 200;
  r.checkpoint_every = 20;
  CHECK(r.checkpoint_epochs() == std::vector<int>({20, 40, 60, 80, 100, 120, 140, 160, 180, 200}));
  r.epochs = 5;
  r.checkpoint_every = 2;
  CHECK(r.checkpoint_epochs() == std::vector<int>({2, 4, 5}));
  r.epochs = 1;
  r.checkpoint_every = 1;
  CHECK(r.checkpoint_epochs() == std::vector<int>({1}));
}

TEST_CASE("recipe validation") {
  TrainRecipe r;
  r.checkpoint_every = 100;
  r.epochs = 60;
  CHECK_THROWS_AS(r.validate(), ConfigError);
  r.checkpoint_every = 10;
  r.momentum = 1.0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("train_teacher writes a complete run directory") {
  TempDir dir("ckd_train_test");
  const auto ds = micro_dataset();
  const auto arch = arch_preset("wrn-d10-w0.5", 3, 16);
  auto recipe = micro_recipe();
  recipe.epochs = 5;
  recipe.checkpoint_every = 2;

  auto manifest = train_teacher(arch, recipe, ds, dir.path, "run-a");
  CHECK(manifest.run_id == "run-a");
  REQUIRE(manifest.records.size() == 3);  // epochs {2, 4, 5}
  CHECK(manifest.records[0].epoch == 2);
  CHECK(manifest.records[2].epoch == 5);
  CHECK(manifest.final_record().epoch == recipe.epochs);

  // Strictly increasing epochs, non-decreasing wall clock.
  for (std::size_t i = 1; i < manifest.records.size(); ++i) {
    CHECK(manifest.records[i].epoch > manifest.records[i - 1].epoch);
    CHECK(manifest.records[i].wall_clock_seconds >= manifest.records[i - 1].wall_clock_seconds);
  }

  CHECK(fs::exists(dir.path / "manifest.json"));
  CHECK(fs::exists(dir.path / "metrics.csv"));
  for (const auto& r : manifest.records) CHECK(fs::exists(dir.path / r.weights_ref));

  // Manifest round-trip.
  auto loaded = CheckpointManifest::load(dir.path / "manifest.json");
  CHECK(loaded.run_id == manifest.run_id);
  CHECK(loaded.records.size() == manifest.records.size());
  CHECK(loaded.records[1].test_accuracy == doctest::Approx(manifest.records[1].test_accuracy));
  CHECK(loaded.recipe.epochs == recipe.epochs);

  // Metrics CSV round-trip with the pinned header.
  auto metrics = read_metrics_csv(dir.path / "metrics.csv");
  CHECK(metrics.size() == 5);
  CHECK(metrics[0].epoch == 1);
  CHECK(metrics[4].lr == doctest::Approx(cosine_lr(4, 5, recipe.initial_lr)));

  // Reloading a checkpoint reproduces its stored accuracy exactly.
  Model model(arch, 0);
  model.load(dir.path / manifest.records[1].weights_ref);
  const double acc = evaluate_accuracy(model, ds.test);
  CHECK(acc == doctest::Approx(manifest.records[1].test_accuracy).epsilon(1e-9));

  // nearest_checkpoint_epoch snaps to the grid {2,4,5}.
  CHECK(manifest.nearest_checkpoint_epoch(0.5) == 2);   // target 2.5
  CHECK(manifest.nearest_checkpoint_epoch(0.6) == 4);   // target 3.0, tie goes later
  CHECK(manifest.nearest_checkpoint_epoch(1.0) == 5);
}

TEST_CASE("two identical runs produce identical accuracies") {
  TempDir d1("ckd_det_a"), d2("ckd_det_b");
  const auto ds = micro_dataset();
  const auto arch = arch_preset("wrn-d10-w0.5", 3, 16);
  const auto recipe = micro_recipe();
  auto m1 = train_teacher(arch, recipe, ds, d1.path, "a");
  auto m2 = train_teacher(arch, recipe, ds, d2.path, "b");
  REQUIRE(m1.records.size() == m2.records.size());
  for (std::size_t i = 0; i < m1.records.size(); ++i) {
    CHECK(m1.records[i].test_accuracy == m2.records[i].test_accuracy);
    CHECK(m1.records[i].train_loss == doctest::Approx(m2.records[i].train_loss).epsilon(1e-12));
  }
}

TEST_CASE("diverged training aborts naming the epoch") {
  TempDir dir("ckd_diverge");
  const auto ds = micro_dataset();
  const auto arch = arch_preset("wrn-d10-w0.5", 3, 16);
  auto recipe = micro_recipe();
  recipe.initial_lr = 1e9;  // guaranteed blow-up
  try {
    train_teacher(arch, recipe, ds, dir.path, "x");
    FAIL("expected divergence error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("diverged") != std::string::npos);
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("dataset/arch mismatches are rejected") {
  TempDir dir("ckd_mismatch");
  const auto ds = micro_dataset();  // 3 classes, 16px
  CHECK_THROWS_AS(train_teacher(arch_preset("wrn-d10-w0.5", 3, 32), micro_recipe(), ds, dir.path, "x"),
                  ShapeError);
  CHECK_THROWS_AS(train_teacher(arch_preset("wrn-d10-w0.5", 10, 16), micro_recipe(), ds, dir.path, "x"),
                  ShapeError);
}
