#pragma once

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ckd/dataset.hpp"
#include "ckd/model_zoo.hpp"

namespace ckd {

enum class LrSchedule { CosineToZero };
enum class Augmentation { StandardCropFlip, None };

struct TrainRecipe {
  int epochs = 60;
  int batch_size = 128;
  double initial_lr = 0.1;
  LrSchedule lr_schedule = LrSchedule::CosineToZero;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int checkpoint_every = 10;
  Augmentation augmentation = Augmentation::StandardCropFlip;
  std::uint64_t seed = 0;

  void validate() const;
  /// Epochs at which checkpoints are written: multiples of checkpoint_every
  /// plus the final epoch.
  std::vector<int> checkpoint_epochs() const;
};

struct CheckpointRecord {
  int epoch = 0;
  std::string weights_ref;  // file name inside the run directory
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  double wall_clock_seconds = 0.0;
};

struct CheckpointManifest {
  std::string run_id;
  ArchSpec arch;
  TrainRecipe recipe;
  std::vector<CheckpointRecord> records;
  std::optional<int> early_stop_epoch;

  const CheckpointRecord& record_at(int epoch) const;
  const CheckpointRecord& final_record() const;
  /// Checkpoint epoch closest to fraction*epochs (ties to the later one).
  int nearest_checkpoint_epoch(double fraction) const;

  void save(const std::filesystem::path& path) const;
  static CheckpointManifest load(const std::filesystem::path& path);
};

/// lr(e) = initial_lr/2 * (1 + cos(pi * e / total)); exactly 0 at e = total.
double cosine_lr(int epoch, int total_epochs, double initial_lr);

/// Index of the best accuracy, if `patience` later epochs brought no
/// improvement; diagnostic only, training never truncates on it.
std::optional<int> early_stop_check(const std::vector<double>& accuracy_history, int patience);

struct EpochMetrics {
  int epoch;
  double train_loss;
  double test_acc;
  double lr;
  double wall_clock_s;
};

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows);
std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);

/// Top-1 accuracy of a model over a split, evaluation mode, fixed order.
double evaluate_accuracy(Model& model, const DataSplit& split, int batch_size = 256);

/// Trains from scratch, checkpointing into `run_dir` (created if missing);
/// writes manifest.json, metrics.csv and ckpt_e{E}.bin files.
CheckpointManifest train_teacher(const ArchSpec& arch, const TrainRecipe& recipe, const Dataset& dataset,
                                 const std::filesystem::path& run_dir, const std::string& run_id);

// JSON round-trips shared with the result/report formats.
nlohmann::json arch_to_json(const ArchSpec& a);
ArchSpec arch_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const TrainRecipe& r);
TrainRecipe recipe_from_json(const nlohmann::json& j);

}  // namespace ckd
