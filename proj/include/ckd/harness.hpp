#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ckd/analysis.hpp"
#include "ckd/distill.hpp"
#include "ckd/mi.hpp"
#include "ckd/selection.hpp"

namespace ckd {

extern const char* kCodeVersion;

/// Named dataset plus loading knobs. Names: "cifar10", "cifar100" (binary
/// files under `root`), or "synth<K>" for the procedural set.
struct DatasetConfig {
  std::string name = "synth10";
  std::string root;
  double subset_fraction = 1.0;
  std::uint64_t subset_seed = 0;
  // synth knobs
  int train_per_class = 128;
  int test_per_class = 50;
  int resolution = 32;
  std::uint64_t seed = 1234;
  int clusters = 3;
  double signal = 1.0;
  double nuisance = 0.9;
  double noise = 0.06;

  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
  /// Loads (and in-process caches) the dataset described here.
  std::shared_ptr<const Dataset> load() const;
};

struct ExperimentConfig {
  int schema_version = 1;
  std::string kind;  // teacher-epoch-sweep | ensemble-compare | ensemble-size-ablation |
                     // select-and-distill | grid-search | lsr-baseline
  DatasetConfig dataset;
  std::string teacher_arch = "wrn-d16-w2";
  std::string student_arch = "wrn-d16-w1";
  TrainRecipe teacher_recipe;
  TrainRecipe student_recipe;
  double tau = 4.0;
  double alpha = 0.5;
  bool tau_sq_scaling = false;
  std::vector<double> tau_grid;    // grid-search
  std::vector<double> alpha_grid;  // grid-search
  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir;
  std::vector<int> ensemble_sizes = {1, 2, 4};     // ensemble-size-ablation
  std::vector<double> select_baselines = {0.3, 0.5, 0.7};  // select-and-distill
  int decoder_fit_epochs = 30;
  std::uint64_t decoder_seed = 7;
  std::string mi_eval_split = "train";

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::filesystem::path& path);
};

/// YAML or JSON file -> json (dispatch on extension).
nlohmann::json load_config_file(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path results_root;  // defaults to $CKD_RESULTS_DIR or ./results
  int parallel = 1;
  std::string worker_exe;  // binary for `exec-task` children; empty = in-process
  bool deterministic = false;  // forces sequential task execution

  static RunOptions defaults();
};

struct ExperimentStats {
  int executed = 0;
  int reused = 0;
  int failed = 0;
};

struct ConditionResult {
  std::string label;
  nlohmann::json teacher_spec;
  double tau = 0.0;
  double alpha = 0.0;
  std::vector<double> seed_accuracies;
  double mean_accuracy = 0.0;
  std::optional<double> std_accuracy;
  std::vector<std::string> run_dirs;
  bool failed = false;
  std::string error;
  nlohmann::json extra;  // kind-specific numbers (ensemble accuracy, costs, ...)
};

struct ExperimentReport {
  std::string kind;
  std::string config_hash;
  std::string code_version;
  nlohmann::json dataset;
  nlohmann::json teachers;  // reference accuracies per trajectory
  std::vector<ConditionResult> conditions;
  std::vector<CostRow> cost_rows;
  ExperimentStats stats;

  nlohmann::json to_json() const;
  static ExperimentReport from_json(const nlohmann::json& j);
  std::string render_text() const;
  void save(const std::filesystem::path& dir) const;
  static ExperimentReport load(const std::filesystem::path& dir);
};

/// Runs one experiment end to end; resumable because every sub-run lives in
/// a content-addressed directory under <results_root>/runs.
ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options);

// --- task layer (exposed for the CLI worker and tests) ----------------------

/// Executes one serialized sub-run task ("train-teacher", "distill",
/// "mi-curve") against the results root.
void execute_task(const nlohmann::json& task, const std::filesystem::path& results_root);
bool task_is_complete(const nlohmann::json& task, const std::filesystem::path& results_root);
std::string task_run_id(const nlohmann::json& task);

/// Deterministic content-addressed ids.
std::string make_run_id(const std::string& prefix, const nlohmann::json& payload);

// --- grid search ------------------------------------------------------------

struct GridCell {
  double tau = 0.0;
  double alpha = 0.0;
  std::vector<double> accuracies;
  double mean = 0.0;
};

/// Highest mean accuracy; ties break to smaller tau, then smaller alpha.
const GridCell& pick_best_grid_cell(const std::vector<GridCell>& cells);

/// Mean-softmax (tau = 1) accuracy of a checkpoint ensemble on the test split.
double ensemble_accuracy(const std::vector<TeacherRef>& members, const CheckpointStore& store,
                         const DataSplit& test_split);

}  // namespace ckd
