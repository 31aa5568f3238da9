#pragma once

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ckd/training.hpp"

namespace ckd {

// --- scalar reference ops (double precision) -------------------------------

/// softmax(logits / tau), computed with max subtraction.
std::vector<double> softened_softmax(const std::vector<double>& logits, double tau);

/// alpha * H(onehot(label), softmax(z)) + (1-alpha) * s * H(p_t, softmax(z/tau)),
/// s = tau^2 when tau_sq_scaling. teacher_probs arrive already softened.
double kd_loss(const std::vector<double>& student_logits, const std::vector<double>& teacher_probs,
               int label, double alpha, double tau, bool tau_sq_scaling);

/// d(kd_loss)/d(student_logits).
std::vector<double> kd_loss_grad(const std::vector<double>& student_logits,
                                 const std::vector<double>& teacher_probs, int label, double alpha,
                                 double tau, bool tau_sq_scaling);

/// Mean of the members' softened softmax outputs.
std::vector<double> ensemble_teacher_probs(const std::vector<std::vector<double>>& teacher_logits,
                                           double tau);

/// Uniform pseudo-teacher [1/K, ..., 1/K].
std::vector<double> lsr_teacher_probs(int num_classes);

// --- teacher specification --------------------------------------------------

struct TeacherRef {
  std::string run_id;
  int epoch = 0;
};

struct TeacherSpec {
  enum class Kind { Checkpoints, Uniform };
  Kind kind = Kind::Checkpoints;
  std::vector<TeacherRef> members;  // Kind::Checkpoints
  int num_classes = 0;              // Kind::Uniform

  static TeacherSpec checkpoints(std::vector<TeacherRef> members);
  static TeacherSpec uniform(int num_classes);
  std::string describe() const;
};

nlohmann::json teacher_spec_to_json(const TeacherSpec& t);
TeacherSpec teacher_spec_from_json(const nlohmann::json& j);

struct KDConfig {
  double alpha = 0.5;
  double tau = 4.0;
  bool tau_sq_scaling = false;
  TrainRecipe student_recipe;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json kd_config_to_json(const KDConfig& c);
KDConfig kd_config_from_json(const nlohmann::json& j);

struct DistilledResult {
  std::string student_weights_ref;
  double test_accuracy = 0.0;
  TeacherSpec teacher_spec;
  KDConfig kd_config;
  double wall_clock_seconds = 0.0;
  ArchSpec student_arch;

  void save(const std::filesystem::path& path) const;
  static DistilledResult load(const std::filesystem::path& path);
};

/// Resolves (run_id, epoch) references inside a results root laid out as
/// <root>/runs/<run_id>/{manifest.json, ckpt_e*.bin}.
class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path results_root) : root_(std::move(results_root)) {}

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path run_dir(const std::string& run_id) const { return root_ / "runs" / run_id; }
  bool has_run(const std::string& run_id) const;
  CheckpointManifest manifest(const std::string& run_id) const;
  std::filesystem::path weights_path(const TeacherRef& ref) const;
  std::unique_ptr<Model> load_model(const TeacherRef& ref) const;

 private:
  std::filesystem::path root_;
};

/// Per-batch teacher probabilities for a frozen teacher set: mean softened
/// softmax for checkpoint teachers, constant 1/K for the uniform teacher.
class FrozenTeachers {
 public:
  FrozenTeachers(const TeacherSpec& spec, const CheckpointStore& store, int student_classes);

  void probs(const Tensor& images, double tau, Tensor& out);
  int member_count() const { return static_cast<int>(models_.size()); }
  bool uniform() const { return uniform_; }

 private:
  std::vector<std::unique_ptr<Model>> models_;
  bool uniform_ = false;
  int num_classes_ = 0;
  Tensor scratch_;
};

/// Batched Eq.-style loss used by the student loop: mean over the batch of
/// kd_loss; gradient written into dlogits.
double kd_loss_batch(const Tensor& student_logits, const Tensor& teacher_probs,
                     const std::vector<int>& labels, double alpha, double tau, bool tau_sq_scaling,
                     Tensor& dlogits);

/// Trains a student against the teacher spec; persists result.json,
/// student.bin and metrics.csv into `out_dir`.
DistilledResult distill_student(const ArchSpec& student_arch, const TeacherSpec& teacher_spec,
                                const KDConfig& kd_config, const Dataset& dataset,
                                const CheckpointStore& store, const std::filesystem::path& out_dir);

}  // namespace ckd
