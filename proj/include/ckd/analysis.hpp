#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ckd/distill.hpp"
#include "ckd/mi.hpp"

namespace ckd {

enum class MeanVectorMode { Logits, SoftProbs };

/// Per-class mean output vectors over a labelled split: vector i is the mean
/// of (logits | softened softmax at tau) over samples with true class i.
std::vector<std::vector<double>> class_mean_vectors(Model& model, const DataSplit& split,
                                                    MeanVectorMode mode, double tau = 5.0);

struct ClassSimilarityMatrix {
  int num_classes = 0;
  std::vector<double> values;  // row-major K x K
  MeanVectorMode source_mode = MeanVectorMode::Logits;
  double tau = 0.0;  // soft-probs only
  std::string run_id;
  int epoch = 0;

  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * num_classes + j]; }
  void save_csv(const std::filesystem::path& path) const;
  void save_png(const std::filesystem::path& path, int cell_pixels = 6) const;
};

/// A_ij = <v_i, v_j> / (|v_i| |v_j|).
ClassSimilarityMatrix cosine_similarity_matrix(const std::vector<std::vector<double>>& vectors);

struct DiversityMetrics {
  double offdiag_mean = 0.0;
  double offdiag_std = 0.0;
  double offdiag_range = 0.0;
};

/// Off-diagonal dispersion statistics; wider dispersion = more class
/// correlation structure retained.
DiversityMetrics diversity_metrics(const ClassSimilarityMatrix& m);

struct LogitProfile {
  int class_id = 0;
  std::vector<double> mean_logits;
  double variance = 0.0;
  int peak_count = 0;  // strict interior local maxima over class index order
};

std::vector<LogitProfile> logit_profiles(Model& model, const DataSplit& split,
                                         const std::vector<int>& class_ids);

struct InfoPlaneAnnotation {
  std::string run_id;
  int epoch = 0;
  std::string label;  // rendered in the CSV; a star marker in the plot
};

/// Scatter/line plot of (I(X;F), I(Y;F)) trajectories plus a merged CSV.
void export_info_plane(const std::vector<MICurve>& curves,
                       const std::vector<InfoPlaneAnnotation>& annotations, bool use_normalized,
                       const std::filesystem::path& png_path, const std::filesystem::path& csv_path);

struct CostRow {
  std::string label;
  double teacher_training_seconds = 0.0;
  double distill_seconds = 0.0;
  double total_seconds = 0.0;
  double student_accuracy_mean = 0.0;
  std::optional<double> student_accuracy_std;  // absent under 2 seeds
};

struct CostReport {
  std::vector<CostRow> rows;
  std::vector<std::string> footnotes;

  void save_csv(const std::filesystem::path& path) const;
  std::string render_text() const;
};

/// Teacher cost attribution: every distinct trajectory is charged its
/// cumulative wall clock at the highest referenced epoch, so a snapshot
/// ensemble costs one trajectory and a full ensemble of k costs k.
double teacher_cost_seconds(const TeacherSpec& spec, const CheckpointStore& store);

/// Aggregates per-seed distillation results sharing one condition label.
CostRow make_cost_row(const std::string& label, const std::vector<DistilledResult>& seed_results,
                      const CheckpointStore& store);

}  // namespace ckd
