#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ckd/distill.hpp"
#include "ckd/training.hpp"

namespace ckd {

/// Reconstruction decoder: bilinear to 32x32, 3x3 conv (12 ch, BN+ReLU),
/// 3x3 conv (3 ch, sigmoid). Fitted with Adam on per-pixel binary
/// cross-entropy against the input image.
struct DecoderSpec {
  int target_resolution = 32;
  int hidden_channels = 12;
  int out_channels = 3;
  double fit_lr = 1e-3;
  int fit_batch_size = 128;
  double plateau_rel_improvement = 1e-4;
  int plateau_window = 5;
};

class Decoder {
 public:
  Decoder(int in_channels, const DecoderSpec& spec, std::uint64_t seed, std::uint64_t backbone_checksum);

  /// Sigmoid reconstruction, (N, 3, 32, 32) in (0,1).
  Tensor reconstruct(const Tensor& features);

  std::uint64_t paired_checksum() const { return backbone_checksum_; }
  bool convergence_warning() const { return convergence_warning_; }
  double final_fit_loss() const { return final_fit_loss_; }
  const std::vector<double>& fit_loss_history() const { return fit_loss_history_; }

 private:
  friend Decoder fit_decoder(Model&, const Dataset&, const DecoderSpec&, int, std::uint64_t);

  Sequential body_;  // resize + conv + bn + relu + conv (pre-sigmoid)
  Sigmoid sigmoid_;
  DecoderSpec spec_;
  std::uint64_t backbone_checksum_;
  bool convergence_warning_ = false;
  double final_fit_loss_ = 0.0;
  std::vector<double> fit_loss_history_;
};

/// Mean per-pixel binary cross-entropy; targets in [0,1], exact zero for a
/// bit-exact binary match.
double mean_pixel_bce(const Tensor& reconstruction, const Tensor& target);

/// Trains a fresh decoder on the train split with the backbone frozen.
/// Stops early once the relative improvement over `plateau_window` epochs
/// drops below `plateau_rel_improvement`.
Decoder fit_decoder(Model& frozen_model, const Dataset& dataset, const DecoderSpec& spec,
                    int fit_epochs, std::uint64_t seed);

/// -(mean reconstruction BCE) over the split; higher = more input information.
double estimate_ixf(Model& frozen_model, Decoder& decoder, const DataSplit& eval_split);

/// Top-1 test accuracy.
double estimate_iyf(Model& frozen_model, const DataSplit& test_split);

struct MIPoint {
  int epoch = 0;
  double ixf_raw = 0.0;
  double iyf_raw = 0.0;
  std::optional<double> ixf_norm;
  std::optional<double> iyf_norm;
};

struct MICurve {
  std::string run_id;
  std::vector<MIPoint> points;
  std::string eval_split = "train";  // split the reconstruction loss is read on
  int decoder_fit_epochs = 0;

  bool normalized() const;
  void save_csv(const std::filesystem::path& path) const;
  static MICurve load_csv(const std::filesystem::path& path, std::string run_id);
};

/// Estimates (I(X;F), I(Y;F)) for every checkpoint of a run with one fresh
/// decoder per checkpoint (identical seed and budget).
MICurve build_mi_curve(const CheckpointManifest& manifest, const Dataset& dataset,
                       const CheckpointStore& store, const DecoderSpec& spec, int fit_epochs,
                       std::uint64_t decoder_seed, const std::string& eval_split = "train");

/// Min-max normalization per series; a constant series maps to all 1.0.
MICurve normalize_curve(const MICurve& curve);

}  // namespace ckd
