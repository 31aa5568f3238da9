#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "ckd/nn.hpp"

namespace ckd {

enum class Family { WideResidual, Residual, Mobile };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

struct ArchSpec {
  Family family = Family::WideResidual;
  int depth = 16;
  double width_multiplier = 1.0;
  int num_classes = 10;
  int input_resolution = 32;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::string describe() const;
};

/// Parses preset ids like "wrn-d40-w2", "wrn-d10-w0.5", "resnet-d32",
/// "mobile-w0.75" into a full spec for the given class count / resolution.
ArchSpec arch_preset(const std::string& id, int num_classes, int input_resolution = 32);

struct ForwardOutput {
  Tensor logits;    // (N, K)
  Tensor features;  // last-conv post-activation map (N, C, H, W)
};

/// Classifier with a feature tap on the map feeding global average pooling.
class Model {
 public:
  Model(const ArchSpec& spec, std::uint64_t seed);

  ForwardOutput forward(const Tensor& images, bool train);
  /// Propagates d(loss)/d(logits); accumulates into param grads.
  void backward_from_logits(const Tensor& dlogits);

  const ArchSpec& spec() const { return spec_; }
  int feature_channels() const { return feature_channels_; }
  std::vector<Param*> params();
  std::vector<NamedTensor> named_tensors();
  std::int64_t param_count();

  void save(const std::filesystem::path& path);
  void load(const std::filesystem::path& path);
  /// FNV over all params and buffers in enumeration order.
  std::uint64_t checksum();

 private:
  ArchSpec spec_;
  Sequential body_;
  GlobalAvgPool pool_;
  std::unique_ptr<Linear> head_;
  int feature_channels_ = 0;
};

std::unique_ptr<Model> build_model(const ArchSpec& spec, std::uint64_t seed);

}  // namespace ckd
