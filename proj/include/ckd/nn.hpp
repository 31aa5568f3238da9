#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ckd/common.hpp"
#include "ckd/tensor.hpp"

namespace ckd {

/// Trainable tensor plus its gradient accumulator.
struct Param {
  Tensor value;
  Tensor grad;

  explicit Param(std::vector<int> shape) : value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.fill(0.0f); }
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Base layer. One forward caches whatever backward needs; training loops
/// alternate forward/backward on a single thread per layer instance.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect_params(std::vector<Param*>& out) {}
  /// Params and persistent buffers, prefixed for serialization.
  virtual void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) {}
};

class Conv2d : public Layer {
 public:
  /// Dense convolution. Depthwise variant via `depthwise=true` (then
  /// out_ch must equal in_ch).
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, bool bias, Rng& rng,
         bool depthwise = false);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override;

  int out_channels() const { return out_ch_; }

 private:
  void im2col_chunk(const Tensor& x, int n0, int n1, Mat& cols) const;
  void col2im_chunk(const Mat& dcols, int n0, int n1, Tensor& dx) const;
  std::pair<int, int> out_hw(const Tensor& x) const;

  int in_ch_, out_ch_, k_, stride_, pad_;
  bool has_bias_, depthwise_;
  Param weight_;  // (out, in, k, k) dense; (ch, 1, k, k) depthwise
  std::unique_ptr<Param> bias_;
  Tensor x_;  // cached input
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override;

 private:
  int channels_;
  double momentum_, eps_;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor xhat_;
  std::vector<float> invstd_;
  bool trained_forward_ = false;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor y_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;

 private:
  Tensor y_;
};

class Linear : public Layer {
 public:
  Linear(int in_features, int out_features, bool bias, Rng& rng);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override;

 private:
  int in_, out_;
  Param weight_;  // (out, in)
  std::unique_ptr<Param> bias_;
  Tensor x_;
};

/// (N,C,H,W) -> (N,C) mean over the spatial extent.
class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;

 private:
  std::vector<int> in_shape_;
};

/// Bilinear resize to a fixed target, half-pixel centers (align_corners=false).
class BilinearResize : public Layer {
 public:
  BilinearResize(int out_h, int out_w) : out_h_(out_h), out_w_(out_w) {}

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;

 private:
  int out_h_, out_w_;
  std::vector<int> in_shape_;
};

class Sequential : public Layer {
 public:
  Layer* add(std::string name, std::unique_ptr<Layer> layer);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_tensors(const std::string& prefix, std::vector<NamedTensor>& out) override;

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
};

/// Mean softmax cross-entropy over a batch of logits (N,K); writes
/// d(loss)/d(logits) into dlogits. Labels are class indices.
double softmax_xent_batch(const Tensor& logits, const std::vector<int>& labels, Tensor& dlogits);

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
double top1_accuracy(const Tensor& logits, const std::vector<int>& labels);

/// Row-wise softmax of logits/tau into probs (same shape), float path used
/// by training loops.
void softened_softmax_batch(const Tensor& logits, double tau, Tensor& probs);

}  // namespace ckd
