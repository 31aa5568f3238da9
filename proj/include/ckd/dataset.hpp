#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ckd/tensor.hpp"

namespace ckd {

struct DataSplit {
  Tensor images;  // (N, 3, R, R), values in [0,1]
  std::vector<int> labels;
  int count() const { return images.empty() ? 0 : images.dim(0); }
};

struct Dataset {
  std::string name;
  DataSplit train;
  DataSplit test;
  int num_classes = 0;
  int resolution = 0;
};

/// CIFAR binary formats (data_batch_*.bin / test_batch.bin, train.bin / test.bin).
Dataset load_cifar10(const std::filesystem::path& dir);
Dataset load_cifar100(const std::filesystem::path& dir);

/// Procedural image classification set: every class is a cluster-shared
/// smooth base pattern plus class-specific blobs and a grating; every sample
/// adds a random shift, a per-sample low-frequency background (input-side
/// information a classifier never needs), and pixel noise.
struct SyntheticSpec {
  int num_classes = 10;
  int train_per_class = 128;
  int test_per_class = 50;
  int resolution = 32;
  std::uint64_t seed = 1234;
  int clusters = 3;
  double signal = 1.0;
  double nuisance = 0.9;
  double noise = 0.06;
  int max_shift = 3;
};

Dataset make_synthetic(const SyntheticSpec& spec);

/// Stratified subsample of the train split; test split is kept intact.
Dataset subset_train(const Dataset& ds, double fraction, std::uint64_t seed);

/// Gathers the given sample indices into a contiguous batch.
void gather_batch(const DataSplit& split, const std::vector<int>& indices, Tensor& images,
                  std::vector<int>& labels);

/// Pad-4 zero border, random crop back to full size, horizontal flip p=0.5.
void augment_standard(Tensor& images, Rng& rng);

/// Epoch-shuffled index batches.
std::vector<std::vector<int>> make_batches(int count, int batch_size, Rng& rng);
/// Sequential (evaluation-order) index batches.
std::vector<std::vector<int>> make_eval_batches(int count, int batch_size);

}  // namespace ckd
