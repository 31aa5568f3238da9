#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ckd/tensor.hpp"

namespace ckd {

struct NamedTensorView {
  std::string name;
  const Tensor* tensor;
};

/// Binary container for named float tensors (magic "CKDT", version 1).
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensorView>& tensors);
std::map<std::string, Tensor> load_tensors(const std::filesystem::path& path);

}  // namespace ckd
