#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ckd/mi.hpp"

namespace ckd {

struct SelectionResult {
  std::string run_id;
  int selected_epoch = 0;
  double objective_value = 0.0;  // ixf_norm + iyf_norm at the selected epoch
  std::vector<std::pair<int, double>> ranking;  // (epoch, objective), best first

  void save(const std::filesystem::path& path) const;
  static SelectionResult load(const std::filesystem::path& path);
  std::string render_table() const;
};

/// Epoch maximizing ixf_norm + iyf_norm; ties break toward the earliest
/// epoch. Requires a normalized curve.
SelectionResult select_optimal_checkpoint(const MICurve& curve);

}  // namespace ckd
