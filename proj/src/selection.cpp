#include "ckd/selection.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>

namespace ckd {

using nlohmann::json;

SelectionResult select_optimal_checkpoint(const MICurve& curve) {
  if (curve.points.empty()) throw ArgumentError("select_optimal_checkpoint: empty curve");
  if (!curve.normalized()) {
    throw ArgumentError("select_optimal_checkpoint: curve is not normalized; run normalize_curve first");
  }
  SelectionResult res;
  res.run_id = curve.run_id;
  for (const auto& p : curve.points) {
    res.ranking.emplace_back(p.epoch, *p.ixf_norm + *p.iyf_norm);
  }
  // Stable sort by descending objective keeps equal-objective epochs in
  // ascending epoch order (curve points are epoch-sorted).
  std::stable_sort(res.ranking.begin(), res.ranking.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  res.selected_epoch = res.ranking.front().first;
  res.objective_value = res.ranking.front().second;
  return res;
}

void SelectionResult::save(const std::filesystem::path& path) const {
  json j;
  j["run_id"] = run_id;
  j["selected_epoch"] = selected_epoch;
  j["objective_value"] = objective_value;
  j["ranking"] = json::array();
  for (const auto& [epoch, objective] : ranking) {
    j["ranking"].push_back(json{{"epoch", epoch}, {"objective", objective}});
  }
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write selection result {}", path.string()));
  f << j.dump(2) << "\n";
}

SelectionResult SelectionResult::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open selection result {}", path.string()));
  json j = json::parse(f);
  SelectionResult r;
  r.run_id = j.at("run_id").get<std::string>();
  r.selected_epoch = j.at("selected_epoch").get<int>();
  r.objective_value = j.at("objective_value").get<double>();
  for (const auto& e : j.at("ranking")) {
    r.ranking.emplace_back(e.at("epoch").get<int>(), e.at("objective").get<double>());
  }
  return r;
}

std::string SelectionResult::render_table() const {
  std::string s = fmt::format("run {}: optimal checkpoint at epoch {} (objective {:.4f})\n", run_id,
                              selected_epoch, objective_value);
  s += "  rank  epoch  ixf_norm+iyf_norm\n";
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    s += fmt::format("  {:>4}  {:>5}  {:.4f}{}\n", i + 1, ranking[i].first, ranking[i].second,
                     ranking[i].first == selected_epoch ? "  *" : "");
  }
  return s;
}

}  // namespace ckd
