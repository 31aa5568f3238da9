#include "ckd/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "ckd/plot.hpp"

namespace ckd {

std::vector<std::vector<double>> class_mean_vectors(Model& model, const DataSplit& split,
                                                    MeanVectorMode mode, double tau) {
  const int K = model.spec().num_classes;
  if (split.count() == 0) throw ArgumentError("class_mean_vectors: empty split");
  std::vector<std::vector<double>> sums(static_cast<std::size_t>(K),
                                        std::vector<double>(static_cast<std::size_t>(K), 0.0));
  std::vector<int> counts(static_cast<std::size_t>(K), 0);

  Tensor images, probs;
  std::vector<int> labels;
  for (const auto& idx : make_eval_batches(split.count(), 128)) {
    gather_batch(split, idx, images, labels);
    auto out = model.forward(images, /*train=*/false);
    const Tensor* src = &out.logits;
    if (mode == MeanVectorMode::SoftProbs) {
      softened_softmax_batch(out.logits, tau, probs);
      src = &probs;
    }
    for (std::size_t n = 0; n < labels.size(); ++n) {
      const int cls = labels[n];
      auto& acc = sums[static_cast<std::size_t>(cls)];
      const float* row = src->data() + static_cast<std::int64_t>(n) * K;
      for (int k = 0; k < K; ++k) acc[static_cast<std::size_t>(k)] += row[k];
      ++counts[static_cast<std::size_t>(cls)];
    }
  }

  std::vector<int> missing;
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<std::size_t>(k)] == 0) missing.push_back(k);
  }
  if (!missing.empty()) {
    std::string list;
    for (int m : missing) list += (list.empty() ? "" : ", ") + std::to_string(m);
    throw ArgumentError(fmt::format("class_mean_vectors: split has no samples for classes [{}]", list));
  }
  for (int k = 0; k < K; ++k) {
    for (auto& v : sums[static_cast<std::size_t>(k)]) v /= counts[static_cast<std::size_t>(k)];
  }
  return sums;
}

ClassSimilarityMatrix cosine_similarity_matrix(const std::vector<std::vector<double>>& vectors) {
  const int K = static_cast<int>(vectors.size());
  if (K < 1) throw ArgumentError("cosine_similarity_matrix: no vectors");
  std::vector<double> norms(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) {
    double s = 0.0;
    for (double v : vectors[static_cast<std::size_t>(i)]) s += v * v;
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
    if (norms[static_cast<std::size_t>(i)] == 0.0) {
      throw ArgumentError(fmt::format("cosine_similarity_matrix: class {} has a zero-norm vector", i));
    }
  }
  ClassSimilarityMatrix m;
  m.num_classes = K;
  m.values.resize(static_cast<std::size_t>(K) * K);
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      double dot = 0.0;
      const auto& a = vectors[static_cast<std::size_t>(i)];
      const auto& b = vectors[static_cast<std::size_t>(j)];
      for (std::size_t t = 0; t < a.size(); ++t) dot += a[t] * b[t];
      m.values[static_cast<std::size_t>(i) * K + j] =
          dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
    }
  }
  return m;
}

void ClassSimilarityMatrix::save_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write heatmap CSV {}", path.string()));
  for (int j = 0; j < num_classes; ++j) f << (j ? "," : "") << j;
  f << "\n";
  for (int i = 0; i < num_classes; ++i) {
    for (int j = 0; j < num_classes; ++j) f << (j ? "," : "") << fmt::format("{:.9g}", at(i, j));
    f << "\n";
  }
}

void ClassSimilarityMatrix::save_png(const std::filesystem::path& path, int cell_pixels) const {
  // Min-max scaled rendering; the CSV keeps the raw values.
  double lo = values.front(), hi = values.front();
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  Canvas canvas(num_classes * cell_pixels, num_classes * cell_pixels);
  for (int i = 0; i < num_classes; ++i) {
    for (int j = 0; j < num_classes; ++j) {
      const Rgb c = heat_color((at(i, j) - lo) / span);
      canvas.fill_rect(j * cell_pixels, i * cell_pixels, (j + 1) * cell_pixels - 1,
                       (i + 1) * cell_pixels - 1, c);
    }
  }
  canvas.save_png(path);
}

DiversityMetrics diversity_metrics(const ClassSimilarityMatrix& m) {
  if (m.num_classes < 2) throw ArgumentError("diversity_metrics: need at least a 2x2 matrix");
  double sum = 0.0, lo = 0.0, hi = 0.0;
  bool first = true;
  std::vector<double> offdiag;
  for (int i = 0; i < m.num_classes; ++i) {
    for (int j = 0; j < m.num_classes; ++j) {
      if (i == j) continue;
      const double v = m.at(i, j);
      offdiag.push_back(v);
      sum += v;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  DiversityMetrics d;
  d.offdiag_mean = sum / static_cast<double>(offdiag.size());
  double var = 0.0;
  for (double v : offdiag) var += (v - d.offdiag_mean) * (v - d.offdiag_mean);
  d.offdiag_std = std::sqrt(var / static_cast<double>(offdiag.size()));
  d.offdiag_range = hi - lo;
  return d;
}

std::vector<LogitProfile> logit_profiles(Model& model, const DataSplit& split,
                                         const std::vector<int>& class_ids) {
  const int K = model.spec().num_classes;
  for (int c : class_ids) {
    if (c < 0 || c >= K) throw ArgumentError(fmt::format("logit_profiles: invalid class id {}", c));
  }
  auto means = class_mean_vectors(model, split, MeanVectorMode::Logits);
  std::vector<LogitProfile> out;
  for (int c : class_ids) {
    LogitProfile prof;
    prof.class_id = c;
    prof.mean_logits = means[static_cast<std::size_t>(c)];
    double mean = 0.0;
    for (double v : prof.mean_logits) mean += v;
    mean /= static_cast<double>(K);
    double var = 0.0;
    for (double v : prof.mean_logits) var += (v - mean) * (v - mean);
    prof.variance = var / static_cast<double>(K);
    for (int k = 1; k + 1 < K; ++k) {
      if (prof.mean_logits[static_cast<std::size_t>(k)] > prof.mean_logits[static_cast<std::size_t>(k - 1)] &&
          prof.mean_logits[static_cast<std::size_t>(k)] > prof.mean_logits[static_cast<std::size_t>(k + 1)]) {
        ++prof.peak_count;
      }
    }
    out.push_back(std::move(prof));
  }
  return out;
}

void export_info_plane(const std::vector<MICurve>& curves,
                       const std::vector<InfoPlaneAnnotation>& annotations, bool use_normalized,
                       const std::filesystem::path& png_path, const std::filesystem::path& csv_path) {
  if (curves.empty()) throw ArgumentError("export_info_plane: no curves");
  if (use_normalized) {
    for (const auto& c : curves) {
      if (!c.normalized()) {
        throw ArgumentError(fmt::format("export_info_plane: curve {} is not normalized", c.run_id));
      }
    }
  }

  auto coord = [&](const MIPoint& p) {
    return std::pair<double, double>(use_normalized ? *p.ixf_norm : p.ixf_raw,
                                     use_normalized ? *p.iyf_norm : p.iyf_raw);
  };

  std::ofstream f(csv_path);
  if (!f) throw IoError(fmt::format("cannot write info-plane CSV {}", csv_path.string()));
  f << "run_id,epoch,ixf,iyf,annotation\n";
  std::map<std::pair<std::string, int>, std::string> notes;
  for (const auto& a : annotations) notes[{a.run_id, a.epoch}] = a.label;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      const auto [x, y] = coord(p);
      auto it = notes.find({c.run_id, p.epoch});
      f << fmt::format("{},{},{:.9g},{:.9g},{}\n", c.run_id, p.epoch, x, y,
                       it == notes.end() ? "" : it->second);
    }
  }
  f.close();

  // Plot with shared axes over all curves.
  double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      const auto [x, y] = coord(p);
      xlo = std::min(xlo, x);
      xhi = std::max(xhi, x);
      ylo = std::min(ylo, y);
      yhi = std::max(yhi, y);
    }
  }
  if (xhi <= xlo) xhi = xlo + 1.0;
  if (yhi <= ylo) yhi = ylo + 1.0;

  const int W = 640, H = 480, margin = 40;
  Canvas canvas(W, H);
  const Rgb axis{60, 60, 60};
  canvas.line(margin, H - margin, W - margin, H - margin, axis);
  canvas.line(margin, H - margin, margin, margin, axis);
  auto px = [&](double x) {
    return margin + static_cast<int>(std::lround((x - xlo) / (xhi - xlo) * (W - 2 * margin)));
  };
  auto py = [&](double y) {
    return H - margin - static_cast<int>(std::lround((y - ylo) / (yhi - ylo) * (H - 2 * margin)));
  };
  const Rgb palette[6] = {{200, 40, 40}, {40, 80, 200}, {40, 160, 80},
                          {200, 140, 30}, {140, 60, 180}, {70, 70, 70}};
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const Rgb color = palette[ci % 6];
    const auto& pts = curves[ci].points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto [x, y] = coord(pts[i]);
      canvas.marker_circle(px(x), py(y), 3, color);
      if (i > 0) {
        const auto [x0, y0] = coord(pts[i - 1]);
        canvas.line(px(x0), py(y0), px(x), py(y), color);
      }
      if (notes.count({curves[ci].run_id, pts[i].epoch})) {
        canvas.marker_star(px(x), py(y), 9, {180, 0, 120});
      }
    }
  }
  canvas.save_png(png_path);
}

double teacher_cost_seconds(const TeacherSpec& spec, const CheckpointStore& store) {
  if (spec.kind == TeacherSpec::Kind::Uniform) return 0.0;
  std::map<std::string, int> max_epoch;
  for (const auto& m : spec.members) {
    auto [it, inserted] = max_epoch.try_emplace(m.run_id, m.epoch);
    if (!inserted) it->second = std::max(it->second, m.epoch);
  }
  double total = 0.0;
  for (const auto& [run_id, epoch] : max_epoch) {
    total += store.manifest(run_id).record_at(epoch).wall_clock_seconds;
  }
  return total;
}

CostRow make_cost_row(const std::string& label, const std::vector<DistilledResult>& seed_results,
                      const CheckpointStore& store) {
  if (seed_results.empty()) throw ArgumentError("make_cost_row: no results");
  CostRow row;
  row.label = label;
  double acc_sum = 0.0, distill_sum = 0.0, teacher_sum = 0.0;
  for (const auto& r : seed_results) {
    acc_sum += r.test_accuracy;
    distill_sum += r.wall_clock_seconds;
    teacher_sum += teacher_cost_seconds(r.teacher_spec, store);
  }
  row.teacher_training_seconds = teacher_sum / static_cast<double>(seed_results.size());
  const double n = static_cast<double>(seed_results.size());
  row.distill_seconds = distill_sum / n;
  row.total_seconds = row.teacher_training_seconds + row.distill_seconds;
  row.student_accuracy_mean = acc_sum / n;
  if (seed_results.size() >= 2) {
    double var = 0.0;
    for (const auto& r : seed_results) {
      var += (r.test_accuracy - row.student_accuracy_mean) * (r.test_accuracy - row.student_accuracy_mean);
    }
    row.student_accuracy_std = std::sqrt(var / (n - 1.0));
  }
  return row;
}

void CostReport::save_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write cost report {}", path.string()));
  f << "label,teacher_training_seconds,distill_seconds,total_seconds,student_accuracy_mean,student_accuracy_std\n";
  for (const auto& r : rows) {
    f << fmt::format("{},{:.6g},{:.6g},{:.6g},{:.9g},{}\n", r.label, r.teacher_training_seconds,
                     r.distill_seconds, r.total_seconds, r.student_accuracy_mean,
                     r.student_accuracy_std ? fmt::format("{:.9g}", *r.student_accuracy_std) : "");
  }
  for (const auto& note : footnotes) f << fmt::format("# {}\n", note);
}

std::string CostReport::render_text() const {
  std::string s =
      fmt::format("{:<28} {:>12} {:>12} {:>12} {:>18}\n", "condition", "teacher_s", "distill_s",
                  "total_s", "student_acc");
  for (const auto& r : rows) {
    s += fmt::format("{:<28} {:>12.1f} {:>12.1f} {:>12.1f} {:>12.4f}{}\n", r.label,
                     r.teacher_training_seconds, r.distill_seconds, r.total_seconds,
                     r.student_accuracy_mean,
                     r.student_accuracy_std ? fmt::format(" ± {:.4f}", *r.student_accuracy_std) : "");
  }
  for (const auto& note : footnotes) s += fmt::format("note: {}\n", note);
  return s;
}

}  // namespace ckd
