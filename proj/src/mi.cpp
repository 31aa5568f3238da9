#include "ckd/mi.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "ckd/optim.hpp"

namespace ckd {

Decoder::Decoder(int in_channels, const DecoderSpec& spec, std::uint64_t seed,
                 std::uint64_t backbone_checksum)
    : spec_(spec), backbone_checksum_(backbone_checksum) {
  Rng rng(mix_seed(seed, "decoder-init"));
  body_.add("resize", std::make_unique<BilinearResize>(spec.target_resolution, spec.target_resolution));
  body_.add("conv1", std::make_unique<Conv2d>(in_channels, spec.hidden_channels, 3, 1, 1, false, rng));
  body_.add("bn1", std::make_unique<BatchNorm2d>(spec.hidden_channels));
  body_.add("relu1", std::make_unique<ReLU>());
  body_.add("conv2", std::make_unique<Conv2d>(spec.hidden_channels, spec.out_channels, 3, 1, 1, true, rng));
}

Tensor Decoder::reconstruct(const Tensor& features) {
  return sigmoid_.forward(body_.forward(features, /*train=*/false), /*train=*/false);
}

double mean_pixel_bce(const Tensor& reconstruction, const Tensor& target) {
  if (reconstruction.shape() != target.shape()) {
    throw ShapeError(fmt::format("BCE shape mismatch: {} vs {}", reconstruction.shape_str(),
                                 target.shape_str()));
  }
  constexpr double eps = 1e-7;
  const std::int64_t n = reconstruction.size();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double y = reconstruction[i];
    const double t = target[i];
    double term = 0.0;
    if (t > 0.0) term -= t * std::log(std::max(y, eps));
    if (t < 1.0) term -= (1.0 - t) * std::log(std::max(1.0 - y, eps));
    sum += term;
  }
  return sum / static_cast<double>(n);
}

namespace {

/// Features of the whole split in evaluation mode, computed once (the
/// backbone is frozen during decoder fitting).
Tensor collect_features(Model& model, const DataSplit& split, int batch_size) {
  Tensor images;
  std::vector<int> labels;
  Tensor features;
  std::int64_t offset = 0;
  for (const auto& idx : make_eval_batches(split.count(), batch_size)) {
    gather_batch(split, idx, images, labels);
    auto out = model.forward(images, /*train=*/false);
    if (features.empty()) {
      auto shape = out.features.shape();
      shape[0] = split.count();
      features = Tensor(shape);
    }
    std::copy(out.features.data(), out.features.data() + out.features.size(), features.data() + offset);
    offset += out.features.size();
  }
  return features;
}

void slice_rows(const Tensor& src, const std::vector<int>& indices, Tensor& out) {
  auto shape = src.shape();
  const std::int64_t row = src.size() / shape[0];
  shape[0] = static_cast<int>(indices.size());
  out = Tensor(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy(src.data() + indices[i] * row, src.data() + (indices[i] + 1) * row,
              out.data() + static_cast<std::int64_t>(i) * row);
  }
}

}  // namespace

Decoder fit_decoder(Model& frozen_model, const Dataset& dataset, const DecoderSpec& spec,
                    int fit_epochs, std::uint64_t seed) {
  if (fit_epochs < 1) throw ArgumentError(fmt::format("fit_epochs must be >= 1, got {}", fit_epochs));
  const DataSplit& split = dataset.train;
  if (split.count() == 0) throw ArgumentError("fit_decoder: empty train split");

  Tensor features = collect_features(frozen_model, split, spec.fit_batch_size);
  Decoder decoder(features.dim(1), spec, seed, frozen_model.checksum());

  std::vector<Param*> params;
  decoder.body_.collect_params(params);
  Adam opt(spec.fit_lr);

  Tensor batch_feat, batch_img;
  std::vector<int> dummy_labels;
  std::vector<double> history;
  for (int epoch = 1; epoch <= fit_epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(seed, "decoder-shuffle", static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (const auto& idx : make_batches(split.count(), spec.fit_batch_size, shuffle_rng)) {
      slice_rows(features, idx, batch_feat);
      gather_batch(split, idx, batch_img, dummy_labels);
      Tensor z = decoder.body_.forward(batch_feat, /*train=*/true);
      // Fused sigmoid + BCE gradient: d(loss)/dz = (sigmoid(z) - t) / n.
      Tensor dz(z.shape());
      const std::int64_t n = z.size();
      double loss = 0.0;
      constexpr double eps = 1e-7;
      for (std::int64_t i = 0; i < n; ++i) {
        const double y = 1.0 / (1.0 + std::exp(-static_cast<double>(z[i])));
        const double t = batch_img[i];
        if (t > 0.0) loss -= t * std::log(std::max(y, eps));
        if (t < 1.0) loss -= (1.0 - t) * std::log(std::max(1.0 - y, eps));
        dz[i] = static_cast<float>((y - t) / static_cast<double>(n));
      }
      loss /= static_cast<double>(n);
      zero_grads(params);
      decoder.body_.backward(dz);
      opt.step(params);
      loss_sum += loss * static_cast<double>(n);
      seen += n;
    }
    history.push_back(loss_sum / static_cast<double>(seen));

    // Smoothed non-increase check plus plateau stop.
    const int w = spec.plateau_window;
    if (static_cast<int>(history.size()) > w) {
      double prev = 0.0, curr = 0.0;
      for (int i = 0; i < w; ++i) {
        prev += history[history.size() - 2 - static_cast<std::size_t>(i)];
        curr += history[history.size() - 1 - static_cast<std::size_t>(i)];
      }
      if (curr > prev + 1e-12) decoder.convergence_warning_ = true;
      const double base = history[history.size() - 1 - static_cast<std::size_t>(w)];
      const double rel = (base - history.back()) / std::max(std::abs(base), 1e-12);
      if (rel < spec.plateau_rel_improvement) break;
    }
  }
  decoder.fit_loss_history_ = history;
  decoder.final_fit_loss_ = history.back();
  return decoder;
}

double estimate_ixf(Model& frozen_model, Decoder& decoder, const DataSplit& eval_split) {
  if (eval_split.count() == 0) throw ArgumentError("estimate_ixf: empty split");
  if (decoder.paired_checksum() != frozen_model.checksum()) {
    throw ArgumentError("estimate_ixf: decoder was fitted against a different backbone");
  }
  Tensor images, recon;
  std::vector<int> labels;
  double loss_sum = 0.0;
  std::int64_t total = 0;
  for (const auto& idx : make_eval_batches(eval_split.count(), 128)) {
    gather_batch(eval_split, idx, images, labels);
    auto out = frozen_model.forward(images, /*train=*/false);
    recon = decoder.reconstruct(out.features);
    loss_sum += mean_pixel_bce(recon, images) * static_cast<double>(recon.size());
    total += recon.size();
  }
  return -(loss_sum / static_cast<double>(total));
}

double estimate_iyf(Model& frozen_model, const DataSplit& test_split) {
  if (test_split.count() == 0) throw ArgumentError("estimate_iyf: empty split");
  return evaluate_accuracy(frozen_model, test_split);
}

bool MICurve::normalized() const {
  if (points.empty()) return false;
  for (const auto& p : points) {
    if (!p.ixf_norm || !p.iyf_norm) return false;
  }
  return true;
}

void MICurve::save_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write MI curve {}", path.string()));
  f << "epoch,ixf_raw,iyf_raw,ixf_norm,iyf_norm\n";
  for (const auto& p : points) {
    f << fmt::format("{},{:.9g},{:.9g},{},{}\n", p.epoch, p.ixf_raw, p.iyf_raw,
                     p.ixf_norm ? fmt::format("{:.9g}", *p.ixf_norm) : "",
                     p.iyf_norm ? fmt::format("{:.9g}", *p.iyf_norm) : "");
  }
}

MICurve MICurve::load_csv(const std::filesystem::path& path, std::string run_id) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open MI curve {}", path.string()));
  std::string line;
  std::getline(f, line);
  if (line != "epoch,ixf_raw,iyf_raw,ixf_norm,iyf_norm") {
    throw IoError(fmt::format("unexpected MI curve header in {}", path.string()));
  }
  MICurve c;
  c.run_id = std::move(run_id);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MIPoint p;
    std::getline(ss, field, ',');
    p.epoch = std::stoi(field);
    std::getline(ss, field, ',');
    p.ixf_raw = std::stod(field);
    std::getline(ss, field, ',');
    p.iyf_raw = std::stod(field);
    if (std::getline(ss, field, ',') && !field.empty()) p.ixf_norm = std::stod(field);
    if (std::getline(ss, field, ',') && !field.empty()) p.iyf_norm = std::stod(field);
    c.points.push_back(p);
  }
  return c;
}

MICurve build_mi_curve(const CheckpointManifest& manifest, const Dataset& dataset,
                       const CheckpointStore& store, const DecoderSpec& spec, int fit_epochs,
                       std::uint64_t decoder_seed, const std::string& eval_split) {
  if (eval_split != "train" && eval_split != "test") {
    throw ArgumentError(fmt::format("eval_split must be 'train' or 'test', got '{}'", eval_split));
  }
  MICurve curve;
  curve.run_id = manifest.run_id;
  curve.eval_split = eval_split;
  curve.decoder_fit_epochs = fit_epochs;
  for (const auto& rec : manifest.records) {
    std::unique_ptr<Model> model;
    try {
      model = store.load_model({manifest.run_id, rec.epoch});
    } catch (const Error& e) {
      throw IoError(fmt::format("MI curve aborted at epoch {}: {}", rec.epoch, e.what()));
    }
    Decoder decoder = fit_decoder(*model, dataset, spec, fit_epochs, decoder_seed);
    MIPoint p;
    p.epoch = rec.epoch;
    p.ixf_raw = estimate_ixf(*model, decoder, eval_split == "train" ? dataset.train : dataset.test);
    p.iyf_raw = estimate_iyf(*model, dataset.test);
    curve.points.push_back(p);
  }
  return curve;
}

MICurve normalize_curve(const MICurve& curve) {
  if (curve.points.size() < 2) {
    throw ArgumentError(fmt::format("normalize_curve: need >= 2 points, got {}", curve.points.size()));
  }
  MICurve out = curve;
  auto minmax = [](const std::vector<double>& v) {
    double lo = v.front(), hi = v.front();
    for (double x : v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    return std::pair<double, double>(lo, hi);
  };
  std::vector<double> ixf, iyf;
  for (const auto& p : curve.points) {
    ixf.push_back(p.ixf_raw);
    iyf.push_back(p.iyf_raw);
  }
  const auto [xlo, xhi] = minmax(ixf);
  const auto [ylo, yhi] = minmax(iyf);
  for (auto& p : out.points) {
    p.ixf_norm = xhi > xlo ? (p.ixf_raw - xlo) / (xhi - xlo) : 1.0;
    p.iyf_norm = yhi > ylo ? (p.iyf_raw - ylo) / (yhi - ylo) : 1.0;
  }
  return out;
}

}  // namespace ckd
