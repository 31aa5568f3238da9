#include "ckd/training.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>

#include "ckd/optim.hpp"

namespace ckd {

using nlohmann::json;

void TrainRecipe::validate() const {
  if (epochs < 1) throw ConfigError(fmt::format("epochs: must be >= 1, got {}", epochs));
  if (batch_size < 1) throw ConfigError(fmt::format("batch_size: must be >= 1, got {}", batch_size));
  if (initial_lr <= 0.0) throw ConfigError(fmt::format("initial_lr: must be positive, got {}", initial_lr));
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError(fmt::format("momentum: must be in [0,1), got {}", momentum));
  }
  if (weight_decay < 0.0) throw ConfigError(fmt::format("weight_decay: must be >= 0, got {}", weight_decay));
  if (checkpoint_every < 1 || checkpoint_every > epochs) {
    throw ConfigError(fmt::format("checkpoint_every: must be in [1, epochs={}], got {}", epochs, checkpoint_every));
  }
}

std::vector<int> TrainRecipe::checkpoint_epochs() const {
  std::vector<int> out;
  for (int e = checkpoint_every; e <= epochs; e += checkpoint_every) out.push_back(e);
  if (out.empty() || out.back() != epochs) out.push_back(epochs);
  return out;
}

const CheckpointRecord& CheckpointManifest::record_at(int epoch) const {
  for (const auto& r : records) {
    if (r.epoch == epoch) return r;
  }
  throw ArgumentError(fmt::format("run {} has no checkpoint at epoch {}", run_id, epoch));
}

const CheckpointRecord& CheckpointManifest::final_record() const {
  if (records.empty()) throw Error(fmt::format("run {} has no checkpoints", run_id));
  return records.back();
}

int CheckpointManifest::nearest_checkpoint_epoch(double fraction) const {
  const double target = fraction * recipe.epochs;
  int best = records.front().epoch;
  double best_d = std::abs(best - target);
  for (const auto& r : records) {
    const double d = std::abs(r.epoch - target);
    if (d < best_d || (d == best_d && r.epoch > best)) {
      best = r.epoch;
      best_d = d;
    }
  }
  return best;
}

double cosine_lr(int epoch, int total_epochs, double initial_lr) {
  if (total_epochs < 1) throw ArgumentError(fmt::format("total_epochs must be >= 1, got {}", total_epochs));
  if (epoch < 0 || epoch > total_epochs) {
    throw ArgumentError(fmt::format("epoch {} out of range [0, {}]", epoch, total_epochs));
  }
  return initial_lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / total_epochs));
}

std::optional<int> early_stop_check(const std::vector<double>& accuracy_history, int patience) {
  if (accuracy_history.empty()) throw ArgumentError("early_stop_check: empty accuracy history");
  if (patience < 1) throw ArgumentError(fmt::format("patience must be >= 1, got {}", patience));
  std::size_t best = 0;
  for (std::size_t i = 1; i < accuracy_history.size(); ++i) {
    if (accuracy_history[i] > accuracy_history[best]) best = i;
  }
  if (accuracy_history.size() - 1 - best >= static_cast<std::size_t>(patience)) {
    return static_cast<int>(best);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSON

namespace {
std::string schedule_name(LrSchedule s) {
  switch (s) {
    case LrSchedule::CosineToZero: return "cosine-to-zero";
  }
  throw Error("unknown schedule");
}
LrSchedule schedule_from_name(const std::string& s) {
  if (s == "cosine-to-zero") return LrSchedule::CosineToZero;
  throw ConfigError(fmt::format("unknown lr schedule '{}'", s));
}
std::string augmentation_name(Augmentation a) {
  switch (a) {
    case Augmentation::StandardCropFlip: return "standard-crop-flip";
    case Augmentation::None: return "none";
  }
  throw Error("unknown augmentation");
}
Augmentation augmentation_from_name(const std::string& s) {
  if (s == "standard-crop-flip") return Augmentation::StandardCropFlip;
  if (s == "none") return Augmentation::None;
  throw ConfigError(fmt::format("unknown augmentation '{}'", s));
}
}  // namespace

json arch_to_json(const ArchSpec& a) {
  return json{{"family", family_name(a.family)},
              {"depth", a.depth},
              {"width_multiplier", a.width_multiplier},
              {"num_classes", a.num_classes},
              {"input_resolution", a.input_resolution}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.family = family_from_name(j.at("family").get<std::string>());
  a.depth = j.at("depth").get<int>();
  a.width_multiplier = j.at("width_multiplier").get<double>();
  a.num_classes = j.at("num_classes").get<int>();
  a.input_resolution = j.at("input_resolution").get<int>();
  a.validate();
  return a;
}

json recipe_to_json(const TrainRecipe& r) {
  return json{{"epochs", r.epochs},
              {"batch_size", r.batch_size},
              {"initial_lr", r.initial_lr},
              {"lr_schedule", schedule_name(r.lr_schedule)},
              {"momentum", r.momentum},
              {"weight_decay", r.weight_decay},
              {"checkpoint_every", r.checkpoint_every},
              {"augmentation", augmentation_name(r.augmentation)},
              {"seed", r.seed}};
}

TrainRecipe recipe_from_json(const json& j) {
  TrainRecipe r;
  r.epochs = j.at("epochs").get<int>();
  r.batch_size = j.at("batch_size").get<int>();
  r.initial_lr = j.at("initial_lr").get<double>();
  r.lr_schedule = schedule_from_name(j.at("lr_schedule").get<std::string>());
  r.momentum = j.at("momentum").get<double>();
  r.weight_decay = j.at("weight_decay").get<double>();
  r.checkpoint_every = j.at("checkpoint_every").get<int>();
  r.augmentation = augmentation_from_name(j.at("augmentation").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.validate();
  return r;
}

void CheckpointManifest::save(const std::filesystem::path& path) const {
  json j;
  j["run_id"] = run_id;
  j["arch"] = arch_to_json(arch);
  j["recipe"] = recipe_to_json(recipe);
  j["records"] = json::array();
  for (const auto& r : records) {
    j["records"].push_back(json{{"epoch", r.epoch},
                                {"weights_ref", r.weights_ref},
                                {"test_accuracy", r.test_accuracy},
                                {"train_loss", r.train_loss},
                                {"wall_clock_seconds", r.wall_clock_seconds}});
  }
  if (early_stop_epoch) {
    j["early_stop_epoch"] = *early_stop_epoch;
  } else {
    j["early_stop_epoch"] = nullptr;
  }
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write manifest {}", path.string()));
  f << j.dump(2) << "\n";
}

CheckpointManifest CheckpointManifest::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open manifest {}", path.string()));
  json j = json::parse(f);
  CheckpointManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.arch = arch_from_json(j.at("arch"));
  m.recipe = recipe_from_json(j.at("recipe"));
  for (const auto& rj : j.at("records")) {
    CheckpointRecord r;
    r.epoch = rj.at("epoch").get<int>();
    r.weights_ref = rj.at("weights_ref").get<std::string>();
    r.test_accuracy = rj.at("test_accuracy").get<double>();
    r.train_loss = rj.at("train_loss").get<double>();
    r.wall_clock_seconds = rj.at("wall_clock_seconds").get<double>();
    m.records.push_back(std::move(r));
  }
  if (j.contains("early_stop_epoch") && !j.at("early_stop_epoch").is_null()) {
    m.early_stop_epoch = j.at("early_stop_epoch").get<int>();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Metrics CSV

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write metrics {}", path.string()));
  f << "epoch,train_loss,test_acc,lr,wall_clock_s\n";
  for (const auto& r : rows) {
    f << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.6g}\n", r.epoch, r.train_loss, r.test_acc, r.lr,
                     r.wall_clock_s);
  }
}

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open metrics {}", path.string()));
  std::string line;
  std::getline(f, line);
  if (line != "epoch,train_loss,test_acc,lr,wall_clock_s") {
    throw IoError(fmt::format("unexpected metrics header in {}", path.string()));
  }
  std::vector<EpochMetrics> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    EpochMetrics m{};
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &m.epoch, &m.train_loss, &m.test_acc, &m.lr,
                    &m.wall_clock_s) != 5) {
      throw IoError(fmt::format("bad metrics row '{}' in {}", line, path.string()));
    }
    rows.push_back(m);
  }
  return rows;
}

double evaluate_accuracy(Model& model, const DataSplit& split, int batch_size) {
  if (split.count() == 0) throw ArgumentError("evaluate_accuracy: empty split");
  Tensor images;
  std::vector<int> labels;
  double correct = 0.0;
  for (const auto& idx : make_eval_batches(split.count(), batch_size)) {
    gather_batch(split, idx, images, labels);
    const auto out = model.forward(images, /*train=*/false);
    correct += top1_accuracy(out.logits, labels) * static_cast<double>(idx.size());
  }
  return correct / split.count();
}

// ---------------------------------------------------------------------------
// Teacher training

CheckpointManifest train_teacher(const ArchSpec& arch, const TrainRecipe& recipe, const Dataset& dataset,
                                 const std::filesystem::path& run_dir, const std::string& run_id) {
  arch.validate();
  recipe.validate();
  if (dataset.resolution != arch.input_resolution) {
    throw ShapeError(fmt::format("dataset resolution {} does not match arch resolution {}",
                                 dataset.resolution, arch.input_resolution));
  }
  if (dataset.num_classes != arch.num_classes) {
    throw ShapeError(fmt::format("dataset has {} classes but arch expects {}", dataset.num_classes,
                                 arch.num_classes));
  }
  std::filesystem::create_directories(run_dir);

  Model model(arch, recipe.seed);
  auto params = model.params();
  Sgd opt(recipe.initial_lr, recipe.momentum, recipe.weight_decay);

  CheckpointManifest manifest;
  manifest.run_id = run_id;
  manifest.arch = arch;
  manifest.recipe = recipe;

  std::vector<EpochMetrics> metrics;
  std::vector<double> acc_history;
  const auto t0 = std::chrono::steady_clock::now();
  Tensor images, dlogits;
  std::vector<int> labels;

  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    const double lr = cosine_lr(epoch - 1, recipe.epochs, recipe.initial_lr);
    opt.set_lr(lr);
    Rng shuffle_rng(mix_seed(recipe.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    Rng aug_rng(mix_seed(recipe.seed, "augment", static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    int batch_count = 0;
    for (const auto& idx : make_batches(dataset.train.count(), recipe.batch_size, shuffle_rng)) {
      gather_batch(dataset.train, idx, images, labels);
      if (recipe.augmentation == Augmentation::StandardCropFlip) augment_standard(images, aug_rng);
      auto out = model.forward(images, /*train=*/true);
      zero_grads(params);
      const double loss = softmax_xent_batch(out.logits, labels, dlogits);
      if (!std::isfinite(loss)) {
        throw Error(fmt::format("training diverged at epoch {} (non-finite loss); "
                                "lower initial_lr or check the data",
                                epoch));
      }
      model.backward_from_logits(dlogits);
      opt.step(params);
      loss_sum += loss;
      ++batch_count;
    }
    const double train_loss = loss_sum / std::max(1, batch_count);
    const double test_acc = evaluate_accuracy(model, dataset.test);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.push_back({epoch, train_loss, test_acc, lr, elapsed});
    acc_history.push_back(test_acc);

    if (epoch % recipe.checkpoint_every == 0 || epoch == recipe.epochs) {
      CheckpointRecord rec;
      rec.epoch = epoch;
      rec.weights_ref = fmt::format("ckpt_e{}.bin", epoch);
      rec.test_accuracy = test_acc;
      rec.train_loss = train_loss;
      rec.wall_clock_seconds = elapsed;
      model.save(run_dir / rec.weights_ref);
      manifest.records.push_back(std::move(rec));
    }
  }

  // early_stop_check works on 0-based history indices; epochs are 1-based.
  if (auto stop = early_stop_check(acc_history, 10)) manifest.early_stop_epoch = *stop + 1;
  manifest.save(run_dir / "manifest.json");
  write_metrics_csv(run_dir / "metrics.csv", metrics);
  return manifest;
}

}  // namespace ckd
