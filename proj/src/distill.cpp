#include "ckd/distill.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>

#include "ckd/optim.hpp"

namespace ckd {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scalar reference ops

std::vector<double> softened_softmax(const std::vector<double>& logits, double tau) {
  if (logits.empty()) throw ArgumentError("softened_softmax: empty logits");
  if (!(tau > 0.0)) throw ArgumentError(fmt::format("softened_softmax: tau must be > 0, got {}", tau));
  double zmax = -std::numeric_limits<double>::infinity();
  for (double z : logits) {
    if (!std::isfinite(z)) throw ArgumentError("softened_softmax: non-finite logit");
    zmax = std::max(zmax, z / tau);
  }
  std::vector<double> p(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / tau - zmax);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

namespace {

void check_teacher_probs(const std::vector<double>& p, std::size_t k) {
  if (p.size() != k) {
    throw ArgumentError(fmt::format("teacher_probs length {} != {}", p.size(), k));
  }
  double sum = 0.0;
  for (double v : p) sum += v;
  if (std::abs(sum - 1.0) > 1e-6) {
    throw ArgumentError(fmt::format("teacher_probs not normalized (sum = {:.9g})", sum));
  }
}

double cross_entropy_from_probs(const std::vector<double>& p, const std::vector<double>& q_logprob) {
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) h -= p[i] * q_logprob[i];
  return h;
}

std::vector<double> log_softmax(const std::vector<double>& logits, double tau) {
  double zmax = -std::numeric_limits<double>::infinity();
  for (double z : logits) zmax = std::max(zmax, z / tau);
  double denom = 0.0;
  for (double z : logits) denom += std::exp(z / tau - zmax);
  const double log_denom = std::log(denom);
  std::vector<double> lp(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) lp[i] = logits[i] / tau - zmax - log_denom;
  return lp;
}

}  // namespace

double kd_loss(const std::vector<double>& student_logits, const std::vector<double>& teacher_probs,
               int label, double alpha, double tau, bool tau_sq_scaling) {
  const std::size_t k = student_logits.size();
  if (k == 0) throw ArgumentError("kd_loss: empty student logits");
  if (label < 0 || static_cast<std::size_t>(label) >= k) {
    throw ArgumentError(fmt::format("kd_loss: label {} out of range [0, {})", label, k));
  }
  if (alpha < 0.0 || alpha > 1.0) throw ArgumentError(fmt::format("kd_loss: alpha {} not in [0,1]", alpha));
  check_teacher_probs(teacher_probs, k);

  const auto lp_hard = log_softmax(student_logits, 1.0);
  const double hard = -lp_hard[static_cast<std::size_t>(label)];
  const auto lp_soft = log_softmax(student_logits, tau);
  const double soft = cross_entropy_from_probs(teacher_probs, lp_soft);
  const double scale = tau_sq_scaling ? tau * tau : 1.0;
  return alpha * hard + (1.0 - alpha) * scale * soft;
}

std::vector<double> kd_loss_grad(const std::vector<double>& student_logits,
                                 const std::vector<double>& teacher_probs, int label, double alpha,
                                 double tau, bool tau_sq_scaling) {
  const std::size_t k = student_logits.size();
  check_teacher_probs(teacher_probs, k);
  const auto p1 = softened_softmax(student_logits, 1.0);
  const auto pt = softened_softmax(student_logits, tau);
  const double scale = tau_sq_scaling ? tau * tau : 1.0;
  std::vector<double> g(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double hard = p1[i] - (static_cast<int>(i) == label ? 1.0 : 0.0);
    const double soft = (pt[i] - teacher_probs[i]) / tau;
    g[i] = alpha * hard + (1.0 - alpha) * scale * soft;
  }
  return g;
}

std::vector<double> ensemble_teacher_probs(const std::vector<std::vector<double>>& teacher_logits,
                                           double tau) {
  if (teacher_logits.empty()) throw ArgumentError("ensemble_teacher_probs: empty teacher list");
  const std::size_t k = teacher_logits.front().size();
  std::vector<double> mean(k, 0.0);
  for (const auto& logits : teacher_logits) {
    if (logits.size() != k) {
      throw ArgumentError(fmt::format("ensemble_teacher_probs: member length {} != {}", logits.size(), k));
    }
    const auto p = softened_softmax(logits, tau);
    for (std::size_t i = 0; i < k; ++i) mean[i] += p[i];
  }
  for (double& v : mean) v /= static_cast<double>(teacher_logits.size());
  return mean;
}

std::vector<double> lsr_teacher_probs(int num_classes) {
  if (num_classes < 2) {
    throw ArgumentError(fmt::format("lsr_teacher_probs: need at least 2 classes, got {}", num_classes));
  }
  return std::vector<double>(static_cast<std::size_t>(num_classes), 1.0 / num_classes);
}

// ---------------------------------------------------------------------------
// TeacherSpec / KDConfig

TeacherSpec TeacherSpec::checkpoints(std::vector<TeacherRef> members) {
  if (members.empty()) throw ArgumentError("TeacherSpec: checkpoint teacher needs at least one member");
  TeacherSpec t;
  t.kind = Kind::Checkpoints;
  t.members = std::move(members);
  return t;
}

TeacherSpec TeacherSpec::uniform(int num_classes) {
  if (num_classes < 2) throw ArgumentError("TeacherSpec: uniform teacher needs at least 2 classes");
  TeacherSpec t;
  t.kind = Kind::Uniform;
  t.num_classes = num_classes;
  return t;
}

std::string TeacherSpec::describe() const {
  if (kind == Kind::Uniform) return fmt::format("uniform(K={})", num_classes);
  std::string s;
  for (const auto& m : members) {
    if (!s.empty()) s += "+";
    s += fmt::format("{}@e{}", m.run_id, m.epoch);
  }
  return s;
}

json teacher_spec_to_json(const TeacherSpec& t) {
  json j;
  if (t.kind == TeacherSpec::Kind::Uniform) {
    j["kind"] = "uniform";
    j["num_classes"] = t.num_classes;
  } else {
    j["kind"] = "checkpoints";
    j["members"] = json::array();
    for (const auto& m : t.members) {
      j["members"].push_back(json{{"run_id", m.run_id}, {"epoch", m.epoch}});
    }
  }
  return j;
}

TeacherSpec teacher_spec_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "uniform") return TeacherSpec::uniform(j.at("num_classes").get<int>());
  if (kind != "checkpoints") throw ConfigError(fmt::format("unknown teacher kind '{}'", kind));
  std::vector<TeacherRef> members;
  for (const auto& mj : j.at("members")) {
    members.push_back({mj.at("run_id").get<std::string>(), mj.at("epoch").get<int>()});
  }
  return TeacherSpec::checkpoints(std::move(members));
}

void KDConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError(fmt::format("alpha: must be in [0,1], got {}", alpha));
  if (!(tau >= 1.0)) throw ConfigError(fmt::format("tau: must be >= 1, got {}", tau));
  student_recipe.validate();
}

json kd_config_to_json(const KDConfig& c) {
  return json{{"alpha", c.alpha},
              {"tau", c.tau},
              {"tau_sq_scaling", c.tau_sq_scaling},
              {"student_recipe", recipe_to_json(c.student_recipe)},
              {"seed", c.seed}};
}

KDConfig kd_config_from_json(const json& j) {
  KDConfig c;
  c.alpha = j.at("alpha").get<double>();
  c.tau = j.at("tau").get<double>();
  c.tau_sq_scaling = j.at("tau_sq_scaling").get<bool>();
  c.student_recipe = recipe_from_json(j.at("student_recipe"));
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

void DistilledResult::save(const std::filesystem::path& path) const {
  json j;
  j["student_weights_ref"] = student_weights_ref;
  j["test_accuracy"] = test_accuracy;
  j["teacher_spec"] = teacher_spec_to_json(teacher_spec);
  j["kd_config"] = kd_config_to_json(kd_config);
  j["wall_clock_seconds"] = wall_clock_seconds;
  j["student_arch"] = arch_to_json(student_arch);
  std::ofstream f(path);
  if (!f) throw IoError(fmt::format("cannot write result {}", path.string()));
  f << j.dump(2) << "\n";
}

DistilledResult DistilledResult::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open result {}", path.string()));
  json j = json::parse(f);
  DistilledResult r;
  r.student_weights_ref = j.at("student_weights_ref").get<std::string>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.teacher_spec = teacher_spec_from_json(j.at("teacher_spec"));
  r.kd_config = kd_config_from_json(j.at("kd_config"));
  r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  r.student_arch = arch_from_json(j.at("student_arch"));
  return r;
}

// ---------------------------------------------------------------------------
// CheckpointStore

bool CheckpointStore::has_run(const std::string& run_id) const {
  return std::filesystem::exists(run_dir(run_id) / "manifest.json");
}

CheckpointManifest CheckpointStore::manifest(const std::string& run_id) const {
  const auto path = run_dir(run_id) / "manifest.json";
  if (!std::filesystem::exists(path)) {
    throw IoError(fmt::format("run '{}' not found under {}", run_id, (root_ / "runs").string()));
  }
  return CheckpointManifest::load(path);
}

std::filesystem::path CheckpointStore::weights_path(const TeacherRef& ref) const {
  const auto m = manifest(ref.run_id);
  const auto& rec = m.record_at(ref.epoch);
  const auto path = run_dir(ref.run_id) / rec.weights_ref;
  if (!std::filesystem::exists(path)) {
    throw IoError(fmt::format("checkpoint file {} is missing", path.string()));
  }
  return path;
}

std::unique_ptr<Model> CheckpointStore::load_model(const TeacherRef& ref) const {
  const auto m = manifest(ref.run_id);
  const auto path = weights_path(ref);
  auto model = build_model(m.arch, /*seed=*/0);
  model->load(path);
  return model;
}

// ---------------------------------------------------------------------------
// FrozenTeachers

FrozenTeachers::FrozenTeachers(const TeacherSpec& spec, const CheckpointStore& store,
                               int student_classes) {
  if (spec.kind == TeacherSpec::Kind::Uniform) {
    uniform_ = true;
    num_classes_ = spec.num_classes;
    if (num_classes_ != student_classes) {
      throw ShapeError(fmt::format("uniform teacher has K={} but student has K={}", num_classes_,
                                   student_classes));
    }
    return;
  }
  if (spec.members.empty()) throw ArgumentError("checkpoint teacher spec has no members");
  for (const auto& ref : spec.members) {
    auto model = store.load_model(ref);  // throws before training if unresolvable
    if (model->spec().num_classes != student_classes) {
      throw ShapeError(fmt::format("teacher {}@e{} has K={} but student has K={}", ref.run_id,
                                   ref.epoch, model->spec().num_classes, student_classes));
    }
    models_.push_back(std::move(model));
  }
  num_classes_ = student_classes;
}

void FrozenTeachers::probs(const Tensor& images, double tau, Tensor& out) {
  const int n = images.dim(0);
  out = Tensor({n, num_classes_});
  if (uniform_) {
    out.fill(static_cast<float>(1.0 / num_classes_));
    return;
  }
  for (auto& model : models_) {
    auto fwd = model->forward(images, /*train=*/false);
    softened_softmax_batch(fwd.logits, tau, scratch_);
    const std::int64_t total = out.size();
    for (std::int64_t i = 0; i < total; ++i) out[i] += scratch_[i];
  }
  const float inv = 1.0f / static_cast<float>(models_.size());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= inv;
}

// ---------------------------------------------------------------------------
// Batched loss

double kd_loss_batch(const Tensor& student_logits, const Tensor& teacher_probs,
                     const std::vector<int>& labels, double alpha, double tau, bool tau_sq_scaling,
                     Tensor& dlogits) {
  const int N = student_logits.dim(0), K = student_logits.dim(1);
  dlogits = Tensor({N, K});
  const double scale = tau_sq_scaling ? tau * tau : 1.0;
  const bool hard_only = alpha == 1.0;
  double loss = 0.0;
  std::vector<double> p1(static_cast<std::size_t>(K)), pt(static_cast<std::size_t>(K));
  for (int n = 0; n < N; ++n) {
    const float* z = student_logits.data() + static_cast<std::int64_t>(n) * K;
    const float* tp = teacher_probs.data() + static_cast<std::int64_t>(n) * K;
    float* d = dlogits.data() + static_cast<std::int64_t>(n) * K;
    const int label = labels[static_cast<std::size_t>(n)];

    double zmax1 = -1e300, zmaxt = -1e300;
    for (int k = 0; k < K; ++k) {
      zmax1 = std::max(zmax1, static_cast<double>(z[k]));
      zmaxt = std::max(zmaxt, static_cast<double>(z[k]) / tau);
    }
    double den1 = 0.0, dent = 0.0;
    for (int k = 0; k < K; ++k) {
      p1[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(z[k]) - zmax1);
      den1 += p1[static_cast<std::size_t>(k)];
      pt[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(z[k]) / tau - zmaxt);
      dent += pt[static_cast<std::size_t>(k)];
    }
    double soft = 0.0;
    const double log_dent = std::log(dent);
    for (int k = 0; k < K; ++k) {
      p1[static_cast<std::size_t>(k)] /= den1;
      pt[static_cast<std::size_t>(k)] /= dent;
      if (!hard_only) {
        soft -= static_cast<double>(tp[k]) * (static_cast<double>(z[k]) / tau - zmaxt - log_dent);
      }
    }
    const double hard = -(static_cast<double>(z[label]) - zmax1 - std::log(den1));
    loss += alpha * hard + (1.0 - alpha) * scale * soft;
    for (int k = 0; k < K; ++k) {
      const double ghard = p1[static_cast<std::size_t>(k)] - (k == label ? 1.0 : 0.0);
      const double gsoft = hard_only ? 0.0 : (pt[static_cast<std::size_t>(k)] - static_cast<double>(tp[k])) / tau;
      d[k] = static_cast<float>((alpha * ghard + (1.0 - alpha) * scale * gsoft) / N);
    }
  }
  return loss / N;
}

// ---------------------------------------------------------------------------
// Student training loop

DistilledResult distill_student(const ArchSpec& student_arch, const TeacherSpec& teacher_spec,
                                const KDConfig& kd_config, const Dataset& dataset,
                                const CheckpointStore& store, const std::filesystem::path& out_dir) {
  student_arch.validate();
  kd_config.validate();
  if (dataset.num_classes != student_arch.num_classes) {
    throw ShapeError(fmt::format("dataset has {} classes but student expects {}", dataset.num_classes,
                                 student_arch.num_classes));
  }
  // Resolve every teacher before any training happens.
  FrozenTeachers teachers(teacher_spec, store, student_arch.num_classes);

  std::filesystem::create_directories(out_dir);
  const TrainRecipe& recipe = kd_config.student_recipe;

  Model student(student_arch, kd_config.seed);
  auto params = student.params();
  Sgd opt(recipe.initial_lr, recipe.momentum, recipe.weight_decay);

  std::vector<EpochMetrics> metrics;
  const auto t0 = std::chrono::steady_clock::now();
  Tensor images, teacher_probs, dlogits;
  std::vector<int> labels;
  const bool skip_teachers = kd_config.alpha == 1.0;

  for (int epoch = 1; epoch <= recipe.epochs; ++epoch) {
    const double lr = cosine_lr(epoch - 1, recipe.epochs, recipe.initial_lr);
    opt.set_lr(lr);
    Rng shuffle_rng(mix_seed(kd_config.seed, "kd-shuffle", static_cast<std::uint64_t>(epoch)));
    Rng aug_rng(mix_seed(kd_config.seed, "kd-augment", static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    int batch_count = 0;
    for (const auto& idx : make_batches(dataset.train.count(), recipe.batch_size, shuffle_rng)) {
      gather_batch(dataset.train, idx, images, labels);
      if (recipe.augmentation == Augmentation::StandardCropFlip) augment_standard(images, aug_rng);
      if (skip_teachers) {
        // alpha = 1 is plain supervised training; the teacher term vanishes.
        teacher_probs = Tensor({images.dim(0), student_arch.num_classes});
        teacher_probs.fill(1.0f / static_cast<float>(student_arch.num_classes));
      } else {
        teachers.probs(images, kd_config.tau, teacher_probs);
      }
      auto out = student.forward(images, /*train=*/true);
      zero_grads(params);
      const double loss = kd_loss_batch(out.logits, teacher_probs, labels, kd_config.alpha,
                                        kd_config.tau, kd_config.tau_sq_scaling, dlogits);
      if (!std::isfinite(loss)) {
        throw Error(fmt::format("distillation diverged at epoch {} (non-finite loss)", epoch));
      }
      student.backward_from_logits(dlogits);
      opt.step(params);
      loss_sum += loss;
      ++batch_count;
    }
    const double test_acc = evaluate_accuracy(student, dataset.test);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics.push_back({epoch, loss_sum / std::max(1, batch_count), test_acc, lr, elapsed});
  }

  DistilledResult result;
  result.student_weights_ref = "student.bin";
  result.teacher_spec = teacher_spec;
  result.kd_config = kd_config;
  result.student_arch = student_arch;
  result.test_accuracy = metrics.empty() ? 0.0 : metrics.back().test_acc;
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  student.save(out_dir / result.student_weights_ref);
  write_metrics_csv(out_dir / "metrics.csv", metrics);
  result.save(out_dir / "result.json");
  return result;
}

}  // namespace ckd
