#include "ckd/harness.hpp"

#include <fmt/format.h>
#include <sys/wait.h>
#include <unistd.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <unordered_map>

namespace ckd {

using nlohmann::json;

const char* kCodeVersion = "ckd 0.1.0";

// ---------------------------------------------------------------------------
// DatasetConfig

json DatasetConfig::to_json() const {
  return json{{"name", name},
              {"root", root},
              {"subset_fraction", subset_fraction},
              {"subset_seed", subset_seed},
              {"train_per_class", train_per_class},
              {"test_per_class", test_per_class},
              {"resolution", resolution},
              {"seed", seed},
              {"clusters", clusters},
              {"signal", signal},
              {"nuisance", nuisance},
              {"noise", noise}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  DatasetConfig c;
  c.name = j.value("name", c.name);
  c.root = j.value("root", c.root);
  c.subset_fraction = j.value("subset_fraction", c.subset_fraction);
  c.subset_seed = j.value("subset_seed", c.subset_seed);
  c.train_per_class = j.value("train_per_class", c.train_per_class);
  c.test_per_class = j.value("test_per_class", c.test_per_class);
  c.resolution = j.value("resolution", c.resolution);
  c.seed = j.value("seed", c.seed);
  c.clusters = j.value("clusters", c.clusters);
  c.signal = j.value("signal", c.signal);
  c.nuisance = j.value("nuisance", c.nuisance);
  c.noise = j.value("noise", c.noise);
  return c;
}

std::shared_ptr<const Dataset> DatasetConfig::load() const {
  static std::mutex mu;
  static std::unordered_map<std::uint64_t, std::shared_ptr<const Dataset>> cache;
  const std::string key = to_json().dump();
  const std::uint64_t h = fnv1a64(key.data(), key.size());
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(h);
    if (it != cache.end()) return it->second;
  }

  Dataset ds;
  if (name == "cifar10") {
    if (root.empty()) throw ConfigError("dataset cifar10 requires 'root' (directory of *.bin batches)");
    ds = load_cifar10(root);
  } else if (name == "cifar100") {
    if (root.empty()) throw ConfigError("dataset cifar100 requires 'root'");
    ds = load_cifar100(root);
  } else if (name.rfind("synth", 0) == 0) {
    SyntheticSpec spec;
    try {
      spec.num_classes = std::stoi(name.substr(5));
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("bad synthetic dataset name '{}', expected synth<K>", name));
    }
    spec.train_per_class = train_per_class;
    spec.test_per_class = test_per_class;
    spec.resolution = resolution;
    spec.seed = seed;
    spec.clusters = clusters;
    spec.signal = signal;
    spec.nuisance = nuisance;
    spec.noise = noise;
    ds = make_synthetic(spec);
  } else {
    throw ConfigError(fmt::format("unknown dataset '{}'", name));
  }
  if (subset_fraction < 1.0) ds = subset_train(ds, subset_fraction, subset_seed);

  auto ptr = std::make_shared<const Dataset>(std::move(ds));
  std::lock_guard<std::mutex> lock(mu);
  cache[h] = ptr;
  return ptr;
}

// ---------------------------------------------------------------------------
// Config files

namespace {

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
      return nullptr;
    case YAML::NodeType::Scalar: {
      // Try int, then double, then bool, else string.
      const std::string& s = node.Scalar();
      try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
      } catch (const std::exception&) {
      }
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } catch (const std::exception&) {
      }
      if (s == "true" || s == "True") return true;
      if (s == "false" || s == "False") return false;
      return s;
    }
    case YAML::NodeType::Sequence: {
      json arr = json::array();
      for (const auto& item : node) arr.push_back(yaml_to_json(item));
      return arr;
    }
    case YAML::NodeType::Map: {
      json obj = json::object();
      for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return obj;
    }
    default:
      return nullptr;
  }
}

TrainRecipe recipe_from_json_partial(const json& j, TrainRecipe base) {
  if (j.contains("epochs")) base.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<int>();
  if (j.contains("initial_lr")) base.initial_lr = j.at("initial_lr").get<double>();
  if (j.contains("lr_schedule")) {
    if (j.at("lr_schedule").get<std::string>() != "cosine-to-zero") {
      throw ConfigError("lr_schedule: only 'cosine-to-zero' is supported");
    }
  }
  if (j.contains("momentum")) base.momentum = j.at("momentum").get<double>();
  if (j.contains("weight_decay")) base.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("checkpoint_every")) base.checkpoint_every = j.at("checkpoint_every").get<int>();
  if (j.contains("augmentation")) {
    const auto a = j.at("augmentation").get<std::string>();
    if (a == "standard-crop-flip") {
      base.augmentation = Augmentation::StandardCropFlip;
    } else if (a == "none") {
      base.augmentation = Augmentation::None;
    } else {
      throw ConfigError(fmt::format("unknown augmentation '{}'", a));
    }
  }
  if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
  // A shortened run keeps at least the final checkpoint.
  if (!j.contains("checkpoint_every") && base.checkpoint_every > base.epochs) {
    base.checkpoint_every = base.epochs;
  }
  return base;
}

const std::set<std::string> kKinds = {"teacher-epoch-sweep", "ensemble-compare",
                                      "ensemble-size-ablation", "select-and-distill",
                                      "grid-search", "lsr-baseline"};

}  // namespace

json load_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError(fmt::format("config file {} does not exist", path.string()));
  }
  const auto ext = path.extension().string();
  if (ext == ".yaml" || ext == ".yml") {
    return yaml_to_json(YAML::LoadFile(path.string()));
  }
  if (ext == ".json") {
    std::ifstream f(path);
    return json::parse(f);
  }
  throw ConfigError(fmt::format("config file {} must be .yaml, .yml or .json", path.string()));
}

void ExperimentConfig::validate() const {
  if (schema_version != 1) {
    throw ConfigError(fmt::format("unsupported schema_version {}, this build reads version 1", schema_version));
  }
  if (!kKinds.count(kind)) {
    std::string all;
    for (const auto& k : kKinds) all += (all.empty() ? "" : ", ") + k;
    throw ConfigError(fmt::format("unknown experiment kind '{}' (expected one of: {})", kind, all));
  }
  if (seeds.empty()) throw ConfigError("seeds: must not be empty");
  teacher_recipe.validate();
  student_recipe.validate();
  if (kind == "grid-search" && (tau_grid.empty() || alpha_grid.empty())) {
    throw ConfigError("grid-search requires non-empty tau_grid and alpha_grid");
  }
  if (kind == "ensemble-size-ablation" && ensemble_sizes.empty()) {
    throw ConfigError("ensemble-size-ablation requires non-empty ensemble_sizes");
  }
  for (int k : ensemble_sizes) {
    if (k < 1) throw ConfigError(fmt::format("ensemble_sizes: sizes must be >= 1, got {}", k));
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["kind"] = kind;
  j["dataset"] = dataset.to_json();
  j["teacher_arch"] = teacher_arch;
  j["student_arch"] = student_arch;
  j["teacher_recipe"] = recipe_to_json(teacher_recipe);
  j["student_recipe"] = recipe_to_json(student_recipe);
  j["kd"] = json{{"tau", tau}, {"alpha", alpha}, {"tau_sq_scaling", tau_sq_scaling}};
  if (!tau_grid.empty()) j["kd"]["tau_grid"] = tau_grid;
  if (!alpha_grid.empty()) j["kd"]["alpha_grid"] = alpha_grid;
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  j["ensemble_sizes"] = ensemble_sizes;
  j["select_baselines"] = select_baselines;
  j["decoder_fit_epochs"] = decoder_fit_epochs;
  j["decoder_seed"] = decoder_seed;
  j["mi_eval_split"] = mi_eval_split;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  c.schema_version = j.value("schema_version", 0);
  c.kind = j.value("kind", "");
  if (j.contains("dataset")) c.dataset = DatasetConfig::from_json(j.at("dataset"));
  c.teacher_arch = j.value("teacher_arch", c.teacher_arch);
  c.student_arch = j.value("student_arch", c.student_arch);
  if (j.contains("teacher_recipe")) c.teacher_recipe = recipe_from_json_partial(j.at("teacher_recipe"), c.teacher_recipe);
  if (j.contains("student_recipe")) c.student_recipe = recipe_from_json_partial(j.at("student_recipe"), c.student_recipe);
  if (j.contains("kd")) {
    const auto& kd = j.at("kd");
    c.tau = kd.value("tau", c.tau);
    c.alpha = kd.value("alpha", c.alpha);
    c.tau_sq_scaling = kd.value("tau_sq_scaling", c.tau_sq_scaling);
    if (kd.contains("tau_grid")) c.tau_grid = kd.at("tau_grid").get<std::vector<double>>();
    if (kd.contains("alpha_grid")) c.alpha_grid = kd.at("alpha_grid").get<std::vector<double>>();
  }
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("ensemble_sizes")) c.ensemble_sizes = j.at("ensemble_sizes").get<std::vector<int>>();
  if (j.contains("select_baselines")) c.select_baselines = j.at("select_baselines").get<std::vector<double>>();
  c.decoder_fit_epochs = j.value("decoder_fit_epochs", c.decoder_fit_epochs);
  c.decoder_seed = j.value("decoder_seed", c.decoder_seed);
  c.mi_eval_split = j.value("mi_eval_split", c.mi_eval_split);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  return from_json(load_config_file(path));
}

RunOptions RunOptions::defaults() {
  RunOptions o;
  const char* env = std::getenv("CKD_RESULTS_DIR");
  o.results_root = env && *env ? std::filesystem::path(env) : std::filesystem::path("results");
  return o;
}

// ---------------------------------------------------------------------------
// Tasks

std::string make_run_id(const std::string& prefix, const json& payload) {
  const std::string dump = payload.dump();
  return fmt::format("{}-{}", prefix, hash_hex(fnv1a64(dump.data(), dump.size())).substr(0, 12));
}

std::string task_run_id(const json& task) { return task.at("run_id").get<std::string>(); }

namespace {

json make_teacher_task(const ArchSpec& arch, const TrainRecipe& recipe, const DatasetConfig& ds) {
  json payload{{"type", "train-teacher"},
               {"arch", arch_to_json(arch)},
               {"recipe", recipe_to_json(recipe)},
               {"dataset", ds.to_json()}};
  payload["run_id"] = make_run_id("teacher", payload);
  return payload;
}

json make_distill_task(const ArchSpec& student, const TeacherSpec& teacher, const KDConfig& kd,
                       const DatasetConfig& ds) {
  json payload{{"type", "distill"},
               {"student_arch", arch_to_json(student)},
               {"teacher_spec", teacher_spec_to_json(teacher)},
               {"kd", kd_config_to_json(kd)},
               {"dataset", ds.to_json()}};
  payload["run_id"] = make_run_id("distill", payload);
  return payload;
}

json make_mi_task(const std::string& teacher_run_id, const DatasetConfig& ds, int fit_epochs,
                  std::uint64_t decoder_seed, const std::string& eval_split) {
  return json{{"type", "mi-curve"}, {"run_id", teacher_run_id},  {"dataset", ds.to_json()},
              {"fit_epochs", fit_epochs}, {"decoder_seed", decoder_seed}, {"eval_split", eval_split}};
}

json mi_meta_of(const json& task) {
  return json{{"dataset", task.at("dataset")},
              {"fit_epochs", task.at("fit_epochs")},
              {"decoder_seed", task.at("decoder_seed")},
              {"eval_split", task.at("eval_split")}};
}

}  // namespace

bool task_is_complete(const json& task, const std::filesystem::path& results_root) {
  const auto type = task.at("type").get<std::string>();
  const auto dir = results_root / "runs" / task_run_id(task);
  if (type == "train-teacher") return std::filesystem::exists(dir / "manifest.json");
  if (type == "distill") return std::filesystem::exists(dir / "result.json");
  if (type == "mi-curve") {
    const auto meta_path = dir / "mi_meta.json";
    if (!std::filesystem::exists(meta_path) || !std::filesystem::exists(dir / "mi_curve.csv")) {
      return false;
    }
    std::ifstream f(meta_path);
    try {
      return json::parse(f) == mi_meta_of(task);
    } catch (const std::exception&) {
      return false;
    }
  }
  throw ConfigError(fmt::format("unknown task type '{}'", type));
}

void execute_task(const json& task, const std::filesystem::path& results_root) {
  const auto type = task.at("type").get<std::string>();
  const auto run_id = task_run_id(task);
  const auto runs_dir = results_root / "runs";
  std::filesystem::create_directories(runs_dir);
  const auto final_dir = runs_dir / run_id;

  if (task_is_complete(task, results_root)) return;

  if (type == "mi-curve") {
    // Attaches to an existing teacher run directory: atomic per-file renames.
    CheckpointStore store(results_root);
    const auto manifest = store.manifest(run_id);
    auto ds = DatasetConfig::from_json(task.at("dataset")).load();
    DecoderSpec spec;
    MICurve curve = build_mi_curve(manifest, *ds, store, spec, task.at("fit_epochs").get<int>(),
                                   task.at("decoder_seed").get<std::uint64_t>(),
                                   task.at("eval_split").get<std::string>());
    if (curve.points.size() >= 2) curve = normalize_curve(curve);
    const auto tmp_csv = final_dir / fmt::format(".mi_curve.csv.tmp{}", ::getpid());
    curve.save_csv(tmp_csv);
    std::filesystem::rename(tmp_csv, final_dir / "mi_curve.csv");
    const auto tmp_meta = final_dir / fmt::format(".mi_meta.json.tmp{}", ::getpid());
    {
      std::ofstream f(tmp_meta);
      f << mi_meta_of(task).dump(2) << "\n";
    }
    std::filesystem::rename(tmp_meta, final_dir / "mi_meta.json");
    return;
  }

  // Directory-producing tasks stage into a scratch dir, then rename.
  const auto staging = runs_dir / fmt::format(".staging-{}-{}", run_id, ::getpid());
  std::filesystem::remove_all(staging);
  std::filesystem::create_directories(staging);
  try {
    if (type == "train-teacher") {
      auto ds = DatasetConfig::from_json(task.at("dataset")).load();
      train_teacher(arch_from_json(task.at("arch")), recipe_from_json(task.at("recipe")), *ds,
                    staging, run_id);
    } else if (type == "distill") {
      auto ds = DatasetConfig::from_json(task.at("dataset")).load();
      CheckpointStore store(results_root);
      distill_student(arch_from_json(task.at("student_arch")),
                      teacher_spec_from_json(task.at("teacher_spec")),
                      kd_config_from_json(task.at("kd")), *ds, store, staging);
    } else {
      throw ConfigError(fmt::format("unknown task type '{}'", type));
    }
  } catch (...) {
    std::filesystem::remove_all(staging);
    throw;
  }
  if (std::filesystem::exists(final_dir)) {
    std::filesystem::remove_all(staging);  // another worker finished first
  } else {
    std::filesystem::rename(staging, final_dir);
  }
}

// ---------------------------------------------------------------------------
// Task batch runner

namespace {

struct BatchOutcome {
  std::map<std::string, std::string> errors;  // run_id -> message
};

void run_batch_sequential(const std::vector<json>& tasks, const std::filesystem::path& root,
                          ExperimentStats& stats, BatchOutcome& out) {
  for (const auto& task : tasks) {
    try {
      execute_task(task, root);
      ++stats.executed;
    } catch (const std::exception& e) {
      ++stats.failed;
      out.errors[task_run_id(task)] = e.what();
      fmt::print(stderr, "[ckd] sub-run {} failed: {}\n", task_run_id(task), e.what());
    }
  }
}

void run_batch_processes(const std::vector<json>& tasks, const std::filesystem::path& root,
                         const RunOptions& options, ExperimentStats& stats, BatchOutcome& out) {
  const auto jobs_dir = root / "jobs";
  std::filesystem::create_directories(jobs_dir);
  std::map<pid_t, std::string> running;  // pid -> run_id
  std::size_t next = 0;

  auto reap_one = [&]() {
    int status = 0;
    const pid_t pid = ::waitpid(-1, &status, 0);
    if (pid <= 0) return;
    auto it = running.find(pid);
    if (it == running.end()) return;
    const std::string run_id = it->second;
    running.erase(it);
    const bool ok = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    if (ok) {
      ++stats.executed;
    } else {
      ++stats.failed;
      std::string msg = fmt::format("worker exited with status {}", status);
      const auto err_path = jobs_dir / (run_id + ".err");
      if (std::filesystem::exists(err_path)) {
        std::ifstream f(err_path);
        std::string contents((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        if (!contents.empty()) msg = contents;
      }
      out.errors[run_id] = msg;
      fmt::print(stderr, "[ckd] sub-run {} failed: {}\n", run_id, msg);
    }
  };

  while (next < tasks.size() || !running.empty()) {
    while (next < tasks.size() && static_cast<int>(running.size()) < options.parallel) {
      const json& task = tasks[next++];
      const std::string run_id = task_run_id(task);
      const auto job_path = jobs_dir / (run_id + ".json");
      {
        std::ofstream f(job_path);
        f << task.dump(2) << "\n";
      }
      const pid_t pid = ::fork();
      if (pid < 0) throw Error("fork failed");
      if (pid == 0) {
        ::execl(options.worker_exe.c_str(), options.worker_exe.c_str(), "exec-task",
                job_path.c_str(), "--results", root.c_str(), static_cast<char*>(nullptr));
        std::perror("execl");
        ::_exit(127);
      }
      running[pid] = run_id;
    }
    if (!running.empty()) reap_one();
  }
}

/// Dedupes, skips completed runs, executes the rest.
BatchOutcome run_batch(const std::vector<json>& tasks, const std::filesystem::path& root,
                       const RunOptions& options, ExperimentStats& stats) {
  std::vector<json> pending;
  std::set<std::string> seen;
  for (const auto& t : tasks) {
    const auto id = task_run_id(t);
    if (!seen.insert(id).second) continue;
    if (task_is_complete(t, root)) {
      ++stats.reused;
    } else {
      pending.push_back(t);
    }
  }
  BatchOutcome out;
  if (pending.empty()) return out;
  const bool use_processes =
      options.parallel > 1 && !options.worker_exe.empty() && !options.deterministic;
  if (use_processes) {
    run_batch_processes(pending, root, options, stats, out);
  } else {
    run_batch_sequential(pending, root, stats, out);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Grid search tie-break and ensemble accuracy

const GridCell& pick_best_grid_cell(const std::vector<GridCell>& cells) {
  if (cells.empty()) throw ArgumentError("pick_best_grid_cell: empty grid");
  const GridCell* best = &cells.front();
  for (const auto& c : cells) {
    if (c.mean > best->mean ||
        (c.mean == best->mean && (c.tau < best->tau || (c.tau == best->tau && c.alpha < best->alpha)))) {
      best = &c;
    }
  }
  return *best;
}

double ensemble_accuracy(const std::vector<TeacherRef>& members, const CheckpointStore& store,
                         const DataSplit& test_split) {
  if (members.empty()) throw ArgumentError("ensemble_accuracy: no members");
  std::vector<std::unique_ptr<Model>> models;
  for (const auto& m : members) models.push_back(store.load_model(m));
  Tensor images, probs, mean;
  std::vector<int> labels;
  double correct = 0.0;
  for (const auto& idx : make_eval_batches(test_split.count(), 128)) {
    gather_batch(test_split, idx, images, labels);
    mean = Tensor({images.dim(0), models.front()->spec().num_classes});
    for (auto& model : models) {
      auto fwd = model->forward(images, /*train=*/false);
      softened_softmax_batch(fwd.logits, 1.0, probs);
      for (std::int64_t i = 0; i < mean.size(); ++i) mean[i] += probs[i];
    }
    correct += top1_accuracy(mean, labels) * static_cast<double>(idx.size());
  }
  return correct / test_split.count();
}

// ---------------------------------------------------------------------------
// Report

json ExperimentReport::to_json() const {
  json j;
  j["kind"] = kind;
  j["config_hash"] = config_hash;
  j["code_version"] = code_version;
  j["dataset"] = dataset;
  j["teachers"] = teachers;
  j["stats"] = json{{"executed", stats.executed}, {"reused", stats.reused}, {"failed", stats.failed}};
  j["conditions"] = json::array();
  for (const auto& c : conditions) {
    json cj{{"label", c.label},
            {"teacher_spec", c.teacher_spec},
            {"tau", c.tau},
            {"alpha", c.alpha},
            {"seed_accuracies", c.seed_accuracies},
            {"mean_accuracy", c.mean_accuracy},
            {"run_dirs", c.run_dirs},
            {"failed", c.failed},
            {"error", c.error},
            {"extra", c.extra}};
    if (c.std_accuracy) cj["std_accuracy"] = *c.std_accuracy;
    j["conditions"].push_back(std::move(cj));
  }
  j["cost"] = json::array();
  for (const auto& r : cost_rows) {
    json rj{{"label", r.label},
            {"teacher_training_seconds", r.teacher_training_seconds},
            {"distill_seconds", r.distill_seconds},
            {"total_seconds", r.total_seconds},
            {"student_accuracy_mean", r.student_accuracy_mean}};
    if (r.student_accuracy_std) rj["student_accuracy_std"] = *r.student_accuracy_std;
    j["cost"].push_back(std::move(rj));
  }
  return j;
}

ExperimentReport ExperimentReport::from_json(const json& j) {
  ExperimentReport r;
  r.kind = j.at("kind").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.code_version = j.at("code_version").get<std::string>();
  r.dataset = j.value("dataset", json::object());
  r.teachers = j.value("teachers", json::array());
  const auto& st = j.at("stats");
  r.stats = {st.at("executed").get<int>(), st.at("reused").get<int>(), st.at("failed").get<int>()};
  for (const auto& cj : j.at("conditions")) {
    ConditionResult c;
    c.label = cj.at("label").get<std::string>();
    c.teacher_spec = cj.value("teacher_spec", json());
    c.tau = cj.value("tau", 0.0);
    c.alpha = cj.value("alpha", 0.0);
    c.seed_accuracies = cj.value("seed_accuracies", std::vector<double>{});
    c.mean_accuracy = cj.value("mean_accuracy", 0.0);
    if (cj.contains("std_accuracy")) c.std_accuracy = cj.at("std_accuracy").get<double>();
    c.run_dirs = cj.value("run_dirs", std::vector<std::string>{});
    c.failed = cj.value("failed", false);
    c.error = cj.value("error", std::string());
    c.extra = cj.value("extra", json::object());
    r.conditions.push_back(std::move(c));
  }
  for (const auto& rj : j.value("cost", json::array())) {
    CostRow row;
    row.label = rj.at("label").get<std::string>();
    row.teacher_training_seconds = rj.at("teacher_training_seconds").get<double>();
    row.distill_seconds = rj.at("distill_seconds").get<double>();
    row.total_seconds = rj.at("total_seconds").get<double>();
    row.student_accuracy_mean = rj.at("student_accuracy_mean").get<double>();
    if (rj.contains("student_accuracy_std")) {
      row.student_accuracy_std = rj.at("student_accuracy_std").get<double>();
    }
    r.cost_rows.push_back(std::move(row));
  }
  return r;
}

std::string ExperimentReport::render_text() const {
  std::string s = fmt::format("experiment: {}   (config {}, {})\n", kind, config_hash, code_version);
  s += fmt::format("sub-runs: {} executed, {} reused, {} failed\n\n", stats.executed, stats.reused,
                   stats.failed);
  s += fmt::format("{:<30} {:>9} {:>9} {:>7} {:>6}  {}\n", "condition", "mean_acc", "std", "tau",
                   "alpha", "teacher");
  for (const auto& c : conditions) {
    if (c.failed) {
      s += fmt::format("{:<30} FAILED: {}\n", c.label, c.error);
      continue;
    }
    s += fmt::format("{:<30} {:>9.4f} {:>9} {:>7.3g} {:>6.3g}  {}\n", c.label, c.mean_accuracy,
                     c.std_accuracy ? fmt::format("{:.4f}", *c.std_accuracy) : "-", c.tau, c.alpha,
                     c.teacher_spec.is_null() ? "" : c.teacher_spec.dump());
    for (const auto& [key, value] : c.extra.items()) {
      s += fmt::format("{:<30}   {} = {}\n", "", key, value.dump());
    }
  }
  if (!cost_rows.empty()) {
    CostReport cr;
    cr.rows = cost_rows;
    s += "\ncost attribution:\n" + cr.render_text();
  }
  return s;
}

void ExperimentReport::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "report.json");
    if (!f) throw IoError(fmt::format("cannot write report to {}", dir.string()));
    f << to_json().dump(2) << "\n";
  }
  std::ofstream t(dir / "report.txt");
  t << render_text();
  if (!cost_rows.empty()) {
    CostReport cr;
    cr.rows = cost_rows;
    cr.save_csv(dir / "cost.csv");
  }
}

ExperimentReport ExperimentReport::load(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "report.json" : dir;
  std::ifstream f(path);
  if (!f) throw IoError(fmt::format("cannot open report {}", path.string()));
  return from_json(json::parse(f));
}

// ---------------------------------------------------------------------------
// Experiment driver

namespace {

struct PlannedCondition {
  std::string label;
  double tau = 0.0;
  double alpha = 0.0;
  json teacher_spec;
  std::vector<std::string> run_ids;  // one distill run per seed
  json extra;
};

struct Plan {
  std::vector<json> teacher_tasks;
  std::vector<json> mi_tasks;
  std::vector<json> distill_tasks;
  std::vector<PlannedCondition> conditions;
  std::map<std::uint64_t, std::string> teacher_run_ids;        // seed -> run id (primary trajectory)
  std::map<std::string, std::uint64_t> teacher_seed_by_run;    // reverse, for the report
};

class ExperimentDriver {
 public:
  ExperimentDriver(const ExperimentConfig& cfg, const RunOptions& opts)
      : cfg_(cfg), opts_(opts), store_(opts.results_root) {
    dataset_ = cfg_.dataset.load();
    teacher_arch_ = arch_preset(cfg_.teacher_arch, dataset_->num_classes, dataset_->resolution);
    student_arch_ = arch_preset(cfg_.student_arch, dataset_->num_classes, dataset_->resolution);
  }

  ExperimentReport run() {
    plan_teachers();
    const json cfg_json = cfg_.to_json();
    const std::string cfg_dump = cfg_json.dump();
    report_.kind = cfg_.kind;
    report_.config_hash = hash_hex(fnv1a64(cfg_dump.data(), cfg_dump.size())).substr(0, 12);
    report_.code_version = kCodeVersion;
    report_.dataset = cfg_.dataset.to_json();

    fmt::print("[ckd] experiment '{}': {} teacher run(s), {} MI curve(s) planned, seeds={}\n",
               cfg_.kind, plan_.teacher_tasks.size(), plan_.mi_tasks.size(), cfg_.seeds.size());

    auto teacher_errors = run_batch(plan_.teacher_tasks, opts_.results_root, opts_, report_.stats);
    auto mi_errors = run_batch(plan_.mi_tasks, opts_.results_root, opts_, report_.stats);

    plan_distills();
    fmt::print("[ckd] experiment '{}': {} distillation run(s) planned\n", cfg_.kind,
               plan_.distill_tasks.size());
    auto distill_errors = run_batch(plan_.distill_tasks, opts_.results_root, opts_, report_.stats);

    BatchOutcome all_errors;
    for (auto* e : {&teacher_errors, &mi_errors, &distill_errors}) {
      all_errors.errors.insert(e->errors.begin(), e->errors.end());
    }
    assemble(all_errors);
    const std::filesystem::path out_dir =
        cfg_.output_dir.empty()
            ? opts_.results_root / "experiments" / fmt::format("{}-{}", cfg_.kind, report_.config_hash)
            : std::filesystem::path(cfg_.output_dir);
    report_.save(out_dir);
    fmt::print("[ckd] report written to {}\n", out_dir.string());
    return report_;
  }

 private:
  TrainRecipe teacher_recipe_for(std::uint64_t seed) const {
    TrainRecipe r = cfg_.teacher_recipe;
    r.seed = seed;
    return r;
  }

  json add_teacher(std::uint64_t seed) {
    json t = make_teacher_task(teacher_arch_, teacher_recipe_for(seed), cfg_.dataset);
    plan_.teacher_tasks.push_back(t);
    plan_.teacher_seed_by_run[task_run_id(t)] = seed;
    return t;
  }

  KDConfig kd_for(std::uint64_t seed, double tau, double alpha) const {
    KDConfig kd;
    kd.tau = tau;
    kd.alpha = alpha;
    kd.tau_sq_scaling = cfg_.tau_sq_scaling;
    kd.student_recipe = cfg_.student_recipe;
    kd.student_recipe.seed = seed;
    kd.seed = seed;
    return kd;
  }

  /// Registers one distill run per seed under a condition label.
  void add_condition(const std::string& label, double tau, double alpha,
                     const std::vector<TeacherSpec>& per_seed_teachers, json extra = json::object()) {
    PlannedCondition cond;
    cond.label = label;
    cond.tau = tau;
    cond.alpha = alpha;
    cond.teacher_spec = teacher_spec_to_json(per_seed_teachers.front());
    cond.extra = std::move(extra);
    for (std::size_t i = 0; i < cfg_.seeds.size(); ++i) {
      json t = make_distill_task(student_arch_, per_seed_teachers[i],
                                 kd_for(cfg_.seeds[i], tau, alpha), cfg_.dataset);
      cond.run_ids.push_back(task_run_id(t));
      plan_.distill_tasks.push_back(std::move(t));
    }
    plan_.conditions.push_back(std::move(cond));
  }

  std::vector<int> checkpoint_grid() const { return cfg_.teacher_recipe.checkpoint_epochs(); }

  int nearest_grid_epoch(double fraction) const {
    const auto grid = checkpoint_grid();
    const double target = fraction * cfg_.teacher_recipe.epochs;
    int best = grid.front();
    double best_d = std::abs(best - target);
    for (int e : grid) {
      const double d = std::abs(e - target);
      if (d < best_d || (d == best_d && e > best)) {
        best = e;
        best_d = d;
      }
    }
    return best;
  }

  void plan_teachers() {
    for (std::uint64_t seed : cfg_.seeds) {
      if (cfg_.kind == "lsr-baseline") break;  // no teachers needed
      json t = add_teacher(seed);
      plan_.teacher_run_ids[seed] = task_run_id(t);
      if (cfg_.kind == "ensemble-compare") {
        json t2 = add_teacher(mix_seed(seed, "second-teacher"));
        second_teacher_ids_[seed] = task_run_id(t2);
      } else if (cfg_.kind == "ensemble-size-ablation") {
        const int kmax = *std::max_element(cfg_.ensemble_sizes.begin(), cfg_.ensemble_sizes.end());
        for (int j = 1; j < kmax; ++j) {
          json tj = add_teacher(mix_seed(seed, "full-arm", static_cast<std::uint64_t>(j)));
          full_arm_ids_[{seed, j}] = task_run_id(tj);
        }
      } else if (cfg_.kind == "select-and-distill") {
        plan_.mi_tasks.push_back(make_mi_task(task_run_id(t), cfg_.dataset, cfg_.decoder_fit_epochs,
                                              cfg_.decoder_seed, cfg_.mi_eval_split));
      }
    }
  }

  void plan_distills() {
    const int final_epoch = cfg_.teacher_recipe.epochs;
    const auto& seeds = cfg_.seeds;

    auto per_seed_single = [&](auto epoch_of) {
      std::vector<TeacherSpec> specs;
      for (std::uint64_t s : seeds) {
        specs.push_back(TeacherSpec::checkpoints({{plan_.teacher_run_ids.at(s), epoch_of(s)}}));
      }
      return specs;
    };

    if (cfg_.kind == "teacher-epoch-sweep") {
      for (int e : checkpoint_grid()) {
        add_condition(fmt::format("teacher-epoch-{}", e), cfg_.tau, cfg_.alpha,
                      per_seed_single([&](std::uint64_t) { return e; }));
      }
    } else if (cfg_.kind == "ensemble-compare") {
      const int inter = nearest_grid_epoch(0.5);
      std::vector<TeacherSpec> en1, en2, en3, baseline;
      for (std::uint64_t s : seeds) {
        const auto& a = plan_.teacher_run_ids.at(s);
        const auto& b = second_teacher_ids_.at(s);
        en1.push_back(TeacherSpec::checkpoints({{a, final_epoch}, {b, final_epoch}}));
        en2.push_back(TeacherSpec::checkpoints({{a, inter}, {b, final_epoch}}));
        en3.push_back(TeacherSpec::checkpoints({{a, inter}, {a, final_epoch}}));
        baseline.push_back(TeacherSpec::checkpoints({{a, final_epoch}}));
      }
      add_condition("kd-single-full", cfg_.tau, cfg_.alpha, baseline);
      add_condition("en1-full1+full2", cfg_.tau, cfg_.alpha, en1, json{{"inter_epoch", inter}});
      add_condition("en2-inter1+full2", cfg_.tau, cfg_.alpha, en2, json{{"inter_epoch", inter}});
      add_condition("en3-inter1+full1", cfg_.tau, cfg_.alpha, en3, json{{"inter_epoch", inter}});
    } else if (cfg_.kind == "ensemble-size-ablation") {
      for (int k : cfg_.ensemble_sizes) {
        std::vector<TeacherSpec> snapshot, full;
        for (std::uint64_t s : seeds) {
          std::vector<TeacherRef> snap_members;
          for (int i = 1; i < k; ++i) {
            snap_members.push_back({plan_.teacher_run_ids.at(s),
                                    nearest_grid_epoch(static_cast<double>(i) / k)});
          }
          snap_members.push_back({plan_.teacher_run_ids.at(s), final_epoch});
          snapshot.push_back(TeacherSpec::checkpoints(std::move(snap_members)));
          std::vector<TeacherRef> full_members{{plan_.teacher_run_ids.at(s), final_epoch}};
          for (int j = 1; j < k; ++j) {
            full_members.push_back({full_arm_ids_.at({s, j}), final_epoch});
          }
          full.push_back(TeacherSpec::checkpoints(std::move(full_members)));
        }
        add_condition(fmt::format("snapshot-k{}", k), cfg_.tau, cfg_.alpha, snapshot,
                      json{{"ensemble_size", k}, {"arm", "snapshot"}});
        add_condition(fmt::format("full-k{}", k), cfg_.tau, cfg_.alpha, full,
                      json{{"ensemble_size", k}, {"arm", "full"}});
      }
    } else if (cfg_.kind == "select-and-distill") {
      // Selection feeds on the MI curves computed in the earlier stage.
      std::map<std::uint64_t, int> selected;
      json selected_json = json::object();
      for (std::uint64_t s : seeds) {
        const auto run_id = plan_.teacher_run_ids.at(s);
        const auto curve_path = store_.run_dir(run_id) / "mi_curve.csv";
        if (!std::filesystem::exists(curve_path)) continue;  // MI failed; condition marked below
        MICurve curve = MICurve::load_csv(curve_path, run_id);
        if (!curve.normalized()) curve = normalize_curve(curve);
        const SelectionResult sel = select_optimal_checkpoint(curve);
        sel.save(store_.run_dir(run_id) / "selection.json");
        selected[s] = sel.selected_epoch;
        selected_json[fmt::format("seed{}", s)] = sel.selected_epoch;
      }
      for (double f : cfg_.select_baselines) {
        const int e = nearest_grid_epoch(f);
        add_condition(fmt::format("baseline-t{:g}", f), cfg_.tau, cfg_.alpha,
                      per_seed_single([&](std::uint64_t) { return e; }), json{{"epoch", e}});
      }
      add_condition("baseline-tfull", cfg_.tau, cfg_.alpha,
                    per_seed_single([&](std::uint64_t) { return final_epoch; }),
                    json{{"epoch", final_epoch}});
      if (!selected.empty()) {
        std::vector<TeacherSpec> specs;
        for (std::uint64_t s : seeds) {
          const int e = selected.count(s) ? selected.at(s) : final_epoch;
          specs.push_back(TeacherSpec::checkpoints({{plan_.teacher_run_ids.at(s), e}}));
        }
        add_condition("t-star", cfg_.tau, cfg_.alpha, specs, json{{"selected_epochs", selected_json}});
      }
    } else if (cfg_.kind == "grid-search") {
      for (double tau : cfg_.tau_grid) {
        for (double alpha : cfg_.alpha_grid) {
          add_condition(fmt::format("tau{:g}-alpha{:g}", tau, alpha), tau, alpha,
                        per_seed_single([&](std::uint64_t) { return final_epoch; }));
        }
      }
    } else if (cfg_.kind == "lsr-baseline") {
      std::vector<TeacherSpec> specs(seeds.size(), TeacherSpec::uniform(dataset_->num_classes));
      add_condition("lsr-uniform", cfg_.tau, cfg_.alpha, specs);
    }
  }

  void assemble(const BatchOutcome& errors) {
    // Teacher reference table.
    report_.teachers = json::array();
    std::set<std::string> seen;
    for (const auto& t : plan_.teacher_tasks) {
      const auto run_id = task_run_id(t);
      if (!seen.insert(run_id).second) continue;
      json tj{{"run_id", run_id}, {"seed", plan_.teacher_seed_by_run.at(run_id)}};
      if (errors.errors.count(run_id)) {
        tj["failed"] = true;
        tj["error"] = errors.errors.at(run_id);
      } else if (store_.has_run(run_id)) {
        const auto m = store_.manifest(run_id);
        tj["final_test_accuracy"] = m.final_record().test_accuracy;
        tj["wall_clock_seconds"] = m.final_record().wall_clock_seconds;
        json recs = json::array();
        for (const auto& r : m.records) {
          recs.push_back(json{{"epoch", r.epoch}, {"test_accuracy", r.test_accuracy}});
        }
        tj["records"] = std::move(recs);
        if (m.early_stop_epoch) tj["early_stop_epoch"] = *m.early_stop_epoch;
      }
      report_.teachers.push_back(std::move(tj));
    }

    for (const auto& planned : plan_.conditions) {
      ConditionResult cond;
      cond.label = planned.label;
      cond.teacher_spec = planned.teacher_spec;
      cond.tau = planned.tau;
      cond.alpha = planned.alpha;
      cond.extra = planned.extra;
      std::vector<DistilledResult> results;
      for (const auto& run_id : planned.run_ids) {
        const auto dir = store_.run_dir(run_id);
        cond.run_dirs.push_back(dir.string());
        if (errors.errors.count(run_id)) {
          cond.failed = true;
          cond.error += (cond.error.empty() ? "" : "; ") + errors.errors.at(run_id);
          continue;
        }
        const auto result_path = dir / "result.json";
        if (!std::filesystem::exists(result_path)) {
          cond.failed = true;
          cond.error += (cond.error.empty() ? "" : "; ") +
                        fmt::format("missing sub-run {}", run_id);
          continue;
        }
        auto res = DistilledResult::load(result_path);
        cond.seed_accuracies.push_back(res.test_accuracy);
        results.push_back(std::move(res));
      }
      if (!cond.seed_accuracies.empty()) {
        double sum = 0.0;
        for (double a : cond.seed_accuracies) sum += a;
        cond.mean_accuracy = sum / static_cast<double>(cond.seed_accuracies.size());
        if (cond.seed_accuracies.size() >= 2) {
          double var = 0.0;
          for (double a : cond.seed_accuracies) var += (a - cond.mean_accuracy) * (a - cond.mean_accuracy);
          cond.std_accuracy = std::sqrt(var / (static_cast<double>(cond.seed_accuracies.size()) - 1.0));
        }
      }
      if (!results.empty()) {
        report_.cost_rows.push_back(make_cost_row(cond.label, results, store_));
      }
      if (cfg_.kind == "ensemble-compare" && !cond.failed && cond.label != "kd-single-full") {
        append_ensemble_accuracy(cond);
      }
      report_.conditions.push_back(std::move(cond));
    }

    if (cfg_.kind == "grid-search") append_grid_summary();
  }

  void append_ensemble_accuracy(ConditionResult& cond) {
    try {
      std::vector<double> accs;
      for (std::size_t i = 0; i < cfg_.seeds.size() && i < cond.run_dirs.size(); ++i) {
        const auto res = DistilledResult::load(std::filesystem::path(cond.run_dirs[i]) / "result.json");
        accs.push_back(ensemble_accuracy(res.teacher_spec.members, store_, dataset_->test));
      }
      double sum = 0.0;
      for (double a : accs) sum += a;
      cond.extra["ensemble_accuracy_per_seed"] = accs;
      cond.extra["ensemble_accuracy_mean"] = sum / static_cast<double>(accs.size());
    } catch (const std::exception& e) {
      cond.extra["ensemble_accuracy_error"] = e.what();
    }
  }

  void append_grid_summary() {
    std::vector<GridCell> cells;
    for (const auto& c : report_.conditions) {
      if (c.failed) continue;
      cells.push_back(GridCell{c.tau, c.alpha, c.seed_accuracies, c.mean_accuracy});
    }
    if (cells.empty()) return;
    const GridCell& best = pick_best_grid_cell(cells);
    json summary{{"best_tau", best.tau}, {"best_alpha", best.alpha}, {"best_mean_accuracy", best.mean}};
    for (auto& c : report_.conditions) {
      if (!c.failed && c.tau == best.tau && c.alpha == best.alpha) c.extra["best"] = true;
    }
    if (!report_.conditions.empty()) report_.conditions.front().extra["grid_best"] = summary;
  }

  ExperimentConfig cfg_;
  RunOptions opts_;
  CheckpointStore store_;
  std::shared_ptr<const Dataset> dataset_;
  ArchSpec teacher_arch_, student_arch_;
  Plan plan_;
  ExperimentReport report_;
  std::map<std::uint64_t, std::string> second_teacher_ids_;
  std::map<std::pair<std::uint64_t, int>, std::string> full_arm_ids_;
};

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  std::filesystem::create_directories(options.results_root / "runs");
  ExperimentDriver driver(config, options);
  return driver.run();
}

}  // namespace ckd
