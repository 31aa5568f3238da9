#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <fstream>

#include "ckd/harness.hpp"

namespace fs = std::filesystem;
using ckd::RunOptions;

namespace {

struct GlobalFlags {
  std::string results_dir;
  std::string device = "cpu";
  int parallel = 1;
  double subset_fraction = 1.0;
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
};

RunOptions options_from(const GlobalFlags& g) {
  RunOptions opts = RunOptions::defaults();
  if (!g.results_dir.empty()) opts.results_root = g.results_dir;
  opts.parallel = g.parallel;
  opts.deterministic = g.deterministic;
  char exe[4096];
  const ssize_t n = ::readlink("/proc/self/exe", exe, sizeof(exe) - 1);
  if (n > 0) {
    exe[n] = '\0';
    opts.worker_exe = exe;
  }
  return opts;
}

void check_device(const std::string& device) {
  if (device != "cpu") {
    throw ckd::ConfigError(fmt::format("device '{}' is not available in this build (cpu only)", device));
  }
}

ckd::DatasetConfig dataset_config(const std::string& name, const std::string& root,
                                  const GlobalFlags& g) {
  ckd::DatasetConfig ds;
  ds.name = name;
  ds.root = root;
  ds.subset_fraction = g.subset_fraction;
  return ds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ckd - checkpoint-based knowledge distillation toolkit"};
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--results", g.results_dir, "results root (default: $CKD_RESULTS_DIR or ./results)");
  app.add_option("--device", g.device, "compute device (cpu)");
  app.add_option("--parallel", g.parallel, "max concurrent worker processes");
  app.add_option("--subset-fraction", g.subset_fraction, "stratified train-split fraction in (0,1]");
  app.add_flag("--deterministic", g.deterministic, "force sequential sub-run execution");
  std::uint64_t seed_flag = 0;
  auto* seed_opt = app.add_option("--seed", seed_flag, "seed override");

  // --- train-teacher --------------------------------------------------------
  auto* train = app.add_subcommand("train-teacher", "train a teacher with periodic checkpoints");
  std::string t_arch = "wrn-d16-w2", t_dataset = "synth10", t_dataset_root, t_run_id;
  ckd::TrainRecipe t_recipe;
  train->add_option("--arch", t_arch, "architecture preset id");
  train->add_option("--dataset", t_dataset, "dataset name (cifar10|cifar100|synth<K>)");
  train->add_option("--dataset-root", t_dataset_root, "directory with CIFAR binaries");
  train->add_option("--epochs", t_recipe.epochs);
  train->add_option("--batch-size", t_recipe.batch_size);
  train->add_option("--lr", t_recipe.initial_lr);
  train->add_option("--momentum", t_recipe.momentum);
  train->add_option("--weight-decay", t_recipe.weight_decay);
  train->add_option("--checkpoint-every", t_recipe.checkpoint_every);
  std::string t_aug = "standard-crop-flip";
  train->add_option("--augmentation", t_aug, "standard-crop-flip|none");
  train->add_option("--run-id", t_run_id, "run id (default: content hash)");

  // --- estimate-mi ----------------------------------------------------------
  auto* mi = app.add_subcommand("estimate-mi", "information-plane coordinates for a run's checkpoints");
  std::string mi_run, mi_dataset = "synth10", mi_dataset_root, mi_split = "train";
  int mi_fit_epochs = 30;
  std::uint64_t mi_decoder_seed = 7;
  mi->add_option("--run", mi_run, "teacher run id")->required();
  mi->add_option("--dataset", mi_dataset);
  mi->add_option("--dataset-root", mi_dataset_root);
  mi->add_option("--fit-epochs", mi_fit_epochs, "decoder fitting budget per checkpoint");
  mi->add_option("--decoder-seed", mi_decoder_seed);
  mi->add_option("--eval-split", mi_split, "split the reconstruction loss is read on (train|test)");

  // --- select ----------------------------------------------------------------
  auto* select = app.add_subcommand("select", "pick the optimal intermediate checkpoint");
  std::string sel_run;
  select->add_option("--run", sel_run, "teacher run id with an MI curve")->required();

  // --- distill ----------------------------------------------------------------
  auto* distill = app.add_subcommand("distill", "train a student against a teacher spec");
  std::string d_arch = "wrn-d16-w1", d_dataset = "synth10", d_dataset_root, d_teacher;
  double d_tau = 4.0, d_alpha = 0.5;
  bool d_tau_sq = false;
  ckd::TrainRecipe d_recipe;
  d_recipe.epochs = 30;
  d_recipe.initial_lr = 0.05;
  distill->add_option("--arch", d_arch, "student architecture preset id");
  distill->add_option("--dataset", d_dataset);
  distill->add_option("--dataset-root", d_dataset_root);
  distill
      ->add_option("--teacher", d_teacher,
                   "teacher spec: 'run:epoch[,run:epoch...]' or 'uniform'")
      ->required();
  distill->add_option("--tau", d_tau, "softening temperature");
  distill->add_option("--alpha", d_alpha, "hard-label loss weight");
  distill->add_flag("--tau-sq-scaling", d_tau_sq, "scale the soft term by tau^2");
  distill->add_option("--epochs", d_recipe.epochs);
  distill->add_option("--batch-size", d_recipe.batch_size);
  distill->add_option("--lr", d_recipe.initial_lr);

  // --- experiment -------------------------------------------------------------
  auto* experiment = app.add_subcommand("experiment", "config-driven experiment");
  auto* exp_run = experiment->add_subcommand("run", "run an experiment from a YAML/JSON config");
  std::string exp_config;
  exp_run->add_option("config", exp_config, "path to config file")->required();

  // --- report -----------------------------------------------------------------
  auto* report = app.add_subcommand("report", "render a stored experiment report");
  std::string report_dir;
  report->add_option("dir", report_dir, "experiment output directory or report.json")->required();

  // --- exec-task (worker mode, used by --parallel) ------------------------------
  auto* exec = app.add_subcommand("exec-task", "execute one serialized sub-run task");
  exec->group("");  // hidden
  std::string task_path, task_results;
  exec->add_option("task", task_path)->required();
  exec->add_option("--results", task_results);

  CLI11_PARSE(app, argc, argv);

  try {
    check_device(g.device);
    RunOptions opts = options_from(g);

    if (*train) {
      if (seed_opt->count()) t_recipe.seed = seed_flag;
      t_recipe.augmentation = t_aug == "none" ? ckd::Augmentation::None
                                              : ckd::Augmentation::StandardCropFlip;
      auto ds_cfg = dataset_config(t_dataset, t_dataset_root, g);
      auto ds = ds_cfg.load();
      const auto arch = ckd::arch_preset(t_arch, ds->num_classes, ds->resolution);
      std::string run_id = t_run_id;
      if (run_id.empty()) {
        run_id = ckd::make_run_id("teacher", nlohmann::json{{"arch", ckd::arch_to_json(arch)},
                                                            {"recipe", ckd::recipe_to_json(t_recipe)},
                                                            {"dataset", ds_cfg.to_json()}});
      }
      const auto run_dir = opts.results_root / "runs" / run_id;
      if (fs::exists(run_dir / "manifest.json")) {
        throw ckd::IoError(fmt::format("run directory {} already holds a manifest", run_dir.string()));
      }
      auto manifest = ckd::train_teacher(arch, t_recipe, *ds, run_dir, run_id);
      fmt::print("trained {} ({} checkpoints, final test acc {:.4f}) -> {}\n", run_id,
                 manifest.records.size(), manifest.final_record().test_accuracy, run_dir.string());
    } else if (*mi) {
      ckd::CheckpointStore store(opts.results_root);
      auto manifest = store.manifest(mi_run);
      auto ds = dataset_config(mi_dataset, mi_dataset_root, g).load();
      ckd::DecoderSpec spec;
      auto curve = ckd::build_mi_curve(manifest, *ds, store, spec, mi_fit_epochs, mi_decoder_seed,
                                       mi_split);
      if (curve.points.size() >= 2) curve = ckd::normalize_curve(curve);
      const auto path = store.run_dir(mi_run) / "mi_curve.csv";
      curve.save_csv(path);
      fmt::print("MI curve with {} points -> {}\n", curve.points.size(), path.string());
      for (const auto& p : curve.points) {
        fmt::print("  epoch {:>4}: ixf_raw {:+.4f}  iyf_raw {:.4f}\n", p.epoch, p.ixf_raw, p.iyf_raw);
      }
    } else if (*select) {
      ckd::CheckpointStore store(opts.results_root);
      const auto curve_path = store.run_dir(sel_run) / "mi_curve.csv";
      auto curve = ckd::MICurve::load_csv(curve_path, sel_run);
      if (!curve.normalized()) curve = ckd::normalize_curve(curve);
      const auto result = ckd::select_optimal_checkpoint(curve);
      result.save(store.run_dir(sel_run) / "selection.json");
      fmt::print("{}", result.render_table());
    } else if (*distill) {
      if (seed_opt->count()) d_recipe.seed = seed_flag;
      auto ds = dataset_config(d_dataset, d_dataset_root, g).load();
      const auto arch = ckd::arch_preset(d_arch, ds->num_classes, ds->resolution);
      ckd::TeacherSpec teacher;
      if (d_teacher == "uniform") {
        teacher = ckd::TeacherSpec::uniform(ds->num_classes);
      } else {
        std::vector<ckd::TeacherRef> members;
        std::stringstream ss(d_teacher);
        std::string item;
        while (std::getline(ss, item, ',')) {
          const auto colon = item.rfind(':');
          if (colon == std::string::npos) {
            throw ckd::ConfigError(fmt::format("bad --teacher member '{}', expected run:epoch", item));
          }
          members.push_back({item.substr(0, colon), std::stoi(item.substr(colon + 1))});
        }
        teacher = ckd::TeacherSpec::checkpoints(std::move(members));
      }
      ckd::KDConfig kd;
      kd.tau = d_tau;
      kd.alpha = d_alpha;
      kd.tau_sq_scaling = d_tau_sq;
      kd.student_recipe = d_recipe;
      kd.seed = d_recipe.seed;
      ckd::CheckpointStore store(opts.results_root);
      const auto run_id = ckd::make_run_id(
          "distill", nlohmann::json{{"student_arch", ckd::arch_to_json(arch)},
                                    {"teacher_spec", ckd::teacher_spec_to_json(teacher)},
                                    {"kd", ckd::kd_config_to_json(kd)}});
      const auto out_dir = opts.results_root / "runs" / run_id;
      auto result = ckd::distill_student(arch, teacher, kd, *ds, store, out_dir);
      fmt::print("distilled student test acc {:.4f} (teacher {}) -> {}\n", result.test_accuracy,
                 teacher.describe(), out_dir.string());
    } else if (*experiment) {
      auto config = ckd::ExperimentConfig::from_file(exp_config);
      if (seed_opt->count()) config.seeds = {seed_flag};
      if (g.subset_fraction < 1.0) config.dataset.subset_fraction = g.subset_fraction;
      auto rep = ckd::run_experiment(config, opts);
      fmt::print("{}", rep.render_text());
      return rep.stats.failed > 0 ? 2 : 0;
    } else if (*report) {
      auto rep = ckd::ExperimentReport::load(report_dir);
      fmt::print("{}", rep.render_text());
    } else if (*exec) {
      std::ifstream f(task_path);
      if (!f) throw ckd::IoError(fmt::format("cannot open task file {}", task_path));
      const auto task = nlohmann::json::parse(f);
      const fs::path root = task_results.empty() ? opts.results_root : fs::path(task_results);
      try {
        ckd::execute_task(task, root);
      } catch (const std::exception& e) {
        std::ofstream err(fs::path(task_path).replace_extension(".err"));
        err << e.what();
        throw;
      }
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
