#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cdne/cdne.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool quiet() {
  const char* v = std::getenv("CDNE_LOG");
  return v != nullptr && std::string(v) == "quiet";
}

void say(const std::string& line) {
  if (!quiet()) std::cout << line << "\n";
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw cdne::IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw cdne::IoError("failed while writing " + path.string());
}

cdne::Dataset resolve_dataset(const cdne::RunConfig& cfg, const fs::path& config_path) {
  if (cfg.dataset.manifest) {
    fs::path manifest = *cfg.dataset.manifest;
    if (manifest.is_relative()) manifest = config_path.parent_path() / manifest;
    return cdne::load_dataset(manifest);
  }
  return cdne::generate_synthetic(*cfg.dataset.synthetic);
}

void check_compatible(const cdne::MilModel& model, const cdne::Dataset& data) {
  if (model.input_dim != data.feature_dim)
    throw cdne::ValidationError("checkpoint input_dim " + std::to_string(model.input_dim) +
                                " does not match dataset feature_dim " +
                                std::to_string(data.feature_dim));
  if (model.num_classes != data.num_classes)
    throw cdne::ValidationError("checkpoint num_classes " + std::to_string(model.num_classes) +
                                " does not match dataset num_classes " +
                                std::to_string(data.num_classes));
}

struct GenerateArgs {
  std::string spec_file;
  std::string out_dir;
  cdne::SyntheticSpec flags;
};

int run_generate(const CLI::App& cmd, const GenerateArgs& args) {
  cdne::SyntheticSpec spec;
  if (!args.spec_file.empty()) {
    std::ifstream in(args.spec_file);
    if (!in) throw cdne::IoError("cannot open spec " + args.spec_file);
    json root;
    try {
      root = json::parse(in);
    } catch (const json::exception& e) {
      throw cdne::SchemaError("spec " + args.spec_file + ": " + e.what());
    }
    spec = cdne::detail::parse_synthetic(root, "spec");
  }
  if (cmd.count("--bags-per-class")) spec.bags_per_class = args.flags.bags_per_class;
  if (cmd.count("--classes")) spec.num_classes = args.flags.num_classes;
  if (cmd.count("--k-min")) spec.k_min = args.flags.k_min;
  if (cmd.count("--k-max")) spec.k_max = args.flags.k_max;
  if (cmd.count("--dim")) spec.dim = args.flags.dim;
  if (cmd.count("--witness-ratio"))
    spec.positive_instance_ratio = args.flags.positive_instance_ratio;
  if (cmd.count("--separation")) spec.class_separation = args.flags.class_separation;
  if (cmd.count("--bag-sigma")) spec.bag_prior_sigma = args.flags.bag_prior_sigma;
  if (cmd.count("--noise-sigma")) spec.noise_sigma = args.flags.noise_sigma;
  if (cmd.count("--seed")) spec.seed = args.flags.seed;

  cdne::Dataset data = cdne::generate_synthetic(spec);
  cdne::write_dataset(data, args.out_dir);

  std::size_t k_lo = data.bags.front().num_instances(), k_hi = k_lo;
  for (const cdne::Bag& b : data.bags) {
    k_lo = std::min(k_lo, b.num_instances());
    k_hi = std::max(k_hi, b.num_instances());
  }
  say("wrote " + std::to_string(data.bags.size()) + " bags (" +
      std::to_string(data.num_classes) + " classes x " + std::to_string(spec.bags_per_class) +
      "), dim " + std::to_string(data.feature_dim) + ", instances per bag in [" +
      std::to_string(k_lo) + ", " + std::to_string(k_hi) + "] -> " + args.out_dir);
  return 0;
}

json fold_entry(std::size_t index, const cdne::FoldResult& fold) {
  return json{{"fold", index},
              {"val_auroc", fold.val_auroc},
              {"val_accuracy", fold.val_accuracy},
              {"reported_epoch", fold.reported_epoch}};
}

int run_train(const std::string& config_path, const std::string& out_dir, std::size_t fold) {
  const cdne::RunConfig cfg = cdne::load_run_config(config_path);
  const cdne::Dataset data = resolve_dataset(cfg, config_path);
  if (fold >= cfg.folds)
    throw cdne::ValidationError("fold index " + std::to_string(fold) + " is out of range for " +
                                std::to_string(cfg.folds) + " folds");

  const std::vector<cdne::FoldSplit> splits = cdne::kfold_split(data, cfg.folds, cfg.seed);
  cdne::FoldResult result = cdne::train_fold(
      data, splits[fold], cfg, cdne::derive_seed(cfg.seed, cdne::stream::fold_base + fold));

  fs::create_directories(out_dir);
  result.log.write_csv(fs::path(out_dir) / "train_log.csv");
  cdne::save_checkpoint({result.model, result.head}, fs::path(out_dir) / "model.ckpt");
  write_json_file(fold_entry(fold, result), fs::path(out_dir) / "result.json");
  say("fold " + std::to_string(fold) + ": val_auroc " + fmt(result.val_auroc) +
      ", val_accuracy " + fmt(result.val_accuracy) + " -> " + out_dir);
  return 0;
}

// Writes the per-fold logs and the aggregate for this run, then a baseline vs
// auxiliary delta table once both aggregates exist in the output directory.
int run_cv_cmd(const std::string& config_path, const std::string& out_dir, std::size_t jobs) {
  const cdne::RunConfig cfg = cdne::load_run_config(config_path);
  const cdne::Dataset data = resolve_dataset(cfg, config_path);
  const cdne::CvResult cv = cdne::run_cv(data, cfg, jobs);

  fs::create_directories(out_dir);
  const std::string suffix = cfg.cdne.enabled ? "cdne" : "baseline";
  json folds = json::array();
  for (std::size_t f = 0; f < cv.folds.size(); ++f) {
    const std::string stem = "fold" + std::to_string(f) + "_" + suffix;
    cv.folds[f].log.write_csv(fs::path(out_dir) / (stem + ".csv"));
    cdne::save_checkpoint({cv.folds[f].model, cv.folds[f].head},
                          fs::path(out_dir) / (stem + ".ckpt"));
    folds.push_back(fold_entry(f, cv.folds[f]));
  }
  const json aggregate{{"cdne_enabled", cfg.cdne.enabled},
                       {"mean_auroc", cv.mean_auroc},
                       {"std_auroc", cv.std_auroc},
                       {"mean_accuracy", cv.mean_accuracy},
                       {"std_accuracy", cv.std_accuracy},
                       {"folds", folds}};
  write_json_file(aggregate, fs::path(out_dir) / ("aggregate_" + suffix + ".json"));
  say(suffix + ": mean_auroc " + fmt(cv.mean_auroc) + " (std " + fmt(cv.std_auroc) +
      "), mean_accuracy " + fmt(cv.mean_accuracy) + " (std " + fmt(cv.std_accuracy) + ")");

  const fs::path cdne_agg = fs::path(out_dir) / "aggregate_cdne.json";
  const fs::path base_agg = fs::path(out_dir) / "aggregate_baseline.json";
  if (fs::exists(cdne_agg) && fs::exists(base_agg)) {
    json with, without;
    std::ifstream(cdne_agg) >> with;
    std::ifstream(base_agg) >> without;
    std::ofstream delta(fs::path(out_dir) / "delta.csv");
    if (!delta) throw cdne::IoError("cannot open delta.csv for writing");
    delta << "metric,baseline,cdne,delta\n";
    for (const char* metric : {"mean_auroc", "mean_accuracy"}) {
      const double b = without.at(metric).get<double>();
      const double w = with.at(metric).get<double>();
      delta << metric << ',' << cdne::detail::format_double(b) << ','
            << cdne::detail::format_double(w) << ',' << cdne::detail::format_double(w - b)
            << '\n';
    }
    say("delta table -> " + (fs::path(out_dir) / "delta.csv").string());
  }
  return 0;
}

int run_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& out_file) {
  const cdne::RunConfig cfg = cdne::load_run_config(config_path);
  const cdne::Dataset data = resolve_dataset(cfg, config_path);
  const cdne::Checkpoint ckpt = cdne::load_checkpoint(ckpt_path);
  check_compatible(ckpt.model, data);

  std::vector<std::size_t> all(data.bags.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const cdne::EvalMetrics m =
      cdne::evaluate(ckpt.model, ckpt.head ? &*ckpt.head : nullptr, data, all);

  const json report{{"auroc", m.auroc},
                    {"accuracy", m.accuracy},
                    {"per_class_mean_std", m.mean_std}};
  if (!out_file.empty()) write_json_file(report, out_file);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_diagnose(const std::string& config_path, const std::string& ckpt_path,
                 const std::string& out_dir) {
  const cdne::RunConfig cfg = cdne::load_run_config(config_path);
  const cdne::Dataset data = resolve_dataset(cfg, config_path);
  const cdne::Checkpoint ckpt = cdne::load_checkpoint(ckpt_path);
  check_compatible(ckpt.model, data);

  const cdne::DiagnosticsReport report =
      cdne::bag_diagnostics(ckpt.model, ckpt.head ? &*ckpt.head : nullptr, data);

  fs::create_directories(out_dir);
  write_json_file(cdne::summary_to_json(report.summary), fs::path(out_dir) / "summary.json");
  const std::vector<std::string> skipped =
      cdne::export_attention(report.bags, fs::path(out_dir) / "attention");
  if (!skipped.empty()) {
    std::string ids;
    for (const std::string& id : skipped) ids += (ids.empty() ? "" : ", ") + id;
    std::cerr << "warning: no coordinates for bags: " << ids << "\n";
  }

  bool have_axes = false;
  for (double v : report.principal_axes[0]) have_axes = have_axes || v != 0.0;
  if (have_axes) {
    std::ofstream out(fs::path(out_dir) / "centers_projection.csv");
    if (!out) throw cdne::IoError("cannot open centers_projection.csv for writing");
    out << "id,label,axis0,axis1\n";
    for (const cdne::BagDiagnostics& b : report.bags) {
      double p0 = 0.0, p1 = 0.0;
      for (std::size_t d = 0; d < b.center.size(); ++d) {
        p0 += b.center[d] * report.principal_axes[0][d];
        p1 += b.center[d] * report.principal_axes[1][d];
      }
      out << b.id << ',' << b.label << ',' << cdne::detail::format_double(p0) << ','
          << cdne::detail::format_double(p1) << '\n';
    }
  }

  say("auroc " + fmt(report.summary.auroc) + ", accuracy " + fmt(report.summary.accuracy) +
      ", negative_center_dispersion " + fmt(report.summary.negative_center_dispersion) +
      " -> " + out_dir);
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& axis,
               std::vector<double> values, const std::string& out_file, std::size_t jobs) {
  const cdne::RunConfig base = cdne::load_run_config(config_path);
  if (values.empty()) {
    if (axis == "lambda_neg") values = {0.0, 1.0, 10.0, 100.0, 1000.0};
    else if (axis == "lambda_pos") values = {0.0, 0.3, 3.0, 30.0, 300.0};
    else values = {0.25, 0.5, 1.0, 2.0, 4.0};
  }

  std::vector<cdne::RunConfig> cells;
  for (double v : values) {
    cdne::RunConfig cfg = base;
    cfg.cdne.enabled = true;
    if (axis == "lambda_neg") cfg.cdne.lambda_neg = v;
    else if (axis == "lambda_pos") cfg.cdne.lambda_pos = v;
    else cfg.cdne.thr = v;
    cfg.validate();
    cells.push_back(std::move(cfg));
  }

  const cdne::Dataset data = resolve_dataset(base, config_path);
  std::ofstream out(out_file);
  if (!out) throw cdne::IoError("cannot open " + out_file + " for writing");
  out << "value,mean_auroc,mean_accuracy\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const cdne::CvResult cv = cdne::run_cv(data, cells[i], jobs);
    out << cdne::detail::format_double(values[i]) << ','
        << cdne::detail::format_double(cv.mean_auroc) << ','
        << cdne::detail::format_double(cv.mean_accuracy) << '\n';
    out.flush();
    say(axis + " = " + fmt(values[i]) + ": mean_auroc " + fmt(cv.mean_auroc) +
        ", mean_accuracy " + fmt(cv.mean_accuracy));
  }
  if (!out) throw cdne::IoError("failed while writing " + out_file);
  say("ablation table -> " + out_file);
  return 0;
}

int run_gradcheck(double tol, double h, const std::string& fault) {
  cdne::GradCheckOptions opts;
  opts.tol = tol;
  opts.h = h;
  if (fault == "sqrt") opts.inject_fault = cdne::OpKind::sqrt_elementwise;

  const std::vector<cdne::GradCheckProgram> checks = cdne::standard_grad_checks();

  std::size_t failed = 0;
  for (const cdne::GradCheckProgram& check : checks) {
    const cdne::GradCheckReport report = cdne::grad_check(check.program, check.params, opts);
    double worst = 0.0;
    std::string worst_param;
    bool ok = true;
    for (const cdne::GradCheckEntry& e : report.entries) {
      if (e.max_rel_err >= worst) {
        worst = e.max_rel_err;
        worst_param = e.name;
      }
      ok = ok && e.passed;
    }
    char line[256];
    std::snprintf(line, sizeof(line), "[%s] %-42s max_rel_err %.3e (%s)",
                  ok ? "ok" : "FAIL", check.name.c_str(), worst, worst_param.c_str());
    std::cout << line << "\n";
    if (!ok) ++failed;
  }
  if (failed > 0) {
    std::cout << "gradcheck: " << failed << " of " << checks.size()
              << " checks above tolerance " << fmt(tol) << "\n";
    return 1;
  }
  std::cout << "gradcheck: all " << checks.size() << " checks passed (tolerance " << fmt(tol)
            << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-based multiple-instance learning with a compact negative embedding"};
  app.require_subcommand(1);

  GenerateArgs gen_args;
  CLI::App* gen = app.add_subcommand("generate", "write a synthetic bag dataset to disk");
  gen->add_option("--spec", gen_args.spec_file, "JSON file with generator parameters");
  gen->add_option("--out", gen_args.out_dir, "output directory")->required();
  gen->add_option("--bags-per-class", gen_args.flags.bags_per_class);
  gen->add_option("--classes", gen_args.flags.num_classes);
  gen->add_option("--k-min", gen_args.flags.k_min);
  gen->add_option("--k-max", gen_args.flags.k_max);
  gen->add_option("--dim", gen_args.flags.dim);
  gen->add_option("--witness-ratio", gen_args.flags.positive_instance_ratio,
                  "fraction of label-carrying instances in positive bags");
  gen->add_option("--separation", gen_args.flags.class_separation,
                  "mean shift of the witness cluster");
  gen->add_option("--bag-sigma", gen_args.flags.bag_prior_sigma,
                  "std of the shared per-bag offset");
  gen->add_option("--noise-sigma", gen_args.flags.noise_sigma);
  gen->add_option("--seed", gen_args.flags.seed);

  std::string train_config, train_out = ".";
  std::size_t train_fold_index = 0;
  CLI::App* train = app.add_subcommand("train", "train one cross-validation fold");
  train->add_option("--config", train_config, "run configuration JSON")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--fold", train_fold_index, "fold index to train");

  std::string cv_config, cv_out = ".";
  std::size_t cv_jobs = 1;
  CLI::App* cv = app.add_subcommand("cv", "run k-fold cross-validation");
  cv->add_option("--config", cv_config, "run configuration JSON")->required();
  cv->add_option("--out", cv_out, "output directory");
  cv->add_option("--jobs", cv_jobs, "parallel fold workers")->check(CLI::Range(1, 256));

  std::string eval_config, eval_ckpt, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--config", eval_config, "run configuration JSON")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--out", eval_out, "also write the metrics JSON here");

  std::string diag_config, diag_ckpt, diag_out;
  CLI::App* diagnose = app.add_subcommand("diagnose", "export per-bag diagnostics");
  diagnose->add_option("--config", diag_config, "run configuration JSON")->required();
  diagnose->add_option("--checkpoint", diag_ckpt, "checkpoint file")->required();
  diagnose->add_option("--out", diag_out, "output directory")->required();

  std::string ab_config, ab_axis, ab_out;
  std::vector<double> ab_values;
  std::size_t ab_jobs = 1;
  CLI::App* ablate = app.add_subcommand("ablate", "sweep one auxiliary hyperparameter");
  ablate->add_option("--config", ab_config, "run configuration JSON")->required();
  ablate->add_option("--axis", ab_axis, "hyperparameter to sweep")
      ->required()
      ->check(CLI::IsMember({"lambda_neg", "lambda_pos", "thr"}));
  ablate->add_option("--values", ab_values, "sweep values (default grid per axis)")
      ->delimiter(',');
  ablate->add_option("--out", ab_out, "ablation table CSV")->required();
  ablate->add_option("--jobs", ab_jobs, "parallel fold workers")->check(CLI::Range(1, 256));

  double gc_tol = 1e-4, gc_h = 1e-6;
  std::string gc_fault;
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gradcheck->add_option("--tol", gc_tol, "relative error tolerance");
  gradcheck->add_option("--step", gc_h, "finite difference step");
  gradcheck
      ->add_option("--inject-fault", gc_fault,
                   "deliberately corrupt one backward rule (testing hook)")
      ->check(CLI::IsMember({"sqrt"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_generate(*gen, gen_args);
    if (train->parsed()) return run_train(train_config, train_out, train_fold_index);
    if (cv->parsed()) return run_cv_cmd(cv_config, cv_out, cv_jobs);
    if (eval->parsed()) return run_eval(eval_config, eval_ckpt, eval_out);
    if (diagnose->parsed()) return run_diagnose(diag_config, diag_ckpt, diag_out);
    if (ablate->parsed()) return run_ablate(ab_config, ab_axis, ab_values, ab_out, ab_jobs);
    if (gradcheck->parsed()) return run_gradcheck(gc_tol, gc_h, gc_fault);
  } catch (const cdne::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cdne::SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
