// Command-line front end for the poisoning laboratory. Subcommands mirror the
// experiment protocols; progress goes to stderr, machine-readable summaries to
// stdout, and full per-trial reports to JSONL/CSV files under --out.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fclab/harness.hpp"
#include "fclab/imageio.hpp"
#include "fclab/rng.hpp"
#include "json.hpp"

namespace {

using namespace fclab;
namespace fs = std::filesystem;

std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  int jobs = -1;
  std::string profile;
  bool smoke = false;
  std::string checkpoint;
};

void add_common(CLI::App* app, CommonOpts& o) {
  app->add_option("--config", o.config_path, "Experiment config JSON file");
  auto* s = app->add_option("--seed", o.seed, "Master seed override");
  app->callback([&o, s] { o.seed_set = s->count() > 0; });
  app->add_option("--out", o.out, "Output directory override");
  app->add_option("--jobs", o.jobs, "Worker threads (0 = logical cores)");
  app->add_option("--profile", o.profile, "Model profile: tiny | table1")
      ->check(CLI::IsMember({"tiny", "table1"}));
  app->add_flag("--smoke", o.smoke, "Halve trial counts for a quick pass");
  app->add_option("--checkpoint", o.checkpoint, "Checkpoint path override");
}

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = config_from_json_text(read_text_file(o.config_path));
  if (o.seed_set) cfg.master_seed = o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.jobs >= 0) cfg.jobs = o.jobs;
  if (!o.profile.empty()) cfg.profile = o.profile;
  if (o.smoke) cfg.smoke = true;
  if (!o.checkpoint.empty()) cfg.checkpoint_path = o.checkpoint;
  fs::create_directories(cfg.out_dir);
  return cfg;
}

void emit_reports(const ExperimentConfig& cfg, const std::string& name,
                  const std::vector<AttackReport>& reports) {
  const fs::path base = fs::path(cfg.out_dir) / name;
  write_reports_jsonl(reports, (base.string() + "_reports.jsonl"));
  write_reports_csv(reports, (base.string() + "_reports.csv"));

  nlohmann::json summary;
  summary["scenario"] = name;
  summary["n_reports"] = reports.size();
  summary["success_rate"] = success_rate(reports);
  summary["config_hash"] = config_hash(cfg);
  summary["reports_jsonl"] = base.string() + "_reports.jsonl";
  summary["reports_csv"] = base.string() + "_reports.csv";
  std::cout << summary.dump(2) << "\n";
}

Tensor single(const LabeledImage& im) { return im.pixels; }

Tensor as_batch1(const Tensor& img) {
  std::vector<int> shape = {1};
  shape.insert(shape.end(), img.shape().begin(), img.shape().end());
  return Tensor(shape, std::vector<double>(img.data(), img.data() + img.size()));
}

// Shared setup for `craft` and `project`: extractor + a deterministic
// target/base pair from the test split.
struct CraftScene {
  Model model;
  Dataset train_set;
  Dataset test_set;
  LabeledImage target;
  LabeledImage base;
};

CraftScene make_craft_scene(const ExperimentConfig& cfg) {
  CraftScene s;
  s.train_set = load_train_set(cfg);
  s.test_set = load_test_set(cfg);
  if (cfg.checkpoint_path.empty())
    std::cerr << "[craft] no checkpoint given, training extractor inline\n";
  s.model = load_attack_model(cfg);
  Rng trng = Rng(cfg.master_seed).fork(100);
  const auto tpool = s.test_set.indices_of_class(cfg.target_class);
  const auto bpool = s.test_set.indices_of_class(cfg.base_class);
  if (tpool.empty() || bpool.empty())
    throw std::runtime_error("test split lacks target or base class instances");
  s.target = s.test_set.images[static_cast<std::size_t>(tpool[trng.uniform_int(tpool.size())])];
  s.base = s.test_set.images[static_cast<std::size_t>(bpool[trng.uniform_int(bpool.size())])];
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-collision data poisoning laboratory"};
  app.require_subcommand(0, 1);

  bool print_schema = false;
  app.add_flag("--print-schema", print_schema, "Print the config JSON schema and exit");

  CommonOpts pretrain_o, oneshot_o, end2end_o, outliers_o, ablation_o, craft_o, project_o;
  double craft_gamma = 0.0;

  auto* cmd_pretrain =
      app.add_subcommand("pretrain", "Train the clean model and write the checkpoint");
  add_common(cmd_pretrain, pretrain_o);
  auto* cmd_oneshot =
      app.add_subcommand("oneshot", "Single-poison transfer attack trials");
  add_common(cmd_oneshot, oneshot_o);
  auto* cmd_end2end =
      app.add_subcommand("end2end", "Multi-poison end-to-end attack sweep");
  add_common(cmd_end2end, end2end_o);
  auto* cmd_outliers =
      app.add_subcommand("outliers", "Outlier-target campaign with random control arm");
  add_common(cmd_outliers, outliers_o);
  auto* cmd_ablation =
      app.add_subcommand("ablation", "Leave-one-out technique ablation");
  add_common(cmd_ablation, ablation_o);
  auto* cmd_craft =
      app.add_subcommand("craft", "Craft one poison and export PNG + tensor blob");
  add_common(cmd_craft, craft_o);
  cmd_craft->add_option("--gamma", craft_gamma, "Watermark opacity before crafting");
  auto* cmd_project =
      app.add_subcommand("project", "Write the 2-D feature projection CSV for one scene");
  add_common(cmd_project, project_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (print_schema) {
      std::cout << config_schema_json() << "\n";
      return 0;
    }

    if (cmd_pretrain->parsed()) {
      ExperimentConfig cfg = resolve_config(pretrain_o);
      const PretrainResult r = pretrain(cfg);
      nlohmann::json j;
      j["checkpoint"] = r.checkpoint_path;
      j["train_accuracy"] = r.train_accuracy;
      j["test_accuracy"] = r.test_accuracy;
      j["config_hash"] = config_hash(cfg);
      std::cout << j.dump(2) << "\n";
      return 0;
    }
    if (cmd_oneshot->parsed()) {
      ExperimentConfig cfg = resolve_config(oneshot_o);
      emit_reports(cfg, "oneshot", run_oneshot_transfer(cfg));
      return 0;
    }
    if (cmd_end2end->parsed()) {
      ExperimentConfig cfg = resolve_config(end2end_o);
      emit_reports(cfg, "end2end", run_end2end(cfg));
      return 0;
    }
    if (cmd_outliers->parsed()) {
      ExperimentConfig cfg = resolve_config(outliers_o);
      emit_reports(cfg, "outliers", run_outlier_campaign(cfg));
      return 0;
    }
    if (cmd_ablation->parsed()) {
      ExperimentConfig cfg = resolve_config(ablation_o);
      emit_reports(cfg, "ablation", run_ablation(cfg));
      return 0;
    }
    if (cmd_craft->parsed()) {
      ExperimentConfig cfg = resolve_config(craft_o);
      CraftScene s = make_craft_scene(cfg);
      PoisonConfig pc = cfg.poison;
      if (!pc.stop_threshold)
        pc.stop_threshold = compute_stop_threshold(s.model, s.train_set.batch());
      const Tensor start =
          craft_gamma > 0.0 ? watermark_blend(single(s.base), single(s.target), craft_gamma)
                            : single(s.base);
      const PoisonResult pr = cfg.poison.metric == PoisonConfig::Metric::Linf
                                  ? craft_poison_linf(s.model, single(s.target), start, pc)
                                  : craft_poison(s.model, single(s.target), start, pc);
      const fs::path out(cfg.out_dir);
      write_png(s.target.pixels, (out / "target.png").string());
      write_png(s.base.pixels, (out / "base.png").string());
      write_png(pr.image, (out / "poison.png").string());
      save_tensor_blob(pr.image, "poison", (out / "poison.pfck").string());
      nlohmann::json j;
      j["target_id"] = s.target.source_id;
      j["base_id"] = s.base.source_id;
      j["gamma"] = craft_gamma;
      j["iterations"] = pr.iterations;
      j["feature_distance"] = pr.feature_distance;
      j["input_l2"] = pr.input_l2;
      j["input_linf"] = pr.input_linf;
      j["stop_reason"] =
          pr.stop_reason == PoisonResult::StopReason::Threshold ? "threshold" : "max_iters";
      j["failed"] = pr.failed;
      if (pr.failed) j["error"] = pr.error;
      j["poison_png"] = (out / "poison.png").string();
      j["poison_blob"] = (out / "poison.pfck").string();
      std::cout << j.dump(2) << "\n";
      return pr.failed ? 1 : 0;
    }
    if (cmd_project->parsed()) {
      ExperimentConfig cfg = resolve_config(project_o);
      CraftScene s = make_craft_scene(cfg);
      PoisonConfig pc = cfg.poison;
      if (!pc.stop_threshold)
        pc.stop_threshold = compute_stop_threshold(s.model, s.train_set.batch());
      const PoisonResult pr = craft_poison(s.model, single(s.target), single(s.base), pc);

      Scene scene;
      scene.train_features = s.model.features(s.train_set.batch());
      scene.train_labels = s.train_set.labels();
      scene.target_features = s.model.features(as_batch1(s.target.pixels));
      scene.base_features = s.model.features(as_batch1(s.base.pixels));
      scene.poison_features = s.model.features(as_batch1(pr.image));
      scene.poison_labels = {cfg.base_class};
      scene.target_class = cfg.target_class;
      scene.base_class = cfg.base_class;

      const ProjectionBasis basis = projection_basis(
          s.model, scene.train_features, scene.train_labels, cfg.target_class, cfg.base_class);
      const std::string csv = scene_csv(project_scene(basis, scene));
      const fs::path out = fs::path(cfg.out_dir) / "scene.csv";
      std::ofstream f(out);
      f << csv;
      if (!f) throw std::runtime_error("cannot write " + out.string());
      nlohmann::json j;
      j["scene_csv"] = out.string();
      j["rows"] = std::count(csv.begin(), csv.end(), '\n') - 1;
      std::cout << j.dump(2) << "\n";
      return 0;
    }

    std::cerr << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
