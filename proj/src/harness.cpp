#include "fclab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <thread>

#include "fclab/mathutil.hpp"
#include "fclab/rng.hpp"
#include "json.hpp"

namespace fclab {

PoisonConfig ExperimentConfig::desk_poison_defaults() {
  PoisonConfig pc;
  pc.beta0 = 1e-4;
  pc.lambda = 2.0;
  pc.max_iters = 10000;
  // The collision objective sits far below its starting value here, so stall
  // detection only strands the iterate at a shrunken step; leave the step
  // size fixed and let the iteration budget do the work.
  pc.decay = std::optional<double>();
  return pc;
}

namespace {

using nlohmann::json;

Tensor as_batch1(const Tensor& img) {
  std::vector<int> shape = {1};
  shape.insert(shape.end(), img.shape().begin(), img.shape().end());
  return Tensor(shape, std::vector<double>(img.data(), img.data() + img.size()));
}

int effective_jobs(const ExperimentConfig& cfg) {
  if (cfg.jobs > 0) return cfg.jobs;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? static_cast<int>(hc) : 1;
}

// Runs fn(0..n-1) on a bounded pool; results are whatever fn writes into
// its own slot, so ordering is by index regardless of completion order.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(jobs));
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

json poison_config_to_json(const PoisonConfig& pc) {
  json j;
  j["beta0"] = pc.beta0;
  j["beta_override"] = pc.beta_override ? json(*pc.beta_override) : json(nullptr);
  j["lambda"] = pc.lambda;
  j["max_iters"] = pc.max_iters;
  j["metric"] = pc.metric == PoisonConfig::Metric::L2 ? "l2" : "linf";
  j["eps_inf"] = pc.eps_inf;
  j["stop_threshold"] = pc.stop_threshold ? json(*pc.stop_threshold) : json(nullptr);
  j["decay"] = pc.decay ? json(*pc.decay) : json(nullptr);
  j["decay_patience"] = pc.decay_patience;
  return j;
}

// Fields absent from the JSON keep their values in `pc`, so a partial
// override tweaks the experiment defaults instead of replacing them.
PoisonConfig poison_config_from_json(const json& j, PoisonConfig pc) {
  if (j.contains("beta0")) pc.beta0 = j.at("beta0").get<double>();
  if (j.contains("beta_override") && !j.at("beta_override").is_null())
    pc.beta_override = j.at("beta_override").get<double>();
  if (j.contains("lambda")) pc.lambda = j.at("lambda").get<double>();
  if (j.contains("max_iters")) pc.max_iters = j.at("max_iters").get<int>();
  if (j.contains("metric"))
    pc.metric = j.at("metric").get<std::string>() == "linf" ? PoisonConfig::Metric::Linf
                                                            : PoisonConfig::Metric::L2;
  if (j.contains("eps_inf")) pc.eps_inf = j.at("eps_inf").get<double>();
  if (j.contains("stop_threshold") && !j.at("stop_threshold").is_null())
    pc.stop_threshold = j.at("stop_threshold").get<double>();
  if (j.contains("decay")) {
    if (j.at("decay").is_null())
      pc.decay.reset();
    else
      pc.decay = j.at("decay").get<double>();
  }
  if (j.contains("decay_patience")) pc.decay_patience = j.at("decay_patience").get<int>();
  return pc;
}

json train_config_to_json(const TrainConfig& tc) {
  return json{{"epochs", tc.epochs}, {"batch_size", tc.batch_size}, {"lr", tc.lr}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
  if (j.contains("epochs")) base.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) base.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) base.lr = j.at("lr").get<double>();
  return base;
}

}  // namespace

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["scenario"] = cfg.scenario;
  j["cifar_train_path"] = cfg.cifar_train_path;
  j["cifar_test_path"] = cfg.cifar_test_path;
  j["cifar_per_class_train"] = cfg.cifar_per_class_train;
  j["cifar_per_class_test"] = cfg.cifar_per_class_test;
  j["synth_classes"] = cfg.synth_classes;
  j["synth_train_per_class"] = cfg.synth_train_per_class;
  j["synth_test_per_class"] = cfg.synth_test_per_class;
  j["synth_hw"] = cfg.synth_hw;
  j["pretrain_classes"] = cfg.pretrain_classes;
  j["profile"] = cfg.profile;
  j["lrn_identity"] = cfg.lrn_identity;
  j["whiten_floor"] = cfg.whiten_floor;
  j["whiten_sample_per_class"] = cfg.whiten_sample_per_class;
  j["pretrain"] = train_config_to_json(cfg.pretrain);
  j["transfer"] = train_config_to_json(cfg.transfer);
  j["retrain"] = train_config_to_json(cfg.retrain);
  j["poison"] = poison_config_to_json(cfg.poison);
  j["stop_threshold_scale"] = cfg.stop_threshold_scale;
  j["gamma"] = cfg.gamma;
  j["n_poisons_sweep"] = cfg.n_poisons_sweep;
  j["n_poisons"] = cfg.n_poisons;
  j["n_trials"] = cfg.n_trials;
  j["target_selection"] = cfg.target_selection;
  j["outlier_k"] = cfg.outlier_k;
  j["target_class"] = cfg.target_class;
  j["base_class"] = cfg.base_class;
  j["master_seed"] = cfg.master_seed;
  j["out_dir"] = cfg.out_dir;
  j["checkpoint_path"] = cfg.checkpoint_path;
  j["jobs"] = cfg.jobs;
  j["smoke"] = cfg.smoke;
  return j.dump(2);
}

ExperimentConfig config_from_json_text(const std::string& text) {
  const json j = json::parse(text);
  ExperimentConfig cfg;
  auto s = [&](const char* k, std::string& dst) { if (j.contains(k)) dst = j.at(k).get<std::string>(); };
  auto i = [&](const char* k, int& dst) { if (j.contains(k)) dst = j.at(k).get<int>(); };
  auto d = [&](const char* k, double& dst) { if (j.contains(k)) dst = j.at(k).get<double>(); };
  auto b = [&](const char* k, bool& dst) { if (j.contains(k)) dst = j.at(k).get<bool>(); };
  s("scenario", cfg.scenario);
  s("cifar_train_path", cfg.cifar_train_path);
  s("cifar_test_path", cfg.cifar_test_path);
  i("cifar_per_class_train", cfg.cifar_per_class_train);
  i("cifar_per_class_test", cfg.cifar_per_class_test);
  i("synth_classes", cfg.synth_classes);
  i("synth_train_per_class", cfg.synth_train_per_class);
  i("synth_test_per_class", cfg.synth_test_per_class);
  i("synth_hw", cfg.synth_hw);
  i("pretrain_classes", cfg.pretrain_classes);
  s("profile", cfg.profile);
  b("lrn_identity", cfg.lrn_identity);
  d("whiten_floor", cfg.whiten_floor);
  i("whiten_sample_per_class", cfg.whiten_sample_per_class);
  if (j.contains("pretrain")) cfg.pretrain = train_config_from_json(j.at("pretrain"), cfg.pretrain);
  if (j.contains("transfer")) cfg.transfer = train_config_from_json(j.at("transfer"), cfg.transfer);
  if (j.contains("retrain")) cfg.retrain = train_config_from_json(j.at("retrain"), cfg.retrain);
  if (j.contains("poison")) cfg.poison = poison_config_from_json(j.at("poison"), cfg.poison);
  d("stop_threshold_scale", cfg.stop_threshold_scale);
  d("gamma", cfg.gamma);
  if (j.contains("n_poisons_sweep")) cfg.n_poisons_sweep = j.at("n_poisons_sweep").get<std::vector<int>>();
  i("n_poisons", cfg.n_poisons);
  i("n_trials", cfg.n_trials);
  s("target_selection", cfg.target_selection);
  i("outlier_k", cfg.outlier_k);
  i("target_class", cfg.target_class);
  i("base_class", cfg.base_class);
  if (j.contains("master_seed")) cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
  s("out_dir", cfg.out_dir);
  s("checkpoint_path", cfg.checkpoint_path);
  i("jobs", cfg.jobs);
  b("smoke", cfg.smoke);
  if (cfg.target_class == cfg.base_class)
    throw std::invalid_argument("config: target_class and base_class must differ");
  if (cfg.n_trials < 1) throw std::invalid_argument("config: n_trials must be >= 1");
  if (cfg.n_poisons_sweep.empty()) throw std::invalid_argument("config: empty n_poisons_sweep");
  return cfg;
}

std::string config_schema_json() {
  // Field names mirror ExperimentConfig; defaults are what an empty config yields.
  return config_to_json_text(ExperimentConfig{});
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = config_to_json_text(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

bool uses_cifar(const ExperimentConfig& cfg) { return !cfg.cifar_train_path.empty(); }

Dataset subset_per_class(const Dataset& src, int per_class) {
  Dataset out;
  out.class_names = src.class_names;
  out.split = src.split;
  std::vector<int> taken(src.class_names.size(), 0);
  for (const auto& im : src.images) {
    if (taken[static_cast<std::size_t>(im.label)] >= per_class) continue;
    out.images.push_back(im);
    ++taken[static_cast<std::size_t>(im.label)];
  }
  return out;
}

// Synthetic train/test come from one generation pass so both splits share
// the per-class patterns while drawing disjoint noise.
std::pair<Dataset, Dataset> make_synth_splits(const ExperimentConfig& cfg, int classes) {
  const int per = cfg.synth_train_per_class + cfg.synth_test_per_class;
  Dataset all = synth_dataset(classes, per, cfg.synth_hw, Rng(cfg.master_seed).fork(11).seed());
  Dataset train, test;
  train.class_names = test.class_names = all.class_names;
  train.split = "train";
  test.split = "test";
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (auto& im : all.images) {
    if (seen[static_cast<std::size_t>(im.label)]++ < cfg.synth_train_per_class)
      train.images.push_back(std::move(im));
    else
      test.images.push_back(std::move(im));
  }
  test = dedup(train, test);
  return {std::move(train), std::move(test)};
}

// Transfer extractors see a wider synthetic class set than the attack pair.
bool wide_pretrain(const ExperimentConfig& cfg) {
  return !uses_cifar(cfg) && cfg.scenario == "oneshot" &&
         cfg.pretrain_classes > cfg.synth_classes;
}

int extractor_classes(const ExperimentConfig& cfg) {
  if (uses_cifar(cfg)) return 10;
  return wide_pretrain(cfg) ? cfg.pretrain_classes : cfg.synth_classes;
}

}  // namespace

Dataset load_train_set(const ExperimentConfig& cfg) {
  if (uses_cifar(cfg))
    return subset_per_class(read_cifar10(cfg.cifar_train_path, "train"), cfg.cifar_per_class_train);
  return make_synth_splits(cfg, cfg.synth_classes).first;
}

Dataset load_test_set(const ExperimentConfig& cfg) {
  if (uses_cifar(cfg)) {
    Dataset train = load_train_set(cfg);
    Dataset test =
        subset_per_class(read_cifar10(cfg.cifar_test_path, "test"), cfg.cifar_per_class_test);
    return dedup(train, test);
  }
  return make_synth_splits(cfg, cfg.synth_classes).second;
}

Model make_model_with_classes(const ExperimentConfig& cfg, int classes, std::uint64_t seed) {
  if (cfg.profile == "table1") {
    const std::vector<int> input_shape =
        uses_cifar(cfg) ? std::vector<int>{3, 32, 32} : std::vector<int>{1, cfg.synth_hw, cfg.synth_hw};
    if (!uses_cifar(cfg) && cfg.synth_hw < 16)
      throw std::invalid_argument("make_model: table1 profile needs at least 16x16 inputs");
    return build(table1_specs(classes, cfg.lrn_identity), input_shape, seed);
  }
  if (cfg.profile == "tiny") {
    const std::vector<int> input_shape =
        uses_cifar(cfg) ? std::vector<int>{3, 32, 32} : std::vector<int>{1, cfg.synth_hw, cfg.synth_hw};
    return build(tiny_specs(classes), input_shape, seed);
  }
  throw std::invalid_argument("make_model: unknown profile '" + cfg.profile + "'");
}

Model make_model(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_model_with_classes(cfg, uses_cifar(cfg) ? 10 : cfg.synth_classes, seed);
}

// The model the pretrain stage trains and checkpoints: the extractor class
// count for transfer scenarios, the attack class count otherwise.
Model make_pretrain_model(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_model_with_classes(cfg, extractor_classes(cfg), seed);
}

// Spheres within-class feature variation after transfer-scenario
// pretraining. The conv stage amplifies some input directions by orders of
// magnitude more than others, which leaves the within-class feature geometry
// effectively one-dimensional; a head retrained around a poison then swings
// unrelated clean points that happen to sit along the dominant direction.
// Whitening against a large sample of the deployment (attack-pair)
// distribution equalizes those directions, so the carve-out around a poison
// stays local. Model outputs are unchanged; only the feature basis moves.
// A no-op for architectures whose feature layer is an activation rather
// than the linear dense, and when whitening is disabled.
void whiten_if_linear_features(const ExperimentConfig& cfg, Model& model) {
  if (cfg.whiten_floor <= 0.0 || !wide_pretrain(cfg)) return;
  if (model.specs()[static_cast<std::size_t>(model.feature_layer_index())].kind !=
      LayerSpec::Kind::Dense)
    return;
  const Dataset sample =
      synth_dataset(cfg.synth_classes, cfg.whiten_sample_per_class, cfg.synth_hw,
                    Rng(cfg.master_seed).fork(11).seed());
  whiten_feature_layer(model, model.features(sample.batch()), sample.labels(),
                       cfg.whiten_floor);
}

Model load_attack_model(const ExperimentConfig& cfg) {
  Model pretrained = make_pretrain_model(cfg, Rng(cfg.master_seed).fork(1).seed());
  if (!cfg.checkpoint_path.empty()) {
    load_checkpoint_file(pretrained, cfg.checkpoint_path);
  } else {
    const Dataset pre_train =
        wide_pretrain(cfg) ? make_synth_splits(cfg, cfg.pretrain_classes).first
                           : load_train_set(cfg);
    TrainConfig tc = cfg.pretrain;
    tc.shuffle_seed = Rng(cfg.master_seed).fork(2).seed();
    train(pretrained, pre_train, tc);
    whiten_if_linear_features(cfg, pretrained);
  }
  const int attack_classes = uses_cifar(cfg) ? 10 : cfg.synth_classes;
  if (pretrained.num_classes() == attack_classes) return pretrained;
  return with_new_head(pretrained, attack_classes, Rng(cfg.master_seed).fork(3).seed());
}

PretrainResult pretrain(const ExperimentConfig& cfg) {
  const bool wide = wide_pretrain(cfg);
  const Dataset train_set =
      wide ? make_synth_splits(cfg, cfg.pretrain_classes).first : load_train_set(cfg);
  const Dataset test_set =
      wide ? make_synth_splits(cfg, cfg.pretrain_classes).second : load_test_set(cfg);
  Model model = make_pretrain_model(cfg, Rng(cfg.master_seed).fork(1).seed());
  TrainConfig tc = cfg.pretrain;
  tc.shuffle_seed = Rng(cfg.master_seed).fork(2).seed();
  const TrainResult tr = train(model, train_set, tc);
  whiten_if_linear_features(cfg, model);

  PretrainResult res;
  res.train_accuracy = evaluate(model, train_set).accuracy;
  res.test_accuracy = evaluate(model, test_set).accuracy;
  res.checkpoint_path = cfg.checkpoint_path.empty()
                            ? (std::filesystem::path(cfg.out_dir) / "pretrained.pfck").string()
                            : cfg.checkpoint_path;
  std::filesystem::create_directories(
      std::filesystem::path(res.checkpoint_path).parent_path().empty()
          ? "."
          : std::filesystem::path(res.checkpoint_path).parent_path().string());
  save_checkpoint_file(model, res.checkpoint_path);

  json meta;
  meta["epochs"] = tc.epochs;
  meta["final_train_loss"] = tr.final_loss();
  meta["train_accuracy"] = res.train_accuracy;
  meta["test_accuracy"] = res.test_accuracy;
  meta["config_hash"] = config_hash(cfg);
  std::ofstream mf(res.checkpoint_path + ".json");
  mf << meta.dump(2) << "\n";

  res.model = std::move(model);
  return res;
}

namespace {

struct OneshotContext {
  const ExperimentConfig& cfg;
  Dataset train_set;
  Dataset test_set;
  Model extractor;
  Tensor train_features;  // frozen extractor, so computed once
  std::vector<int> train_labels;
  Tensor test_features;
  double stop_threshold = 0.0;
  std::vector<std::string> shared_warnings;
};

// Accuracy of a final-layer-only model over precomputed feature rows.
double head_accuracy(const Model& model, const Tensor& features, const std::vector<int>& labels) {
  Graph g;
  const NodeId logits = g.dense(g.constant(features), g.constant(model.final_weights()),
                                g.constant(model.final_bias()));
  const Tensor& lv = g.value(logits);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(lv, static_cast<int>(i)) == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

AttackReport oneshot_trial(const OneshotContext& ctx, int trial) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig& cfg = ctx.cfg;
  Rng trng = Rng(cfg.master_seed).fork(100 + static_cast<std::uint64_t>(trial));

  const auto target_pool = ctx.test_set.indices_of_class(cfg.target_class);
  const auto base_pool = ctx.test_set.indices_of_class(cfg.base_class);
  if (target_pool.empty() || base_pool.empty())
    throw std::runtime_error("oneshot: test split lacks target or base class instances");
  const LabeledImage& target =
      ctx.test_set.images[static_cast<std::size_t>(target_pool[trng.uniform_int(target_pool.size())])];
  const LabeledImage& base =
      ctx.test_set.images[static_cast<std::size_t>(base_pool[trng.uniform_int(base_pool.size())])];

  PoisonConfig pc = cfg.poison;
  if (!pc.stop_threshold) pc.stop_threshold = ctx.stop_threshold;
  PoisonResult pr = cfg.poison.metric == PoisonConfig::Metric::Linf
                        ? craft_poison_linf(ctx.extractor, target.pixels, base.pixels, pc)
                        : craft_poison(ctx.extractor, target.pixels, base.pixels, pc);

  const std::uint64_t head_seed = trng.next_u64();
  const std::uint64_t shuffle_seed = trng.next_u64();

  TrainConfig tc = cfg.transfer;
  tc.shuffle_seed = shuffle_seed;

  Model clean_model = ctx.extractor;
  clean_model.reinit_final_layer(head_seed);
  clean_model.freeze_all_but_final();
  train_head(clean_model, ctx.train_features, ctx.train_labels, tc);

  // Poisoned copy: one extra feature row, labeled as the base class.
  const int N = ctx.train_features.dim(0), D = ctx.train_features.dim(1);
  Tensor pfeat({N + 1, D});
  std::copy(ctx.train_features.data(), ctx.train_features.data() + ctx.train_features.size(),
            pfeat.data());
  const Tensor poison_row = ctx.extractor.features(as_batch1(pr.image));
  std::copy(poison_row.data(), poison_row.data() + poison_row.size(),
            pfeat.data() + static_cast<std::size_t>(N) * D);
  std::vector<int> plabels = ctx.train_labels;
  plabels.push_back(cfg.base_class);

  Model poisoned_model = ctx.extractor;
  poisoned_model.reinit_final_layer(head_seed);
  poisoned_model.freeze_all_but_final();
  const TrainResult ptr = train_head(poisoned_model, pfeat, plabels, tc);

  const SuccessCheck sc = attack_success(poisoned_model, target.pixels, cfg.base_class);

  AttackReport r;
  r.experiment_id = "oneshot:" + std::to_string(trial);
  r.scenario = "transfer";
  r.target_class = cfg.target_class;
  r.base_class = cfg.base_class;
  r.target_id = target.source_id;
  r.base_ids = {base.source_id};
  r.n_poisons = 1;
  r.gamma = 0.0;
  r.success = sc.success;
  r.predicted_class = sc.predicted_class;
  r.confidence = sc.confidence;
  r.angular_deviation_deg =
      angular_deviation(decision_normal(clean_model, cfg.target_class, cfg.base_class),
                        decision_normal(poisoned_model, cfg.target_class, cfg.base_class));
  r.clean_test_accuracy = head_accuracy(clean_model, ctx.test_features, ctx.test_set.labels());
  r.poisoned_test_accuracy =
      head_accuracy(poisoned_model, ctx.test_features, ctx.test_set.labels());
  r.feature_distances = {pr.feature_distance};
  r.stop_reasons = {pr.stop_reason == PoisonResult::StopReason::Threshold ? "threshold"
                                                                          : "max_iters"};
  r.retrain_final_loss = ptr.final_loss();
  r.retrain_final_accuracy = ptr.final_acc();
  r.seed = Rng(cfg.master_seed).fork(100 + static_cast<std::uint64_t>(trial)).seed();
  r.config_hash = config_hash(cfg);
  r.warnings = ctx.shared_warnings;
  if (pr.failed) r.warnings.push_back("craft failed: " + pr.error);
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

OneshotContext make_oneshot_context(const ExperimentConfig& cfg) {
  OneshotContext ctx{cfg, load_train_set(cfg), load_test_set(cfg), Model{}, {}, {}, {}, 0.0, {}};
  ctx.extractor = load_attack_model(cfg);
  ctx.train_features = ctx.extractor.features(ctx.train_set.batch());
  ctx.train_labels = ctx.train_set.labels();
  ctx.test_features = ctx.extractor.features(ctx.test_set.batch());
  ctx.stop_threshold =
      cfg.stop_threshold_scale * compute_stop_threshold(ctx.extractor, ctx.train_set.batch());

  const long trainable =
      static_cast<long>(ctx.extractor.feature_dim()) * ctx.extractor.num_classes();
  if (static_cast<long>(ctx.train_set.size()) > trainable)
    ctx.shared_warnings.push_back(
        "underdetermination violated: " + std::to_string(ctx.train_set.size()) +
        " training examples exceed " + std::to_string(trainable) + " final-layer weights");
  return ctx;
}

}  // namespace

std::vector<AttackReport> run_oneshot_transfer(const ExperimentConfig& cfg) {
  OneshotContext ctx = make_oneshot_context(cfg);
  const int trials = cfg.smoke ? std::max(1, cfg.n_trials / 2) : cfg.n_trials;
  std::vector<AttackReport> reports(static_cast<std::size_t>(trials));
  parallel_for(trials, effective_jobs(cfg), [&](int i) {
    reports[static_cast<std::size_t>(i)] = oneshot_trial(ctx, i);
    std::cerr << "[oneshot] trial " << i << (reports[static_cast<std::size_t>(i)].success
                                                 ? " success\n"
                                                 : " failure\n");
  });
  return reports;
}

AttackReport rerun_oneshot_trial(const ExperimentConfig& cfg, int trial) {
  OneshotContext ctx = make_oneshot_context(cfg);
  return oneshot_trial(ctx, trial);
}

namespace {

struct End2EndContext {
  const ExperimentConfig& cfg;
  Dataset train_set;
  Dataset test_set;
  Model warm;                   // warm-start weights
  double stop_threshold = 0.0;
  std::vector<int> clean_target_pool;  // correctly classified test targets
};

struct TrialSpec {
  int n_poisons = 1;
  double gamma = 0.0;
  int trial = 0;
  bool single_base = false;
  bool optimize = true;
  int target_index = -1;  // index into test_set; -1 = seeded random pick
  std::string id_prefix = "end2end";
};

End2EndContext make_end2end_context(const ExperimentConfig& cfg) {
  if (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path))
    throw std::runtime_error("end2end: warm-start checkpoint '" + cfg.checkpoint_path +
                             "' not found; run the `pretrain` subcommand first");
  End2EndContext ctx{cfg, load_train_set(cfg), load_test_set(cfg), Model{}, 0.0, {}};
  ctx.warm = make_model(cfg, Rng(cfg.master_seed).fork(1).seed());
  load_checkpoint_file(ctx.warm, cfg.checkpoint_path);
  ctx.stop_threshold =
      cfg.stop_threshold_scale * compute_stop_threshold(ctx.warm, ctx.train_set.batch());

  const auto pool = ctx.test_set.indices_of_class(cfg.target_class);
  if (pool.empty()) throw std::runtime_error("end2end: no test instances of the target class");
  const Tensor logits = ctx.warm.logits(ctx.test_set.batch(pool));
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (argmax_row(logits, static_cast<int>(i)) == cfg.target_class)
      ctx.clean_target_pool.push_back(pool[i]);
  if (ctx.clean_target_pool.empty())
    throw std::runtime_error("end2end: warm model classifies no target-class test instance correctly");
  return ctx;
}

AttackReport end2end_trial(const End2EndContext& ctx, const TrialSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig& cfg = ctx.cfg;
  const std::uint64_t tstream = 200 + static_cast<std::uint64_t>(spec.trial);

  int target_index = spec.target_index;
  if (target_index < 0) {
    Rng trng = Rng(cfg.master_seed).fork(tstream);
    target_index =
        ctx.clean_target_pool[trng.uniform_int(ctx.clean_target_pool.size())];
  }
  const LabeledImage& target = ctx.test_set.images[static_cast<std::size_t>(target_index)];

  const std::uint64_t base_seed = Rng(cfg.master_seed).fork(300 + static_cast<std::uint64_t>(spec.trial)).seed();
  std::vector<LabeledImage> base_images =
      sample_bases(ctx.test_set, cfg.base_class, spec.single_base ? 1 : spec.n_poisons, base_seed);
  if (spec.single_base)
    base_images.assign(static_cast<std::size_t>(spec.n_poisons), base_images[0]);

  std::vector<Tensor> bases;
  std::vector<std::string> base_ids;
  for (const auto& b : base_images) {
    bases.push_back(b.pixels);
    base_ids.push_back(b.source_id);
  }

  PoisonConfig pc = cfg.poison;
  if (!pc.stop_threshold) pc.stop_threshold = ctx.stop_threshold;

  std::vector<PoisonResult> poisons;
  if (spec.optimize) {
    poisons = craft_poison_set(ctx.warm, target.pixels, bases, pc, spec.gamma,
                               /*parallelism=*/1);
  } else {
    // Watermarked bases injected directly.
    poisons.resize(bases.size());
    for (std::size_t i = 0; i < bases.size(); ++i) {
      poisons[i].image = watermark_blend(bases[i], target.pixels, spec.gamma);
      const Tensor fp = ctx.warm.features(as_batch1(poisons[i].image));
      const Tensor ft = ctx.warm.features(as_batch1(target.pixels));
      double s = 0.0;
      for (std::size_t d = 0; d < fp.size(); ++d) {
        const double diff = fp[d] - ft[d];
        s += diff * diff;
      }
      poisons[i].feature_distance = std::sqrt(s);
      poisons[i].stop_reason = PoisonResult::StopReason::MaxIters;
    }
  }

  Dataset poisoned_set = ctx.train_set;
  for (std::size_t i = 0; i < poisons.size(); ++i)
    poisoned_set.images.push_back({poisons[i].image, cfg.base_class,
                                   "poison:" + std::to_string(spec.trial) + ":" + std::to_string(i)});

  TrainConfig tc = cfg.retrain;
  tc.batch_size = std::min<int>(tc.batch_size, static_cast<int>(poisoned_set.size()));
  tc.shuffle_seed = Rng(cfg.master_seed).fork(400 + static_cast<std::uint64_t>(spec.trial)).seed();

  Model poisoned_model = ctx.warm;
  poisoned_model.unfreeze_all();
  const TrainResult ptr = train(poisoned_model, poisoned_set, tc);

  Model clean_model = ctx.warm;
  clean_model.unfreeze_all();
  TrainConfig ctc = tc;
  ctc.batch_size = std::min<int>(cfg.retrain.batch_size, static_cast<int>(ctx.train_set.size()));
  train(clean_model, ctx.train_set, ctc);

  const SuccessCheck sc = attack_success(poisoned_model, target.pixels, cfg.base_class);

  AttackReport r;
  r.experiment_id = spec.id_prefix + ":" + std::to_string(spec.n_poisons) + ":" +
                    std::to_string(spec.trial);
  r.scenario = "end2end";
  r.target_class = cfg.target_class;
  r.base_class = cfg.base_class;
  r.target_id = target.source_id;
  r.base_ids = std::move(base_ids);
  r.n_poisons = spec.n_poisons;
  r.gamma = spec.gamma;
  r.success = sc.success;
  r.predicted_class = sc.predicted_class;
  r.confidence = sc.confidence;
  r.angular_deviation_deg =
      angular_deviation(decision_normal(clean_model, cfg.target_class, cfg.base_class),
                        decision_normal(poisoned_model, cfg.target_class, cfg.base_class));
  r.clean_test_accuracy = evaluate(clean_model, ctx.test_set).accuracy;
  r.poisoned_test_accuracy = evaluate(poisoned_model, ctx.test_set).accuracy;
  for (const auto& p : poisons) {
    r.feature_distances.push_back(p.feature_distance);
    r.stop_reasons.push_back(p.failed ? "failed"
                             : p.stop_reason == PoisonResult::StopReason::Threshold ? "threshold"
                                                                                    : "max_iters");
    if (p.failed) r.warnings.push_back("craft failed: " + p.error);
  }
  r.retrain_final_loss = ptr.final_loss();
  r.retrain_final_accuracy = ptr.final_acc();
  r.seed = Rng(cfg.master_seed).fork(tstream).seed();
  r.config_hash = config_hash(cfg);
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace

std::vector<AttackReport> run_end2end(const ExperimentConfig& cfg) {
  End2EndContext ctx = make_end2end_context(cfg);
  const int trials = cfg.smoke ? std::max(1, cfg.n_trials / 2) : cfg.n_trials;

  std::vector<TrialSpec> specs;
  for (int n : cfg.n_poisons_sweep)
    for (int t = 0; t < trials; ++t) {
      TrialSpec s;
      s.n_poisons = n;
      s.gamma = cfg.gamma;
      s.trial = t;
      specs.push_back(s);
    }

  std::vector<AttackReport> reports(specs.size());
  parallel_for(static_cast<int>(specs.size()), effective_jobs(cfg), [&](int i) {
    reports[static_cast<std::size_t>(i)] = end2end_trial(ctx, specs[static_cast<std::size_t>(i)]);
    std::cerr << "[end2end] " << reports[static_cast<std::size_t>(i)].experiment_id
              << (reports[static_cast<std::size_t>(i)].success ? " success\n" : " failure\n");
  });
  return reports;
}

AttackReport rerun_end2end_trial(const ExperimentConfig& cfg, int n_poisons, double gamma,
                                 int trial) {
  End2EndContext ctx = make_end2end_context(cfg);
  TrialSpec s;
  s.n_poisons = n_poisons;
  s.gamma = gamma;
  s.trial = trial;
  return end2end_trial(ctx, s);
}

std::vector<AttackReport> run_outlier_campaign(const ExperimentConfig& cfg) {
  End2EndContext ctx = make_end2end_context(cfg);
  const int k = cfg.smoke ? std::max(1, cfg.outlier_k / 2) : cfg.outlier_k;

  const OutlierSelection sel =
      select_outlier_targets(ctx.warm, ctx.test_set, cfg.target_class, k);
  // Map chosen outliers back to test-set indices via source ids.
  std::vector<int> outlier_idx;
  for (const auto& im : sel.targets)
    for (std::size_t i = 0; i < ctx.test_set.images.size(); ++i)
      if (ctx.test_set.images[i].source_id == im.source_id) {
        outlier_idx.push_back(static_cast<int>(i));
        break;
      }

  const int arms = static_cast<int>(outlier_idx.size());
  std::vector<TrialSpec> specs;
  for (int t = 0; t < arms; ++t) {
    TrialSpec s;
    s.n_poisons = cfg.n_poisons;
    s.gamma = cfg.gamma;
    s.trial = t;
    s.target_index = outlier_idx[static_cast<std::size_t>(t)];
    s.id_prefix = "outlier";
    specs.push_back(s);
  }
  // Control arm: random correctly-classified targets, same base seeds.
  for (int t = 0; t < arms; ++t) {
    TrialSpec s;
    s.n_poisons = cfg.n_poisons;
    s.gamma = cfg.gamma;
    s.trial = t;
    s.target_index = -1;
    s.id_prefix = "random";
    specs.push_back(s);
  }

  std::vector<AttackReport> reports(specs.size());
  parallel_for(static_cast<int>(specs.size()), effective_jobs(cfg), [&](int i) {
    reports[static_cast<std::size_t>(i)] = end2end_trial(ctx, specs[static_cast<std::size_t>(i)]);
    std::cerr << "[outliers] " << reports[static_cast<std::size_t>(i)].experiment_id
              << (reports[static_cast<std::size_t>(i)].success ? " success\n" : " failure\n");
  });
  return reports;
}

std::vector<AttackReport> run_ablation(const ExperimentConfig& cfg) {
  End2EndContext ctx = make_end2end_context(cfg);
  const int trials = cfg.smoke ? std::max(1, cfg.n_trials / 2) : cfg.n_trials;

  struct Arm {
    const char* name;
    bool single_base;
    bool optimize;
    bool watermark;
  };
  const Arm arms[] = {
      {"full", false, true, true},
      {"single-base", true, true, true},
      {"no-opt", false, false, true},
      {"no-watermark", false, true, false},
  };

  std::vector<TrialSpec> specs;
  for (const Arm& arm : arms)
    for (int t = 0; t < trials; ++t) {
      TrialSpec s;
      s.n_poisons = cfg.n_poisons;
      s.gamma = arm.watermark ? cfg.gamma : 0.0;
      s.trial = t;  // shared streams isolate the ablated technique
      s.single_base = arm.single_base;
      s.optimize = arm.optimize;
      s.id_prefix = std::string("ablation:") + arm.name;
      specs.push_back(s);
    }

  std::vector<AttackReport> reports(specs.size());
  parallel_for(static_cast<int>(specs.size()), effective_jobs(cfg), [&](int i) {
    reports[static_cast<std::size_t>(i)] = end2end_trial(ctx, specs[static_cast<std::size_t>(i)]);
    std::cerr << "[ablation] " << reports[static_cast<std::size_t>(i)].experiment_id
              << (reports[static_cast<std::size_t>(i)].success ? " success\n" : " failure\n");
  });
  return reports;
}

double success_rate(const std::vector<AttackReport>& reports) {
  if (reports.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : reports) s += r.success ? 1.0 : 0.0;
  return s / static_cast<double>(reports.size());
}

}  // namespace fclab
