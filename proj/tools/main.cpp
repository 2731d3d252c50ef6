#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "seibw/backprop.hpp"
#include "seibw/binfer.hpp"
#include "seibw/ensemble.hpp"
#include "seibw/serialize.hpp"
#include "seibw/trainer.hpp"
#include "json.hpp"

using namespace seibw;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerificationFailed = 1;
constexpr int kExitInputError = 2;

struct GlobalOpts {
  std::string config_path;
  std::string out_dir = "runs/out";
  std::string data_dir;
  std::int64_t seed = -1;  // -1 = from config
  int threads = 0;
  std::string precision = "single";
  std::map<std::string, std::string> overrides;
};

std::string resolve_data_dir(const GlobalOpts& g) {
  if (!g.data_dir.empty()) return g.data_dir;
  if (const char* env = std::getenv("SEIB_DATA_DIR")) return env;
  return "data";
}

Config load_config(const GlobalOpts& g) {
  Config cfg;
  if (!g.config_path.empty()) cfg = Config::from_file(g.config_path);
  for (const auto& [k, v] : g.overrides) cfg.set(k, v);
  if (g.seed >= 0) cfg.set("seed", std::to_string(g.seed));
  return cfg;
}

// Dataset selection keys live beside the plan keys in the same config file.
std::set<std::string> cli_config_keys() {
  std::set<std::string> keys = plan_config_keys();
  keys.insert("data.kind");
  keys.insert("data.path");
  keys.insert("data.synth_train");
  keys.insert("data.synth_test");
  return keys;
}

struct LoadedData {
  DatasetT<float> train;
  DatasetT<float> test;
};

LoadedData load_data(const Config& cfg, const TrainPlan& plan, const std::string& data_dir) {
  const std::string kind = cfg.get_string("data.kind", "synthetic");
  LoadedData d;
  if (kind == "mnist") {
    const std::string dir = data_dir + "/" + cfg.get_string("data.path", "mnist");
    d.train = load_mnist(dir, true);
    d.test = load_mnist(dir, false);
  } else if (kind == "cifar10") {
    const std::string dir = data_dir + "/" + cfg.get_string("data.path", "cifar10");
    d.train = load_cifar10_bin(dir + "/train");
    d.test = load_cifar10_bin(dir + "/test");
  } else if (kind == "container") {
    const std::string base = cfg.get_string("data.path", "");
    SEIBW_CHECK_VALUE(!base.empty(), "data.kind=container requires data.path");
    d.train = load_tensor_dataset(data_dir + "/" + base + "-train.seib");
    d.test = load_tensor_dataset(data_dir + "/" + base + "-test.seib");
  } else if (kind == "synthetic") {
    const std::size_t n_train = cfg.get_int("data.synth_train", 512);
    const std::size_t n_test = cfg.get_int("data.synth_test", 256);
    const auto& in = plan.arch.input_shape;
    SEIBW_CHECK_VALUE(in.size() == 3, "synthetic data requires a [C,H,W] model input");
    Rng rng(plan.seed + 0x5EEDull);
    d.train = make_synthetic_images<float>(n_train, plan.arch.num_classes, in[0], in[1], in[2],
                                           rng);
    d.test =
        make_synthetic_images<float>(n_test, plan.arch.num_classes, in[0], in[1], in[2], rng);
  } else {
    throw ValueError("unknown data.kind: " + kind);
  }

  if (plan.max_train_samples > 0 && plan.max_train_samples < d.train.size()) {
    auto [subset, rest] = split_dataset(
        d.train, 1.0 - static_cast<double>(plan.max_train_samples) / d.train.size(), plan.seed);
    // split_dataset floors the fraction; trim to the exact count.
    if (subset.size() > plan.max_train_samples) {
      const std::size_t per = subset.samples.numel() / subset.size();
      std::vector<std::size_t> shape = subset.samples.shape();
      shape[0] = plan.max_train_samples;
      DatasetT<float> trimmed;
      trimmed.samples = TensorT<float>(shape);
      std::copy(subset.samples.data(), subset.samples.data() + plan.max_train_samples * per,
                trimmed.samples.data());
      trimmed.labels.assign(subset.labels.begin(),
                            subset.labels.begin() + plan.max_train_samples);
      trimmed.num_classes = subset.num_classes;
      subset = std::move(trimmed);
    }
    d.train = std::move(subset);
  }

  normalize(d.train);
  apply_normalization(d.test, d.train.norm_mean, d.train.norm_std);
  return d;
}

// Builds the eval dataset for a trained checkpoint, normalized with the
// stats the checkpoint carries.
DatasetT<float> load_eval_data(const Config& cfg, const TrainPlan& plan,
                               const std::string& data_dir,
                               const CheckpointMeta<float>& meta, bool train_split = false) {
  const std::string kind = cfg.get_string("data.kind", "synthetic");
  DatasetT<float> ds;
  if (kind == "mnist") {
    const std::string dir = data_dir + "/" + cfg.get_string("data.path", "mnist");
    ds = load_mnist(dir, train_split);
  } else if (kind == "cifar10") {
    const std::string dir = data_dir + "/" + cfg.get_string("data.path", "cifar10");
    ds = load_cifar10_bin(dir + (train_split ? "/train" : "/test"));
  } else if (kind == "container") {
    const std::string base = cfg.get_string("data.path", "");
    ds = load_tensor_dataset(data_dir + "/" + base + (train_split ? "-train.seib" : "-test.seib"));
  } else if (kind == "synthetic") {
    const std::size_t n_train = cfg.get_int("data.synth_train", 512);
    const std::size_t n_test = cfg.get_int("data.synth_test", 256);
    const auto& in = plan.arch.input_shape;
    Rng rng(plan.seed + 0x5EEDull);
    auto train = make_synthetic_images<float>(n_train, plan.arch.num_classes, in[0], in[1],
                                              in[2], rng);
    auto test =
        make_synthetic_images<float>(n_test, plan.arch.num_classes, in[0], in[1], in[2], rng);
    ds = train_split ? std::move(train) : std::move(test);
  } else {
    throw ValueError("unknown data.kind: " + kind);
  }
  if (!meta.norm_mean.empty()) {
    apply_normalization(ds, meta.norm_mean, meta.norm_std);
  } else {
    normalize(ds);
  }
  return ds;
}

// Loads checkpoint + its plan echo (the echo also names the dataset).
struct LoadedCheckpoint {
  Network<float> net;
  CheckpointMeta<float> meta;
  Config cfg;
  TrainPlan plan;
};

LoadedCheckpoint open_checkpoint(const std::string& path) {
  LoadedCheckpoint lc;
  lc.net = network_from_checkpoint(path, &lc.meta);
  for (const auto& [k, v] : lc.meta.plan_echo) lc.cfg.set(k, v);
  Config plan_cfg;
  for (const auto& [k, v] : lc.meta.plan_echo)
    if (plan_config_keys().count(k)) plan_cfg.set(k, v);
  lc.plan = plan_from_config(plan_cfg);
  return lc;
}

TensorT<float> batch_from_dataset(const DatasetT<float>& ds, std::size_t horizon,
                                  std::size_t max_samples) {
  const std::size_t n = std::min(max_samples, ds.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return assemble_batch(ds, idx, horizon, nullptr, nullptr);
}

template <class T>
DatasetT<T> cast_dataset(const DatasetT<float>& ds) {
  DatasetT<T> out;
  out.samples = ds.samples.template cast<T>();
  out.temporal = ds.temporal;
  out.labels = ds.labels;
  out.num_classes = ds.num_classes;
  out.norm_mean.assign(ds.norm_mean.begin(), ds.norm_mean.end());
  out.norm_std.assign(ds.norm_std.begin(), ds.norm_std.end());
  return out;
}

template <class T>
int run_train_both(const TrainPlan& plan, const LoadedData& data, const std::string& out_dir) {
  DatasetT<T> train = cast_dataset<T>(data.train);
  DatasetT<T> test = cast_dataset<T>(data.test);
  auto outcome = run_two_stage(plan, train, test, out_dir);
  std::cout << "train stage=1 test_accuracy=" << outcome.stage1.test_accuracy << "\n";
  std::cout << "train stage=2 test_accuracy=" << outcome.stage2.test_accuracy << "\n";
  return kExitOk;
}

int cmd_train(const GlobalOpts& g, const std::string& stage, const std::string& resume,
              const std::string& init_from) {
  Config cfg = load_config(g);
  cfg.check_known(cli_config_keys());
  Config plan_cfg;
  for (const auto& [k, v] : cfg.entries())
    if (plan_config_keys().count(k)) plan_cfg.set(k, v);
  TrainPlan plan = plan_from_config(plan_cfg);
  // Keep the full entry set (including data.*) in checkpoints.
  plan.echo = cfg.entries();

  LoadedData data = load_data(cfg, plan, resolve_data_dir(g));
  std::filesystem::create_directories(g.out_dir);

  if (stage == "both") {
    SEIBW_CHECK_VALUE(resume.empty(), "--resume applies to single-stage runs; use --stage");
    if (g.precision == "double") return run_train_both<double>(plan, data, g.out_dir);
    return run_train_both<float>(plan, data, g.out_dir);
  }

  const int stage_index = stage == "1" ? 1 : 2;
  Rng rng(plan.seed);
  const StagePlan& sp = stage_index == 1 ? plan.stage1 : plan.stage2;
  Network<float> net = build_network<float>(plan.arch, sp.horizon, plan.lif,
                                            WeightMode::full_precision, rng);
  TeacherProbsT<float> teacher;
  const TeacherProbsT<float>* teacher_ptr = nullptr;
  if (stage_index == 2) {
    SEIBW_CHECK_VALUE(!init_from.empty() || !resume.empty(),
                      "--stage 2 requires --init <stage1.ckpt> (or --resume)");
    if (!init_from.empty()) load_checkpoint<float>(init_from, net, nullptr);
    set_weight_mode(net, WeightMode::binary);
    if (plan.stage2.loss != LossKind::tet_ce) {
      if (plan.teacher == TeacherKind::file) {
        teacher = load_teacher_probs<float>(plan.teacher_path);
      } else {
        SEIBW_CHECK_VALUE(!init_from.empty(),
                          "stage-1 self-teacher needs --init <stage1.ckpt>");
        Rng trng(plan.seed);
        Network<float> tnet = build_network<float>(plan.arch, plan.stage1.horizon, plan.lif,
                                                   WeightMode::full_precision, trng);
        load_checkpoint<float>(init_from, tnet, nullptr);
        export_teacher_probs(tnet, data.train, plan.stage2.batch_size,
                             g.out_dir + "/teacher_probs.seib");
        teacher = load_teacher_probs<float>(g.out_dir + "/teacher_probs.seib");
      }
      teacher_ptr = &teacher;
    }
  }
  auto outcome =
      run_stage<float>(plan, stage_index, net, data.train, data.test, g.out_dir, teacher_ptr,
                       resume);
  write_metrics_csv(outcome.metrics, g.out_dir + "/metrics.csv");
  std::cout << "train stage=" << stage_index << " test_accuracy=" << outcome.test_accuracy
            << "\n";
  return kExitOk;
}

int cmd_eval(const GlobalOpts& g, const std::string& ckpt) {
  auto lc = open_checkpoint(ckpt);
  auto ds = load_eval_data(lc.cfg, lc.plan, resolve_data_dir(g), lc.meta);
  const double acc = evaluate_accuracy(lc.net, ds, 64);
  std::cout << "eval samples=" << ds.size() << " accuracy=" << acc << "\n";
  return kExitOk;
}

int cmd_grad_check(const GlobalOpts& g, bool corrupt) {
  Config cfg = load_config(g);
  cfg.check_known(cli_config_keys());
  Config plan_cfg;
  for (const auto& [k, v] : cfg.entries())
    if (plan_config_keys().count(k)) plan_cfg.set(k, v);
  if (!plan_cfg.has("model.kind")) {
    plan_cfg.set("model.kind", "mlp");
    plan_cfg.set("model.hidden", "16,12");
    plan_cfg.set("model.input", "1,4,4");
    plan_cfg.set("model.classes", "4");
    plan_cfg.set("teacher.kind", "none");
    plan_cfg.set("stage2.loss", "tet_ce");
  }
  TrainPlan plan = plan_from_config(plan_cfg);

  // Always double precision here: the 1e-4 comparison needs it.
  Rng rng(plan.seed);
  auto net = build_network<double>(plan.arch, std::min<std::size_t>(plan.stage1.horizon, 4),
                                   plan.lif, WeightMode::full_precision, rng);
  const std::size_t batch = 4;
  std::vector<std::size_t> in_shape = {net.horizon, batch};
  for (auto d : plan.arch.input_shape) in_shape.push_back(d);
  DTensor input(in_shape);
  for (std::size_t i = 0; i < input.numel(); ++i) input[i] = rng.uniform(-1.5, 1.5);
  std::vector<std::int32_t> labels(batch);
  for (std::size_t b = 0; b < batch; ++b)
    labels[b] = static_cast<std::int32_t>(rng.uniform_index(plan.arch.num_classes));

  auto result = relaxed_gradient_check(net, input, labels, 1e-4, 100, rng, corrupt);
  std::cout << "grad_check max_rel_err=" << result.max_rel_err << " sampled=" << result.sampled
            << " skipped_kinks=" << result.skipped_kinks << "\n";
  if (result.max_rel_err >= 1e-4 || result.sampled == 0) {
    std::cerr << "gradient check failed: max relative error above 1e-4\n";
    return kExitVerificationFailed;
  }
  return kExitOk;
}

int cmd_compare_grads(const GlobalOpts& g, const std::string& ckpt, std::size_t samples) {
  std::filesystem::create_directories(g.out_dir);
  const std::string csv = g.out_dir + "/gradient_alignment.csv";

  Network<float> net;
  Config cfg;
  TrainPlan plan;
  CheckpointMeta<float> meta;
  if (!ckpt.empty()) {
    auto lc = open_checkpoint(ckpt);
    net = std::move(lc.net);
    cfg = lc.cfg;
    plan = lc.plan;
    meta = lc.meta;
  } else {
    cfg = load_config(g);
    cfg.check_known(cli_config_keys());
    Config plan_cfg;
    for (const auto& [k, v] : cfg.entries())
      if (plan_config_keys().count(k)) plan_cfg.set(k, v);
    if (!plan_cfg.has("model.kind")) {
      plan_cfg.set("model.kind", "mlp");
      plan_cfg.set("model.hidden", "24,16");
      plan_cfg.set("model.input", "1,6,6");
      plan_cfg.set("model.classes", "4");
      plan_cfg.set("teacher.kind", "none");
      plan_cfg.set("stage2.loss", "tet_ce");
      plan_cfg.set("stage1.t", "6");
    }
    plan = plan_from_config(plan_cfg);
    Rng rng(plan.seed);
    net = build_network<float>(plan.arch, plan.stage1.horizon, plan.lif,
                               WeightMode::full_precision, rng);
  }

  auto ds = load_eval_data(cfg, plan, resolve_data_dir(g), meta, /*train_split=*/false);
  auto input = batch_from_dataset(ds, net.horizon, samples);
  std::vector<std::int32_t> labels(input.dim(1));
  for (std::size_t b = 0; b < labels.size(); ++b) labels[b] = ds.labels[b];

  auto logits = net.forward(input, Phase::train);
  auto loss = tet_ce_loss(logits, labels);
  auto report = compare_gradients(net, loss.grad);
  write_gradient_csv(report, csv, plan.seed);

  bool all_positive = true;
  for (const auto& d : report.diagnostics) {
    std::cout << "compare_grads layer=" << d.layer << " cosine=" << d.cosine
              << " norm_ratio=" << d.norm_ratio << "\n";
    if (!(d.cosine > 0)) all_positive = false;
  }
  std::cout << "compare_grads csv=" << csv << "\n";
  return all_positive ? kExitOk : kExitVerificationFailed;
}

int cmd_ensemble_report(const GlobalOpts& g, const std::string& ckpt, std::size_t samples) {
  auto lc = open_checkpoint(ckpt);
  auto ds = load_eval_data(lc.cfg, lc.plan, resolve_data_dir(g), lc.meta);
  auto input = batch_from_dataset(ds, lc.net.horizon, samples);
  std::vector<std::int32_t> labels(input.dim(1));
  for (std::size_t b = 0; b < labels.size(); ++b) labels[b] = ds.labels[b];

  auto result = ensemble_report(lc.net, input, labels);
  std::filesystem::create_directories(g.out_dir);
  const std::string csv = g.out_dir + "/members.csv";
  write_member_csv(result, csv);
  for (const auto& m : result.members)
    std::cout << "member index=" << m.index << " accuracy=" << m.accuracy << "\n";
  std::cout << "ensemble accuracy=" << result.ensemble_accuracy << " csv=" << csv << "\n";
  return kExitOk;
}

int cmd_pack(const GlobalOpts& g, const std::string& ckpt) {
  auto lc = open_checkpoint(ckpt);
  nlohmann::json layers = nlohmann::json::array();
  std::size_t packed_count = 0;
  for (auto& [name, p] : lc.net.named_params()) {
    if (p->mode != WeightMode::binary) continue;
    auto packed = pack_layer(*p);
    ++packed_count;
    bool invariants_ok = true;
    for (std::size_t o = 0; o < packed.n_out; ++o) {
      std::size_t covered = 0;
      for (std::size_t w = 0; w < packed.words_per_row; ++w) {
        if ((packed.pos_row(o)[w] & packed.neg_row(o)[w]) != 0) invariants_ok = false;
        covered += __builtin_popcountll(packed.pos_row(o)[w] | packed.neg_row(o)[w]);
      }
      if (covered != packed.fan_in) invariants_ok = false;
    }
    layers.push_back({{"layer", name},
                      {"fan_in", packed.fan_in},
                      {"outputs", packed.n_out},
                      {"words_per_row", packed.words_per_row},
                      {"scale_a", packed.scale_a},
                      {"invariants_ok", invariants_ok}});
  }
  SEIBW_CHECK_VALUE(packed_count > 0, "pack: checkpoint has no binary layers");

  std::filesystem::create_directories(g.out_dir);
  const std::string path = g.out_dir + "/pack_report.json";
  std::ofstream f(path, std::ios::trunc);
  f << nlohmann::json{{"checkpoint", ckpt}, {"layers", layers}}.dump(2) << "\n";
  std::cout << "pack layers=" << packed_count << " report=" << path << "\n";
  return kExitOk;
}

int cmd_infer(const GlobalOpts& g, const std::string& ckpt, std::size_t samples) {
  auto lc = open_checkpoint(ckpt);
  auto ds = load_eval_data(lc.cfg, lc.plan, resolve_data_dir(g), lc.meta);
  auto input = batch_from_dataset(ds, lc.net.horizon, samples);

  InferBenchmark bench;
  auto preds = infer_packed(lc.net, input, &bench);

  std::filesystem::create_directories(g.out_dir);
  write_predictions_csv(preds, g.out_dir + "/predictions.csv");
  write_benchmark_json(bench, g.out_dir + "/benchmark.json");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == static_cast<std::size_t>(ds.labels[i])) ++correct;
  std::cout << "infer samples=" << preds.size()
            << " accuracy=" << static_cast<double>(correct) / preds.size()
            << " packed_sps=" << bench.packed_samples_per_s
            << " float_sps=" << bench.float_samples_per_s << "\n";
  return kExitOk;
}

int cmd_export_teacher(const GlobalOpts& g, const std::string& ckpt, const std::string& split) {
  auto lc = open_checkpoint(ckpt);
  auto ds = load_eval_data(lc.cfg, lc.plan, resolve_data_dir(g), lc.meta, split == "train");
  std::filesystem::create_directories(g.out_dir);
  const std::string path = g.out_dir + "/teacher_probs.seib";
  export_teacher_probs(lc.net, ds, 64, path);
  std::cout << "export_teacher samples=" << ds.size() << " file=" << path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary-weight spiking network training and verification"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--out", g.out_dir, "output directory");
  app.add_option("--data-dir", g.data_dir, "dataset root (default $SEIB_DATA_DIR or ./data)");
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--threads", g.threads, "worker threads (0 = hardware)");
  app.add_option("--precision", g.precision, "single|double")
      ->check(CLI::IsMember({"single", "double"}));

  // Every plan/data key doubles as a dotted CLI override; unknown flags stay
  // hard errors. The dedicated --seed flag already covers the "seed" key.
  for (const auto& key : cli_config_keys()) {
    if (key == "seed") continue;
    app.add_option_function<std::string>(
        "--" + key, [&g, key](const std::string& v) { g.overrides[key] = v; });
  }

  std::string stage = "both", resume, init_from, ckpt, split = "train";
  std::size_t samples = 1000;
  bool corrupt = false;

  auto* train = app.add_subcommand("train", "two-stage training run");
  train->add_option("--stage", stage, "both|1|2")->check(CLI::IsMember({"both", "1", "2"}));
  train->add_option("--resume", resume, "checkpoint to resume from");
  train->add_option("--init", init_from, "stage-1 checkpoint initializing stage 2");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint path")->required();

  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient verification");
  grad->add_flag("--corrupt-backward", corrupt,
                 "negative-control hook: perturb one analytic gradient");

  auto* cmp = app.add_subcommand("compare-grads", "per-layer engine comparison CSV");
  cmp->add_option("--ckpt", ckpt, "checkpoint path (random net when absent)");
  cmp->add_option("--samples", samples, "batch size for the comparison");

  auto* ens = app.add_subcommand("ensemble-report", "per-member accuracy table");
  ens->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ens->add_option("--samples", samples, "samples to evaluate");

  auto* pack = app.add_subcommand("pack", "pack binary layers, emit report");
  pack->add_option("--ckpt", ckpt, "checkpoint path")->required();

  auto* infer = app.add_subcommand("infer", "bit-packed inference + benchmark");
  infer->add_option("--ckpt", ckpt, "checkpoint path")->required();
  infer->add_option("--samples", samples, "samples to run");

  auto* teach = app.add_subcommand("export-teacher", "write teacher probability file");
  teach->add_option("--ckpt", ckpt, "checkpoint path")->required();
  teach->add_option("--split", split, "train|test")->check(CLI::IsMember({"train", "test"}));

  // Global flags may appear after the subcommand name.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitInputError;
  }
  set_num_threads(g.threads);

  try {
    if (train->parsed()) return cmd_train(g, stage, resume, init_from);
    if (eval->parsed()) return cmd_eval(g, ckpt);
    if (grad->parsed()) return cmd_grad_check(g, corrupt);
    if (cmp->parsed()) return cmd_compare_grads(g, ckpt, samples);
    if (ens->parsed()) return cmd_ensemble_report(g, ckpt, samples);
    if (pack->parsed()) return cmd_pack(g, ckpt);
    if (infer->parsed()) return cmd_infer(g, ckpt, samples);
    if (teach->parsed()) return cmd_export_teacher(g, ckpt, split);
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const ValueError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitVerificationFailed;
  }
  return kExitInputError;
}
