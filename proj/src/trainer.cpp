#include "seibw/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "seibw/serialize.hpp"

namespace seibw {

template <class T>
std::vector<ParamView<T>> collect_param_views(Network<T>& net) {
  std::vector<ParamView<T>> views;
  for (auto& [name, p] : net.named_params()) {
    ParamView<T> w;
    w.name = name + ".w_real";
    w.value = &p->w_real;
    w.grad = &p->grad_w;
    w.owner = p;
    w.apply_decay = true;
    w.clip_ste = p->mode == WeightMode::binary;
    views.push_back(w);
    if (!p->bias.empty()) {
      ParamView<T> b;
      b.name = name + ".bias";
      b.value = &p->bias;
      b.grad = &p->grad_bias;
      b.owner = p;
      views.push_back(b);
    }
    if (p->sws.enabled) {
      ParamView<T> g;
      g.name = name + ".sws_gain";
      g.value = &p->sws_gain;
      g.grad = &p->grad_gain;
      g.owner = p;
      views.push_back(g);
    }
  }
  for (auto& [name, bn] : net.named_bns()) {
    views.push_back({name + ".gamma", &bn->gamma, &bn->grad_gamma, nullptr, false, false});
    views.push_back({name + ".beta", &bn->beta, &bn->grad_beta, nullptr, false, false});
  }
  return views;
}

template <class T>
void OptimizerStateT<T>::init(const std::vector<ParamView<T>>& views) {
  step_count = 0;
  m0.clear();
  m1.clear();
  for (const auto& v : views) m0.emplace_back(v.value->shape());
  if (config.kind == OptimizerKind::adam)
    for (const auto& v : views) m1.emplace_back(v.value->shape());
}

double cosine_lr(double base_lr, std::size_t epoch, std::size_t total_epochs) {
  SEIBW_CHECK_VALUE(total_epochs >= 1 && epoch <= total_epochs, "cosine_lr: epoch out of range");
  return base_lr * 0.5 *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(epoch) /
                         static_cast<double>(total_epochs)));
}

template <class T>
void step(OptimizerStateT<T>& opt, std::vector<ParamView<T>>& views, double lr,
          double weight_decay) {
  SEIBW_CHECK(opt.m0.size() == views.size(), "optimizer: state/view count mismatch");
  ++opt.step_count;
  const double b1 = opt.config.beta1, b2 = opt.config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step_count));

  for (std::size_t vi = 0; vi < views.size(); ++vi) {
    ParamView<T>& view = views[vi];
    TensorT<T>& w = *view.value;
    const TensorT<T>& g = *view.grad;
    SEIBW_CHECK_DIM(w.same_shape(g), "optimizer: gradient shape mismatch for " + view.name);

    if (weight_decay != 0.0 && view.apply_decay)
      for (std::size_t i = 0; i < w.numel(); ++i)
        w[i] -= static_cast<T>(lr * weight_decay * static_cast<double>(w[i]));

    if (opt.config.kind == OptimizerKind::sgd_momentum) {
      TensorT<T>& buf = opt.m0[vi];
      const T mom = static_cast<T>(opt.config.momentum);
      for (std::size_t i = 0; i < w.numel(); ++i) {
        buf[i] = mom * buf[i] + g[i];
        w[i] -= static_cast<T>(lr) * buf[i];
      }
    } else {
      TensorT<T>& m = opt.m0[vi];
      TensorT<T>& v = opt.m1[vi];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi2 = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi2);
        const double mhat = mi / bc1;
        const double vhat = vi2 / bc2;
        w[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + opt.config.epsilon));
      }
    }

    if (view.clip_ste)
      for (std::size_t i = 0; i < w.numel(); ++i)
        w[i] = std::min(T(1.5), std::max(T(-1.5), w[i]));
  }

  // Refresh each layer's derived weights once.
  std::set<LayerParams<T>*> owners;
  for (auto& v : views)
    if (v.owner) owners.insert(v.owner);
  for (auto* p : owners) p->refresh();
}

// --- plan parsing ---

namespace {

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ValueError("unknown optimizer: " + s);
}

LossKind parse_loss(const std::string& s) {
  if (s == "tet_ce") return LossKind::tet_ce;
  if (s == "kl_distill") return LossKind::kl_distill;
  if (s == "combined") return LossKind::combined;
  throw ValueError("unknown loss kind: " + s);
}

StagePlan parse_stage(const Config& cfg, const std::string& prefix, const StagePlan& defaults) {
  StagePlan sp = defaults;
  sp.epochs = static_cast<std::size_t>(cfg.get_int(prefix + ".epochs", sp.epochs));
  sp.optimizer = parse_optimizer(
      cfg.get_string(prefix + ".optimizer",
                     sp.optimizer == OptimizerKind::adam ? "adam" : "sgd"));
  sp.lr = cfg.get_double(prefix + ".lr", sp.lr);
  sp.weight_decay = cfg.get_double(prefix + ".weight_decay", sp.weight_decay);
  sp.horizon = static_cast<std::size_t>(cfg.get_int(prefix + ".t", sp.horizon));
  sp.batch_size = static_cast<std::size_t>(cfg.get_int(prefix + ".batch_size", sp.batch_size));
  sp.loss = parse_loss(cfg.get_string(prefix + ".loss", prefix == "stage1" ? "tet_ce" : "combined"));
  return sp;
}

}  // namespace

const std::set<std::string>& plan_config_keys() {
  static const std::set<std::string> keys = {
      "seed", "engine",
      "model.kind", "model.input", "model.classes", "model.hidden", "model.stem_channels",
      "model.stage_channels", "model.blocks_per_stage", "model.modes_per_block", "model.norm",
      "model.shortcut", "model.head", "model.nf", "model.nf_alpha", "model.sws_gamma",
      "lif.threshold", "lif.leak", "lif.surrogate_width",
      "loss.lambda_reg",
      "teacher.kind", "teacher.path",
      "augment.enabled", "augment.pad_crop", "augment.hflip", "augment.cutout",
      "data.max_train_samples", "data.eval_samples",
      "stage1.epochs", "stage1.optimizer", "stage1.lr", "stage1.weight_decay", "stage1.t",
      "stage1.batch_size", "stage1.loss",
      "stage2.epochs", "stage2.optimizer", "stage2.lr", "stage2.weight_decay", "stage2.t",
      "stage2.batch_size", "stage2.loss",
  };
  return keys;
}

TrainPlan plan_from_config(const Config& cfg) {
  cfg.check_known(plan_config_keys());
  TrainPlan plan;
  plan.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 1));
  const std::string engine = cfg.get_string("engine", "sltt");
  if (engine == "sltt")
    plan.engine = BackwardMode::sltt;
  else if (engine == "sg_bptt")
    plan.engine = BackwardMode::sg_bptt;
  else
    throw ValueError("unknown engine: " + engine);

  const std::string kind = cfg.get_string("model.kind", "convnet");
  if (kind == "mlp")
    plan.arch.kind = ArchSpec::Kind::mlp;
  else if (kind == "convnet")
    plan.arch.kind = ArchSpec::Kind::convnet;
  else
    throw ValueError("unknown model kind: " + kind);
  plan.arch.input_shape = cfg.get_size_list("model.input", {1, 28, 28});
  plan.arch.num_classes = static_cast<std::size_t>(cfg.get_int("model.classes", 10));
  plan.arch.hidden = cfg.get_size_list("model.hidden", {64});
  plan.arch.stem_channels = static_cast<std::size_t>(cfg.get_int("model.stem_channels", 8));
  plan.arch.stage_channels = cfg.get_size_list("model.stage_channels", {8, 16});
  plan.arch.blocks_per_stage = cfg.get_size_list("model.blocks_per_stage", {2, 2});
  plan.arch.modes_per_block = static_cast<std::size_t>(cfg.get_int("model.modes_per_block", 2));
  const std::string norm = cfg.get_string("model.norm", "bn");
  if (norm == "bn")
    plan.arch.norm = NormKind::bn;
  else if (norm == "sws")
    plan.arch.norm = NormKind::sws;
  else if (norm == "none")
    plan.arch.norm = NormKind::none;
  else
    throw ValueError("unknown norm kind: " + norm);
  const std::string shortcut = cfg.get_string("model.shortcut", "multi");
  if (shortcut == "multi")
    plan.arch.shortcut = ShortcutStyle::multi_shortcut;
  else if (shortcut == "single")
    plan.arch.shortcut = ShortcutStyle::single_shortcut;
  else
    throw ValueError("unknown shortcut style: " + shortcut);
  const std::string head = cfg.get_string("model.head", "gap");
  if (head == "flatten")
    plan.arch.head_flatten = true;
  else if (head != "gap")
    throw ValueError("unknown head kind: " + head);
  plan.arch.nf = cfg.get_bool("model.nf", false);
  plan.arch.nf_alpha = cfg.get_double("model.nf_alpha", 0.2);
  plan.arch.sws_gamma = cfg.get_double("model.sws_gamma", 2.74);

  plan.lif.v_threshold = cfg.get_double("lif.threshold", 1.0);
  plan.lif.leak = cfg.get_double("lif.leak", 0.1);
  plan.lif.surrogate_width = cfg.get_double("lif.surrogate_width", plan.lif.v_threshold);
  plan.lif.validate();

  plan.lambda_reg = cfg.get_double("loss.lambda_reg", 0.0);

  const std::string teacher = cfg.get_string("teacher.kind", "stage1");
  if (teacher == "none")
    plan.teacher = TeacherKind::none;
  else if (teacher == "file")
    plan.teacher = TeacherKind::file;
  else if (teacher == "stage1")
    plan.teacher = TeacherKind::stage1_model;
  else
    throw ValueError("unknown teacher kind: " + teacher);
  plan.teacher_path = cfg.get_string("teacher.path", "");

  plan.augment_enabled = cfg.get_bool("augment.enabled", false);
  plan.augment.pad_crop = static_cast<std::size_t>(cfg.get_int("augment.pad_crop", 4));
  plan.augment.hflip = cfg.get_bool("augment.hflip", false);
  const std::int64_t cutout = cfg.get_int("augment.cutout", 0);
  plan.augment.cutout =
      cutout > 0 ? std::optional<std::size_t>(static_cast<std::size_t>(cutout)) : std::nullopt;

  plan.max_train_samples =
      static_cast<std::size_t>(cfg.get_int("data.max_train_samples", 0));
  plan.eval_samples = static_cast<std::size_t>(cfg.get_int("data.eval_samples", 0));

  StagePlan d1;
  d1.optimizer = OptimizerKind::sgd_momentum;
  d1.lr = 0.1;
  d1.weight_decay = 5e-5;
  d1.loss = LossKind::tet_ce;
  plan.stage1 = parse_stage(cfg, "stage1", d1);
  plan.stage1.weight_mode = WeightMode::full_precision;

  StagePlan d2;
  d2.optimizer = OptimizerKind::adam;
  d2.lr = 0.001;
  d2.weight_decay = 0.0;
  d2.loss = LossKind::combined;
  d2.horizon = plan.stage1.horizon;
  d2.batch_size = plan.stage1.batch_size;
  plan.stage2 = parse_stage(cfg, "stage2", d2);
  plan.stage2.weight_mode = WeightMode::binary;

  plan.echo = cfg.entries();
  plan.validate();
  return plan;
}

void TrainPlan::validate() {
  lif.validate();
  SEIBW_CHECK_VALUE(lambda_reg >= 0.0 && lambda_reg <= 1.0, "plan: lambda_reg must be in [0,1]");
  if (stage2.weight_decay != 0.0) {
    log_warning("stage 2 weight decay is fixed at 0; overriding configured value");
    stage2.weight_decay = 0.0;
  }
  SEIBW_CHECK_VALUE(stage1.weight_mode == WeightMode::full_precision,
                    "plan: stage 1 must train full-precision weights");
  stage2.weight_mode = WeightMode::binary;
  if (stage2.loss != LossKind::tet_ce && teacher == TeacherKind::none)
    throw ValueError("plan: distillation loss in stage 2 requires a teacher");
}

// --- metrics ---

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  SEIBW_CHECK(f.good(), "cannot open for write: " + path);
  f << "epoch,stage,split,loss,accuracy,lr,seconds\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%d,%s,%.8g,%.6f,%.8g,%.3f\n", r.epoch, r.stage,
                  r.split.c_str(), r.loss, r.accuracy, r.lr, r.seconds);
    f << buf;
  }
}

// --- checkpoints ---

namespace {

template <class T>
Tensor to_f32(const TensorT<T>& t) {
  return t.template cast<float>();
}

template <class T>
void assign_from_f32(TensorT<T>& dst, const Tensor& src, const std::string& name) {
  SEIBW_CHECK_FORMAT(dst.shape() == src.shape(), "checkpoint: shape mismatch for " + name);
  dst = src.template cast<T>();
}

}  // namespace

template <class T>
void save_checkpoint(const std::string& path, Network<T>& net, const OptimizerStateT<T>* opt,
                     const CheckpointMeta<T>& meta) {
  std::vector<NamedTensor> records;
  auto views = collect_param_views(net);
  for (const auto& v : views) records.push_back({v.name, to_f32(*v.value)});
  for (auto& [name, bn] : net.named_bns()) {
    records.push_back({name + ".running_mean", to_f32(bn->running_mean)});
    records.push_back({name + ".running_var", to_f32(bn->running_var)});
  }
  if (opt) {
    for (std::size_t i = 0; i < views.size(); ++i)
      records.push_back({"opt." + views[i].name + ".m0", to_f32(opt->m0[i])});
    if (opt->config.kind == OptimizerKind::adam)
      for (std::size_t i = 0; i < views.size(); ++i)
        records.push_back({"opt." + views[i].name + ".m1", to_f32(opt->m1[i])});
  }
  if (!meta.norm_mean.empty()) {
    Tensor m({meta.norm_mean.size()}), s({meta.norm_std.size()});
    for (std::size_t i = 0; i < meta.norm_mean.size(); ++i) {
      m[i] = static_cast<float>(meta.norm_mean[i]);
      s[i] = static_cast<float>(meta.norm_std[i]);
    }
    records.push_back({"data.norm_mean", m});
    records.push_back({"data.norm_std", s});
  }
  write_container(path, records);

  nlohmann::json j;
  j["format_version"] = 1;
  j["epoch"] = meta.epoch;
  j["stage"] = meta.stage;
  j["seed"] = meta.seed;
  j["rng"] = {{"algorithm", Rng::algorithm()},
              {"seed", meta.rng.seed()},
              {"counter", meta.rng.counter()}};
  if (opt) {
    j["optimizer"] = {{"kind", opt->config.kind == OptimizerKind::adam ? "adam" : "sgd_momentum"},
                      {"step", opt->step_count}};
  } else {
    j["optimizer"] = {{"kind", "none"}, {"step", 0}};
  }
  j["plan"] = meta.plan_echo;

  const std::string tmp = path + ".json.tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    SEIBW_CHECK(f.good(), "cannot open for write: " + tmp);
    f << j.dump(2) << "\n";
  }
  SEIBW_CHECK(std::rename(tmp.c_str(), (path + ".json").c_str()) == 0,
              "rename failed: " + path + ".json");
}

template <class T>
CheckpointMeta<T> load_checkpoint(const std::string& path, Network<T>& net,
                                  OptimizerStateT<T>* opt) {
  auto records = read_container(path);
  auto views = collect_param_views(net);
  for (auto& v : views) {
    const Tensor* rec = find_record(records, v.name);
    SEIBW_CHECK_FORMAT(rec != nullptr, "checkpoint: missing record " + v.name);
    assign_from_f32(*v.value, *rec, v.name);
  }
  for (auto& [name, bn] : net.named_bns()) {
    const Tensor* rm = find_record(records, name + ".running_mean");
    const Tensor* rv = find_record(records, name + ".running_var");
    SEIBW_CHECK_FORMAT(rm && rv, "checkpoint: missing batch norm state for " + name);
    assign_from_f32(bn->running_mean, *rm, name + ".running_mean");
    assign_from_f32(bn->running_var, *rv, name + ".running_var");
  }
  net.refresh_all();

  CheckpointMeta<T> meta;
  std::ifstream jf(path + ".json");
  SEIBW_CHECK_FORMAT(jf.good(), "checkpoint: missing sidecar " + path + ".json");
  nlohmann::json j = nlohmann::json::parse(jf, nullptr, /*allow_exceptions=*/false);
  SEIBW_CHECK_FORMAT(!j.is_discarded(), "checkpoint: bad sidecar json");
  meta.epoch = j.value("epoch", std::size_t(0));
  meta.stage = j.value("stage", 1);
  meta.seed = j.value("seed", std::uint64_t(0));
  if (j.contains("rng"))
    meta.rng = Rng(j["rng"].value("seed", std::uint64_t(0)),
                   j["rng"].value("counter", std::uint64_t(0)));
  if (j.contains("plan"))
    meta.plan_echo = j["plan"].get<std::map<std::string, std::string>>();
  if (j.contains("optimizer")) {
    meta.optimizer = j["optimizer"].value("kind", "none");
    meta.opt_step = j["optimizer"].value("step", std::size_t(0));
  }
  if (const Tensor* m = find_record(records, "data.norm_mean")) {
    meta.norm_mean.resize(m->numel());
    for (std::size_t i = 0; i < m->numel(); ++i) meta.norm_mean[i] = static_cast<T>((*m)[i]);
  }
  if (const Tensor* s = find_record(records, "data.norm_std")) {
    meta.norm_std.resize(s->numel());
    for (std::size_t i = 0; i < s->numel(); ++i) meta.norm_std[i] = static_cast<T>((*s)[i]);
  }

  if (opt) {
    const std::string kind = opt->config.kind == OptimizerKind::adam ? "adam" : "sgd_momentum";
    SEIBW_CHECK_FORMAT(meta.optimizer == kind,
                       "checkpoint: optimizer kind mismatch (" + meta.optimizer + ")");
    opt->init(views);
    opt->step_count = meta.opt_step;
    for (std::size_t i = 0; i < views.size(); ++i) {
      const Tensor* m0 = find_record(records, "opt." + views[i].name + ".m0");
      SEIBW_CHECK_FORMAT(m0, "checkpoint: missing optimizer state for " + views[i].name);
      assign_from_f32(opt->m0[i], *m0, views[i].name + ".m0");
      if (opt->config.kind == OptimizerKind::adam) {
        const Tensor* m1 = find_record(records, "opt." + views[i].name + ".m1");
        SEIBW_CHECK_FORMAT(m1, "checkpoint: missing optimizer state for " + views[i].name);
        assign_from_f32(opt->m1[i], *m1, views[i].name + ".m1");
      }
    }
  }
  return meta;
}

Network<float> network_from_checkpoint(const std::string& path, CheckpointMeta<float>* meta_out) {
  std::ifstream jf(path + ".json");
  SEIBW_CHECK_FORMAT(jf.good(), "checkpoint: missing sidecar " + path + ".json");
  nlohmann::json j = nlohmann::json::parse(jf, nullptr, false);
  SEIBW_CHECK_FORMAT(!j.is_discarded() && j.contains("plan"),
                     "checkpoint: sidecar has no plan echo");
  Config cfg;
  for (auto& [k, v] : j["plan"].get<std::map<std::string, std::string>>())
    if (plan_config_keys().count(k)) cfg.set(k, v);
  TrainPlan plan = plan_from_config(cfg);
  const int stage = j.value("stage", 1);
  const StagePlan& sp = stage == 2 ? plan.stage2 : plan.stage1;

  Rng rng(plan.seed);
  Network<float> net = build_network<float>(plan.arch, sp.horizon, plan.lif, sp.weight_mode, rng);
  CheckpointMeta<float> meta = load_checkpoint<float>(path, net, nullptr);
  if (meta_out) *meta_out = meta;
  return net;
}

// --- teacher probabilities ---

template <class T>
void export_teacher_probs(Network<T>& net, const DatasetT<T>& ds, std::size_t batch_size,
                          const std::string& path) {
  const std::size_t N = ds.size();
  const std::size_t C = net.num_classes;
  Tensor probs({N, C});
  Rng noshuffle(0);
  BatchIterator it(N, batch_size, noshuffle, /*shuffle=*/false);
  std::vector<std::size_t> idx;
  while (it.next(idx)) {
    TensorT<T> input = assemble_batch(ds, idx, net.horizon, nullptr, nullptr);
    TensorT<T> logits = net.forward(input, Phase::eval);
    TensorT<T> sm = softmax(logits);
    const std::size_t B = idx.size();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < net.horizon; ++t)
          acc += static_cast<double>(sm[(t * B + b) * C + c]);
        probs[idx[b] * C + c] = static_cast<float>(acc / static_cast<double>(net.horizon));
      }
  }
  write_container(path, {{"teacher_probs", probs}});
}

template <class T>
TeacherProbsT<T> load_teacher_probs(const std::string& path) {
  auto records = read_container(path);
  const Tensor* rec = find_record(records, "teacher_probs");
  SEIBW_CHECK_FORMAT(rec != nullptr, "teacher file: record 'teacher_probs' not found in " + path);
  TeacherProbsT<T> teacher;
  teacher.probs = rec->template cast<T>();
  teacher.source = TeacherSource::file;
  teacher.validate();
  return teacher;
}

// --- training ---

template <class T>
TensorT<T> assemble_batch(const DatasetT<T>& ds, const std::vector<std::size_t>& indices,
                          std::size_t horizon, const AugmentSpec* aug, Rng* rng) {
  SEIBW_CHECK_VALUE(!indices.empty(), "assemble_batch: empty index list");
  const std::size_t B = indices.size();
  if (ds.temporal) {
    SEIBW_CHECK_VALUE(ds.samples.dim(0) == horizon,
                      "assemble_batch: temporal dataset horizon mismatch");
    std::vector<std::size_t> shape;
    shape.push_back(horizon);
    shape.push_back(B);
    for (std::size_t d = 2; d < ds.samples.rank(); ++d) shape.push_back(ds.samples.dim(d));
    TensorT<T> out(shape);
    const std::size_t per = ds.samples.numel() / (horizon * ds.samples.dim(1));
    for (std::size_t t = 0; t < horizon; ++t)
      for (std::size_t b = 0; b < B; ++b)
        std::copy(ds.samples.data() + (t * ds.samples.dim(1) + indices[b]) * per,
                  ds.samples.data() + (t * ds.samples.dim(1) + indices[b] + 1) * per,
                  out.data() + (t * B + b) * per);
    return out;
  }

  std::vector<std::size_t> sample_shape(ds.samples.shape().begin() + 1, ds.samples.shape().end());
  std::vector<std::size_t> shape;
  shape.push_back(horizon);
  shape.push_back(B);
  for (auto d : sample_shape) shape.push_back(d);
  TensorT<T> out(shape);
  const std::size_t per = TensorT<T>::count(sample_shape);
  for (std::size_t b = 0; b < B; ++b) {
    TensorT<T> s = ds.sample(indices[b]);
    if (aug && rng) s = augment(s, *aug, *rng);
    for (std::size_t t = 0; t < horizon; ++t)
      std::copy(s.data(), s.data() + per, out.data() + (t * B + b) * per);
  }
  return out;
}

template <class T>
double evaluate_accuracy(Network<T>& net, const DatasetT<T>& ds, std::size_t batch_size,
                         std::size_t max_samples) {
  const std::size_t N = max_samples > 0 ? std::min(max_samples, ds.size()) : ds.size();
  Rng noshuffle(0);
  BatchIterator it(N, batch_size, noshuffle, /*shuffle=*/false);
  std::vector<std::size_t> idx;
  std::size_t correct = 0;
  while (it.next(idx)) {
    TensorT<T> input = assemble_batch(ds, idx, net.horizon, nullptr, nullptr);
    TensorT<T> logits = net.forward(input, Phase::eval);
    const std::size_t B = idx.size();
    TensorT<T> mean({B, net.num_classes});
    for (std::size_t t = 0; t < net.horizon; ++t)
      for (std::size_t i = 0; i < B * net.num_classes; ++i)
        mean[i] += logits[t * B * net.num_classes + i];
    auto preds = argmax_rows(mean);
    for (std::size_t b = 0; b < B; ++b)
      if (preds[b] == static_cast<std::size_t>(ds.labels[idx[b]])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(N);
}

namespace {

template <class T>
TeacherProbsT<T> gather_teacher_rows(const TeacherProbsT<T>& all,
                                     const std::vector<std::size_t>& indices) {
  TeacherProbsT<T> out;
  out.source = all.source;
  if (all.per_step()) {
    const std::size_t horizon = all.probs.dim(0);
    const std::size_t n = all.probs.dim(1);
    const std::size_t C = all.probs.dim(2);
    out.probs = TensorT<T>({horizon, indices.size(), C});
    for (std::size_t t = 0; t < horizon; ++t)
      for (std::size_t b = 0; b < indices.size(); ++b)
        std::copy(all.probs.data() + (t * n + indices[b]) * C,
                  all.probs.data() + (t * n + indices[b] + 1) * C,
                  out.probs.data() + (t * indices.size() + b) * C);
    return out;
  }
  const std::size_t C = all.probs.dim(1);
  out.probs = TensorT<T>({indices.size(), C});
  for (std::size_t b = 0; b < indices.size(); ++b)
    std::copy(all.probs.data() + indices[b] * C, all.probs.data() + (indices[b] + 1) * C,
              out.probs.data() + b * C);
  return out;
}

}  // namespace

template <class T>
StageOutcome<T> run_stage(const TrainPlan& plan, int stage_index, Network<T>& net,
                          const DatasetT<T>& train, const DatasetT<T>& test,
                          const std::string& out_dir, const TeacherProbsT<T>* teacher,
                          const std::string& resume_from, std::size_t stop_after_epoch) {
  const StagePlan& sp = stage_index == 1 ? plan.stage1 : plan.stage2;
  std::filesystem::create_directories(out_dir);
  const std::string ckpt_path =
      out_dir + "/stage" + std::to_string(stage_index) + ".ckpt";

  LossConfig loss_cfg;
  loss_cfg.kind = sp.loss;
  loss_cfg.lambda_reg = plan.lambda_reg;
  loss_cfg.v_threshold = plan.lif.v_threshold;

  if ((sp.loss == LossKind::kl_distill || sp.loss == LossKind::combined))
    SEIBW_CHECK_VALUE(teacher != nullptr, "run_stage: distillation loss without teacher");

  auto views = collect_param_views(net);
  OptimizerStateT<T> opt;
  opt.config.kind = sp.optimizer;
  opt.init(views);

  Rng rng(plan.seed + static_cast<std::uint64_t>(stage_index) * 0x9E3779B97F4A7C15ull);
  std::size_t start_epoch = 0;
  if (!resume_from.empty()) {
    CheckpointMeta<T> meta = load_checkpoint(resume_from, net, &opt);
    SEIBW_CHECK_VALUE(meta.stage == stage_index, "resume: checkpoint is from another stage");
    rng = meta.rng;
    start_epoch = meta.epoch;
    views = collect_param_views(net);
  }

  StageOutcome<T> outcome;
  CheckpointMeta<T> meta;
  meta.stage = stage_index;
  meta.seed = plan.seed;
  meta.plan_echo = plan.echo;
  meta.norm_mean = train.norm_mean;
  meta.norm_std = train.norm_std;

  const std::size_t last_epoch =
      stop_after_epoch > 0 ? std::min(stop_after_epoch, sp.epochs) : sp.epochs;
  for (std::size_t epoch = start_epoch + 1; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cosine_lr(sp.lr, epoch - 1, sp.epochs);

    BatchIterator it(train.size(), sp.batch_size, rng, /*shuffle=*/true);
    std::vector<std::size_t> idx;
    double loss_sum = 0.0;
    std::size_t batches = 0, correct = 0, seen = 0;
    while (it.next(idx)) {
      if (idx.size() < 2 && plan.arch.norm == NormKind::bn) continue;  // bn needs batch >= 2
      TensorT<T> input = assemble_batch(train, idx, sp.horizon,
                                        plan.augment_enabled ? &plan.augment : nullptr, &rng);
      TensorT<T> logits = net.forward(input, Phase::train);

      std::vector<std::int32_t> labels(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = train.labels[idx[b]];

      LossResult<T> res;
      if (sp.loss == LossKind::tet_ce) {
        res = tet_ce_loss(logits, labels);
      } else {
        TeacherProbsT<T> rows = gather_teacher_rows(*teacher, idx);
        res = sp.loss == LossKind::kl_distill
                  ? kl_snn_loss(logits, rows)
                  : combined_loss(loss_cfg, logits, rows, labels);
      }

      net.zero_grads();
      net.backward(res.grad, plan.engine);
      step(opt, views, lr, sp.weight_decay);

      loss_sum += res.loss;
      ++batches;
      const std::size_t B = idx.size();
      TensorT<T> mean({B, net.num_classes});
      for (std::size_t t = 0; t < sp.horizon; ++t)
        for (std::size_t i = 0; i < B * net.num_classes; ++i)
          mean[i] += logits[t * B * net.num_classes + i];
      auto preds = argmax_rows(mean);
      for (std::size_t b = 0; b < B; ++b)
        if (preds[b] == static_cast<std::size_t>(labels[b])) ++correct;
      seen += B;
    }

    const double test_acc = evaluate_accuracy(net, test, sp.batch_size, plan.eval_samples);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    MetricsRow train_row{epoch, stage_index, "train", batches ? loss_sum / batches : 0.0,
                         seen ? static_cast<double>(correct) / seen : 0.0, lr, secs};
    MetricsRow test_row{epoch, stage_index, "test", 0.0, test_acc, lr, 0.0};
    outcome.metrics.push_back(train_row);
    outcome.metrics.push_back(test_row);
    outcome.test_accuracy = test_acc;
    if (epoch == last_epoch && plan.eval_samples > 0)
      outcome.test_accuracy = evaluate_accuracy(net, test, sp.batch_size);

    meta.epoch = epoch;
    meta.rng = rng;
    save_checkpoint(ckpt_path, net, &opt, meta);
  }

  if (last_epoch == 0 || start_epoch >= last_epoch) {
    // Nothing left to train; still emit a checkpoint of the current weights.
    meta.epoch = start_epoch;
    meta.rng = rng;
    save_checkpoint(ckpt_path, net, &opt, meta);
    outcome.test_accuracy = evaluate_accuracy(net, test, sp.batch_size);
  }

  outcome.checkpoint_path = ckpt_path;
  return outcome;
}

template <class T>
TwoStageOutcome<T> run_two_stage(const TrainPlan& plan, const DatasetT<T>& train,
                                 const DatasetT<T>& test, const std::string& out_dir) {
  TrainPlan p = plan;
  p.validate();
  SEIBW_CHECK_VALUE(p.stage1.horizon == p.stage2.horizon || p.arch.norm != NormKind::bn,
                    "two-stage: per-step batch norm requires equal horizons across stages");

  TwoStageOutcome<T> outcome;
  Rng build_rng(p.seed);
  Network<T> net = build_network<T>(p.arch, p.stage1.horizon, p.lif,
                                    WeightMode::full_precision, build_rng);
  outcome.stage1 =
      run_stage<T>(p, 1, net, train, test, out_dir, static_cast<const TeacherProbsT<T>*>(nullptr));

  // Stage 2 initializes from the stage-1 masters and binarizes.
  set_weight_mode(net, WeightMode::binary);

  TeacherProbsT<T> teacher;
  const TeacherProbsT<T>* teacher_ptr = nullptr;
  if (p.stage2.loss != LossKind::tet_ce) {
    if (p.teacher == TeacherKind::file) {
      SEIBW_CHECK_VALUE(!p.teacher_path.empty(), "two-stage: teacher.path required");
      teacher = load_teacher_probs<T>(p.teacher_path);
    } else if (p.teacher == TeacherKind::stage1_model) {
      // Snapshot the stage-1 weights' time-averaged softmax as the teacher.
      const std::string probs_path = out_dir + "/teacher_probs.seib";
      Rng rebuild_rng(p.seed);
      Network<T> teacher_net = build_network<T>(p.arch, p.stage1.horizon, p.lif,
                                                WeightMode::full_precision, rebuild_rng);
      load_checkpoint<T>(outcome.stage1.checkpoint_path, teacher_net, nullptr);
      export_teacher_probs(teacher_net, train, p.stage2.batch_size, probs_path);
      teacher = load_teacher_probs<T>(probs_path);
      teacher.source = TeacherSource::stage1_model;
    } else {
      throw ValueError("two-stage: stage 2 distillation needs a teacher source");
    }
    teacher_ptr = &teacher;
  }

  outcome.stage2 = run_stage(p, 2, net, train, test, out_dir, teacher_ptr);

  std::vector<MetricsRow> all = outcome.stage1.metrics;
  all.insert(all.end(), outcome.stage2.metrics.begin(), outcome.stage2.metrics.end());
  write_metrics_csv(all, out_dir + "/metrics.csv");
  return outcome;
}

#define SEIBW_INSTANTIATE(T)                                                                \
  template std::vector<ParamView<T>> collect_param_views<T>(Network<T>&);                   \
  template struct OptimizerStateT<T>;                                                       \
  template void step<T>(OptimizerStateT<T>&, std::vector<ParamView<T>>&, double, double);   \
  template void save_checkpoint<T>(const std::string&, Network<T>&,                         \
                                   const OptimizerStateT<T>*, const CheckpointMeta<T>&);    \
  template CheckpointMeta<T> load_checkpoint<T>(const std::string&, Network<T>&,            \
                                                OptimizerStateT<T>*);                       \
  template void export_teacher_probs<T>(Network<T>&, const DatasetT<T>&, std::size_t,       \
                                        const std::string&);                                \
  template TeacherProbsT<T> load_teacher_probs<T>(const std::string&);                      \
  template TensorT<T> assemble_batch<T>(const DatasetT<T>&, const std::vector<std::size_t>&,\
                                        std::size_t, const AugmentSpec*, Rng*);             \
  template double evaluate_accuracy<T>(Network<T>&, const DatasetT<T>&, std::size_t,       \
                                       std::size_t);       \
  template StageOutcome<T> run_stage<T>(const TrainPlan&, int, Network<T>&,                 \
                                        const DatasetT<T>&, const DatasetT<T>&,             \
                                        const std::string&, const TeacherProbsT<T>*,        \
                                        const std::string&, std::size_t);                                \
  template TwoStageOutcome<T> run_two_stage<T>(const TrainPlan&, const DatasetT<T>&,        \
                                               const DatasetT<T>&, const std::string&);

SEIBW_INSTANTIATE(float)
SEIBW_INSTANTIATE(double)
#undef SEIBW_INSTANTIATE

}  // namespace seibw
