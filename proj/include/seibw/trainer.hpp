#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "seibw/backprop.hpp"
#include "seibw/config.hpp"
#include "seibw/data.hpp"
#include "seibw/losses.hpp"
#include "seibw/network.hpp"

namespace seibw {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Flat view over every trainable tensor of a network (masters, biases, sWS
// gains, BN affine parameters), in a stable order.
template <class T>
struct ParamView {
  std::string name;
  TensorT<T>* value = nullptr;
  TensorT<T>* grad = nullptr;
  LayerParams<T>* owner = nullptr;  // set for master weights
  bool apply_decay = false;         // decoupled decay hits masters only
  bool clip_ste = false;            // binary masters clip to [-1.5, 1.5]
};

template <class T>
std::vector<ParamView<T>> collect_param_views(Network<T>& net);

template <class T>
struct OptimizerStateT {
  OptimizerConfig config;
  std::size_t step_count = 0;
  std::vector<TensorT<T>> m0;  // momentum / first moment, aligned to views
  std::vector<TensorT<T>> m1;  // second moment (adam only)

  void init(const std::vector<ParamView<T>>& views);
};

// base_lr * 0.5 * (1 + cos(pi * epoch / total)).
double cosine_lr(double base_lr, std::size_t epoch, std::size_t total_epochs);

// Decoupled weight decay, one optimizer update, then the STE clip. Binary
// layers' derived weights are refreshed afterwards.
template <class T>
void step(OptimizerStateT<T>& opt, std::vector<ParamView<T>>& views, double lr,
          double weight_decay);

enum class TeacherKind { none, file, stage1_model };

struct StagePlan {
  std::size_t epochs = 1;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.1;
  double weight_decay = 0.0;
  std::size_t horizon = 4;
  std::size_t batch_size = 64;
  LossKind loss = LossKind::tet_ce;
  WeightMode weight_mode = WeightMode::full_precision;
};

struct TrainPlan {
  StagePlan stage1;
  StagePlan stage2;
  double lambda_reg = 0.0;
  LifConfig lif;
  ArchSpec arch;
  AugmentSpec augment;
  bool augment_enabled = false;
  TeacherKind teacher = TeacherKind::stage1_model;
  std::string teacher_path;
  BackwardMode engine = BackwardMode::sltt;
  std::uint64_t seed = 1;
  std::size_t max_train_samples = 0;  // 0 = all
  std::size_t eval_samples = 0;       // per-epoch test subset; 0 = full set

  void validate();  // enforces stage2 weight decay = 0 (warns on override)
  std::map<std::string, std::string> echo;  // config entries for checkpoints
};

// Parses a TrainPlan from config keys; unknown keys are rejected.
TrainPlan plan_from_config(const Config& cfg);
const std::set<std::string>& plan_config_keys();

struct MetricsRow {
  std::size_t epoch = 0;
  int stage = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);

// --- checkpoints ---

template <class T>
struct CheckpointMeta {
  std::size_t epoch = 0;
  int stage = 1;
  std::uint64_t seed = 0;
  Rng rng;
  std::map<std::string, std::string> plan_echo;
  std::size_t opt_step = 0;
  std::string optimizer;  // "sgd_momentum" | "adam" | "none"
  std::vector<T> norm_mean, norm_std;
};

// Container at `path` plus a JSON sidecar at `path + ".json"`. Layer
// parameters, per-step BN state, optimizer moments, rng state and the
// normalization statistics all round-trip byte-identically.
template <class T>
void save_checkpoint(const std::string& path, Network<T>& net,
                     const OptimizerStateT<T>* opt, const CheckpointMeta<T>& meta);

template <class T>
CheckpointMeta<T> load_checkpoint(const std::string& path, Network<T>& net,
                                  OptimizerStateT<T>* opt);

// Rebuilds the network a checkpoint was saved from (arch/lif/horizon come
// from the plan echo) and loads its weights. Weight mode follows the echo.
Network<float> network_from_checkpoint(const std::string& path, CheckpointMeta<float>* meta_out);

// --- teacher probabilities ---

// Time-averaged eval softmax over the dataset, written as record
// "teacher_probs" [N, C].
template <class T>
void export_teacher_probs(Network<T>& net, const DatasetT<T>& ds, std::size_t batch_size,
                          const std::string& path);

template <class T>
TeacherProbsT<T> load_teacher_probs(const std::string& path);

// --- training ---

template <class T>
struct StageOutcome {
  std::vector<MetricsRow> metrics;
  double test_accuracy = 0.0;
  std::string checkpoint_path;
};

template <class T>
struct TwoStageOutcome {
  StageOutcome<T> stage1;
  StageOutcome<T> stage2;
};

// Assembles an encoded batch [T, B, ...] from dataset rows (augmenting when
// enabled; temporal datasets pass through their own frames).
template <class T>
TensorT<T> assemble_batch(const DatasetT<T>& ds, const std::vector<std::size_t>& indices,
                          std::size_t horizon, const AugmentSpec* aug, Rng* rng);

// max_samples = 0 evaluates the whole set; otherwise the first max_samples.
template <class T>
double evaluate_accuracy(Network<T>& net, const DatasetT<T>& ds, std::size_t batch_size,
                         std::size_t max_samples = 0);

// One training stage. `resume_from` continues from a checkpoint written by
// the same stage (epoch counter, optimizer and rng state all restored).
// `stop_after_epoch` interrupts the stage early (0 = run to completion);
// the learning-rate schedule always follows the plan's full epoch count.
template <class T>
StageOutcome<T> run_stage(const TrainPlan& plan, int stage_index, Network<T>& net,
                          const DatasetT<T>& train, const DatasetT<T>& test,
                          const std::string& out_dir,
                          const TeacherProbsT<T>* teacher,
                          const std::string& resume_from = "",
                          std::size_t stop_after_epoch = 0);

// Full pipeline: stage 1 full precision, stage 2 binarized from the stage-1
// weights with decay forced to zero, distilling from the stage-1 model
// unless a teacher file is given.
template <class T>
TwoStageOutcome<T> run_two_stage(const TrainPlan& plan, const DatasetT<T>& train,
                                 const DatasetT<T>& test, const std::string& out_dir);

}  // namespace seibw
