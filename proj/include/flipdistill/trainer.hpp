#pragma once

// Optimization loop, evaluation, checkpoint selection and gradient checks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flipdistill/data.hpp"
#include "flipdistill/losses.hpp"
#include "flipdistill/metrics.hpp"
#include "flipdistill/models.hpp"

namespace flipdistill {

enum class OptimizerKind { kAdamW, kSgd };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);
std::string to_string(NegativeMargin m);
NegativeMargin parse_negative_margin(const std::string& s);

struct TrainConfig {
  double learning_rate = 3e-5;
  double warmup_ratio = 0.05;
  double weight_decay = 0.1;
  bool grad_clip = true;
  double grad_clip_min = -1.0;
  double grad_clip_max = 1.0;
  int batch_size = 16;
  int epochs = 3;
  int evals_per_epoch = 1;
  double m_c = 0.06;
  double theta = 0.5;
  double w_dist = 0.1;
  double w_mcl = 0.1;
  std::uint64_t seed = 1;
  bool disable_mcl = false;
  bool disable_dist = false;
  bool disable_filter = false;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  NegativeMargin negative_margin = NegativeMargin::kPositivePairAngle;
  bool same_cluster_positives = true;
  int top_k = 5;
  int histogram_bins = 20;
  // Next-token pretraining of the student base before it is frozen.
  int base_pretrain_epochs = 2;
  double base_pretrain_lr = 3e-3;
  // Contrastive pre-fit of the teacher before it is frozen.
  int teacher_epochs = 3;
  double teacher_lr = 3e-3;
  double teacher_temperature = 0.1;
  int teacher_batch_size = 32;

  LossWeights weights() const { return {w_dist, w_mcl}; }
  bool dist_active() const { return !disable_dist && w_dist != 0.0; }
  bool mcl_active() const { return !disable_mcl && w_mcl != 0.0; }
  // False when both distillation terms are off; the teacher is then unused.
  bool uses_teacher() const { return dist_active() || mcl_active(); }
  void validate() const;
};

// Linear warmup from 0 over round(warmup_ratio * total_steps) steps, then constant.
class LrSchedule {
 public:
  LrSchedule(double peak, double warmup_ratio, std::size_t total_steps);
  double at(std::size_t step) const;
  std::size_t warmup_steps() const { return warmup_; }

 private:
  double peak_;
  std::size_t warmup_;
};

// Decoupled weight decay with bias-corrected moments, or plain SGD.
class Optimizer {
 public:
  Optimizer(std::vector<NamedTensor> params, const TrainConfig& cfg);
  // Clips every gradient component (when enabled), then updates in place.
  void step(double lr);
  void zero_grad();
  const std::vector<NamedTensor>& params() const { return params_; }
  // Largest |g| among the gradients applied by the last step.
  double last_max_abs_grad() const { return last_max_abs_grad_; }

 private:
  std::vector<NamedTensor> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  double last_max_abs_grad_ = 0.0;
};

struct MetricsReport {
  std::size_t step = 0;
  std::string split;
  double accuracy = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;
  LossBreakdown loss;
  double lr = 0.0;
  bool has_metrics = true;  // false for per-step training rows
};

// Append-only CSV: step,split,acc,f1,auc,l_sup,l_dist,l_mcl,total,lr.
class MetricLog {
 public:
  MetricLog() = default;
  // Truncates `path` and writes the header. An empty path keeps rows in memory only.
  explicit MetricLog(std::filesystem::path path);
  void append(const MetricsReport& r);
  const std::vector<MetricsReport>& rows() const { return rows_; }

  static std::string header();
  static std::string format_row(const MetricsReport& r);

 private:
  std::filesystem::path path_;
  std::vector<MetricsReport> rows_;
};

// Frozen teacher representations, one row per example side.
struct TeacherCache {
  std::vector<Tensor> r_i;
  std::vector<Tensor> r_j;
};
TeacherCache encode_with_teacher(const TeacherEncoder& teacher, std::span<const PairExample> examples);

// Contrastive pre-fit on same-cluster pairs (label-1 pairs when cluster ids
// are absent), then freeze. Returns the mean loss of the final epoch.
double prefit_teacher(TeacherEncoder& teacher, std::span<const PairExample> train, const TrainConfig& cfg);

// Next-token prediction over "[MATCH] a [SEP] b [ANS]" documents built from
// same-cluster pairs (label-1 pairs when cluster ids are absent), updating
// every base tensor with adapters bypassed; the base is frozen afterwards.
// Returns the mean loss of the final epoch.
double pretrain_student_base(StudentTransformer& model, std::span<const PairExample> train, const TrainConfig& cfg);

struct StepInputs {
  std::span<const PairExample> examples;
  std::span<const std::size_t> index;
  Tensor y;
  const TeacherCache* teacher = nullptr;  // required when cfg.uses_teacher()
  std::optional<Tensor> phi_override;     // replaces the filter mask when set
  bool include_sup = true;
};

struct StepLoss {
  TotalLoss loss;
  std::size_t mcl_anchors = 0;
};

// One batch: student forward, matching matrices, filter, combined loss.
StepLoss compute_batch_loss(const StudentTransformer& model, const StepInputs& in, const TrainConfig& cfg,
                            const ForwardMode& mode);

std::vector<double> predict_scores(const StudentTransformer& model, std::span<const PairExample> examples);
std::vector<int> labels_of(std::span<const PairExample> examples);

// Dropout off. Loss breakdown carries the mean BCE only.
MetricsReport evaluate(const StudentTransformer& model, std::span<const PairExample> examples,
                       const std::string& split = "eval", std::size_t step = 0);

struct CheckpointRecord {
  std::size_t step = 0;
  bool initial = false;
  MetricsReport dev;
  MetricsReport test;
  std::vector<std::vector<double>> values;  // trainable parameters
  std::filesystem::path path;               // empty when not written
};

struct TrainIo {
  std::filesystem::path metrics_csv;     // empty: in-memory log only
  std::filesystem::path checkpoint_dir;  // empty: in-memory checkpoints only
  std::string config_text;
};

struct TrainResult {
  std::vector<MetricsReport> log;
  std::vector<CheckpointRecord> checkpoints;
  std::size_t steps = 0;
};

// Requires a frozen teacher whose dim equals the adapter rank whenever
// cfg.uses_teacher(); otherwise the teacher may be null. On a non-finite
// loss the trainable parameters are restored to the last checkpoint and
// TrainingError is thrown.
TrainResult train(StudentTransformer& model, const TeacherEncoder* teacher, const Corpus& data,
                  const TrainConfig& cfg, const TrainIo& io = {});

struct SelectedCheckpoints {
  std::vector<std::size_t> steps;  // chosen checkpoints, best first
  MetricsReport dev;               // mean over the chosen checkpoints
  MetricsReport test;
};

// Top-k by dev F1 (ties to the earlier step) among non-initial
// checkpoints, or all checkpoints when none were trained. Warns and uses
// every candidate when fewer than k exist.
SelectedCheckpoints select_and_average_checkpoints(std::span<const CheckpointRecord> checkpoints, std::size_t k = 5);

ScoreHistogram export_score_histogram(const StudentTransformer& model, std::span<const PairExample> examples,
                                      std::size_t bins);

enum class LossSubset { kAll, kSup, kDist, kMcl };
std::string to_string(LossSubset s);
LossSubset parse_loss_subset(const std::string& s);

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t coordinates = 256;
  std::uint64_t seed = 1;
  LossSubset losses = LossSubset::kAll;
  bool zero_phi = false;  // force phi = 0 everywhere
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::size_t coordinates = 0;
  double loss = 0.0;
};

// Central differences on sampled LoRA coordinates against the tape.
// Relative error is |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check(StudentTransformer& model, const StepInputs& batch, const TrainConfig& cfg,
                           const GradCheckOptions& opt = {});

}  // namespace flipdistill
