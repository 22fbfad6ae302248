#pragma once

// Run orchestration shared by the CLI and the acceptance suite.
//
// A run directory holds config.resolved, metrics.csv, checkpoints/ and
// histogram.csv.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flipdistill/config.hpp"

namespace flipdistill {

// Loads train/dev/test from a directory written by write_corpus, or
// generates the corpus from cfg.data when `data_dir` is empty.
Corpus load_or_generate(const RunConfig& cfg, const std::filesystem::path& data_dir = {});

// Writes train.jsonl, dev.jsonl, test.jsonl and manifest.json.
Manifest write_corpus(const std::filesystem::path& dir, const Corpus& corpus, const RunConfig& cfg);

// Student with a pretrained, frozen base and a pre-fit, frozen teacher.
// Both depend only on (data, model, pretraining settings, seed), so one
// instance can seed every run of a sweep.
struct PreparedModels {
  StudentTransformer student;
  std::optional<TeacherEncoder> teacher;
  double base_lm_loss = 0.0;
  double teacher_loss = 0.0;
};

PreparedModels prepare_models(const RunConfig& cfg, const Corpus& corpus, bool with_teacher = true);

struct RunSummary {
  std::string name;
  RunConfig config;
  TrainResult result;
  SelectedCheckpoints selected;
  ScoreHistogram histogram;  // test split, best dev-F1 checkpoint
};

// Trains a clone of prepared.student. The model is left at the best dev-F1
// checkpoint. An empty run_dir keeps everything in memory.
RunSummary run_training(const std::string& name, const RunConfig& cfg, const Corpus& corpus,
                        const PreparedModels& prepared, const std::filesystem::path& run_dir = {});

struct SweepPoint {
  double m_c = 0.0;
  std::optional<RunSummary> run;  // absent when training failed
  std::string error;
};

// One run per margin, in input order, sharing data and prepared models.
// Failed points are recorded and the sweep continues.
std::vector<SweepPoint> sweep_margin(const RunConfig& base, const std::vector<double>& margins, const Corpus& corpus,
                                     const PreparedModels& prepared, const std::filesystem::path& out_dir = {});
// Columns: m_c, dev_f1, test_f1, test_acc, test_auc, status.
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepPoint>& points);

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"full", "no-mcl", "no-dist", "no-filter"};
  return names;
}
// `base` with the ablation flag for `name` set.
RunConfig ablation_config(const RunConfig& base, const std::string& name);

std::vector<RunSummary> ablate(const RunConfig& base, const Corpus& corpus, const PreparedModels& prepared,
                               const std::filesystem::path& out_dir = {});
// Columns: run, disable_mcl, disable_dist, disable_filter, dev_f1, test_acc, test_f1, test_auc, separation.
void write_ablation_csv(const std::filesystem::path& path, const std::vector<RunSummary>& runs);

// Gradient check on the first `batch_size` training pairs of a small corpus
// drawn from cfg.data, with a freshly initialized student and frozen teacher.
GradCheckResult run_gradcheck(const RunConfig& cfg, std::size_t batch_size, const GradCheckOptions& opt);

// Key-value report of a selected evaluation, including the config hash.
std::string format_report(const MetricsReport& r, std::uint64_t config_hash);

}  // namespace flipdistill
