#include "flipdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "flipdistill/checkpoint.hpp"
#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"
#include "flipdistill/rng.hpp"

namespace flipdistill {

namespace {

constexpr double kRelErrFloor = 1e-8;
constexpr double kMaskValue = -1e30;

bool all_finite(const std::vector<NamedTensor>& params) {
  for (const auto& p : params)
    for (double v : p.tensor.values())
      if (!std::isfinite(v)) return false;
  return true;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double mean_bce(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t n = 0; n < scores.size(); ++n) {
    const double p = std::clamp(scores[n], kProbEps, 1.0 - kProbEps);
    s += labels[n] == 1 ? std::log(p) : std::log(1.0 - p);
  }
  return -s / static_cast<double>(scores.size());
}

Tensor stack(const std::vector<Tensor>& rows) { return concat_rows(rows); }

}  // namespace

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdamW ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::kAdamW;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw or sgd)");
}

std::string to_string(NegativeMargin m) { return m == NegativeMargin::kPositivePairAngle ? "positive" : "own"; }

NegativeMargin parse_negative_margin(const std::string& s) {
  if (s == "positive") return NegativeMargin::kPositivePairAngle;
  if (s == "own") return NegativeMargin::kOwnAngle;
  throw ConfigError("unknown negative margin '" + s + "' (expected positive or own)");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("warmup_ratio must lie in [0, 1]");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (grad_clip && !(grad_clip_min < grad_clip_max)) throw ConfigError("grad_clip_min must be below grad_clip_max");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (evals_per_epoch < 1) throw ConfigError("evals_per_epoch must be >= 1");
  if (!(m_c >= 0.0)) throw ConfigError("m_c must be >= 0");
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("theta must lie in (0, 1)");
  if (!(w_dist >= 0.0) || !(w_mcl >= 0.0)) throw ConfigError("loss weights must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (histogram_bins < 1) throw ConfigError("histogram_bins must be >= 1");
  if (teacher_epochs < 0) throw ConfigError("teacher_epochs must be >= 0");
  if (!(teacher_lr >= 0.0)) throw ConfigError("teacher_lr must be >= 0");
  if (!(teacher_temperature > 0.0)) throw ConfigError("teacher_temperature must be positive");
  if (teacher_batch_size < 2) throw ConfigError("teacher_batch_size must be at least 2");
  if (base_pretrain_epochs < 0) throw ConfigError("base_pretrain_epochs must be >= 0");
  if (!(base_pretrain_lr >= 0.0)) throw ConfigError("base_pretrain_lr must be >= 0");
}

LrSchedule::LrSchedule(double peak, double warmup_ratio, std::size_t total_steps)
    : peak_(peak), warmup_(static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)))) {}

double LrSchedule::at(std::size_t step) const {
  if (warmup_ == 0 || step >= warmup_) return peak_;
  return peak_ * static_cast<double>(step) / static_cast<double>(warmup_);
}

Optimizer::Optimizer(std::vector<NamedTensor> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Optimizer::step(double lr) {
  ++t_;
  last_max_abs_grad_ = 0.0;
  const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t n = 0; n < params_.size(); ++n) {
    Tensor handle = params_[n].tensor;
    auto w = handle.mutable_values();
    auto g = handle.grad();
    auto& m = m_[n];
    auto& v = v_[n];
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g.empty() ? 0.0 : g[i];
      if (cfg_.grad_clip) gi = std::clamp(gi, cfg_.grad_clip_min, cfg_.grad_clip_max);
      last_max_abs_grad_ = std::max(last_max_abs_grad_, std::abs(gi));
      w[i] *= decay;
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        w[i] -= lr * gi;
        continue;
      }
      m[i] = cfg_.adam_beta1 * m[i] + (1.0 - cfg_.adam_beta1) * gi;
      v[i] = cfg_.adam_beta2 * v[i] + (1.0 - cfg_.adam_beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
    }
  }
}

MetricLog::MetricLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.empty()) return;
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream os(path_, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write metric log " + path_.string());
  os << header() << '\n';
}

std::string MetricLog::header() { return "step,split,acc,f1,auc,l_sup,l_dist,l_mcl,total,lr"; }

std::string MetricLog::format_row(const MetricsReport& r) {
  std::string s = std::to_string(r.step) + "," + r.split + ",";
  if (r.has_metrics) {
    s += fmt(r.accuracy) + "," + fmt(r.f1) + "," + (r.auc ? fmt(*r.auc) : std::string()) + ",";
  } else {
    s += ",,,";
  }
  s += fmt(r.loss.l_sup) + "," + fmt(r.loss.l_dist) + "," + fmt(r.loss.l_mcl) + "," + fmt(r.loss.total) + "," +
       fmt(r.lr);
  return s;
}

void MetricLog::append(const MetricsReport& r) {
  rows_.push_back(r);
  if (path_.empty()) return;
  std::ofstream os(path_, std::ios::app | std::ios::binary);
  if (!os) throw std::runtime_error("cannot append to metric log " + path_.string());
  os << format_row(r) << '\n';
}

TeacherCache encode_with_teacher(const TeacherEncoder& teacher, std::span<const PairExample> examples) {
  NoGradGuard guard;
  TeacherCache c;
  c.r_i.reserve(examples.size());
  c.r_j.reserve(examples.size());
  for (const auto& e : examples) {
    c.r_i.push_back(teacher.encode(e.text_i).detach());
    c.r_j.push_back(teacher.encode(e.text_j).detach());
  }
  return c;
}

namespace {

// Same-cluster pairs, or label-1 pairs when cluster ids are absent. Each
// pair gets a group id; pairs sharing a group are not negatives of each other.
void paraphrase_pairs(std::span<const PairExample> train, std::vector<std::size_t>& pairs, std::vector<int>& group) {
  for (std::size_t n = 0; n < train.size(); ++n) {
    const auto& e = train[n];
    if (e.cluster_i && e.cluster_j) {
      if (*e.cluster_i == *e.cluster_j) {
        pairs.push_back(n);
        group.push_back(*e.cluster_i);
      }
    } else if (e.label == 1) {
      pairs.push_back(n);
      group.push_back(-1 - static_cast<int>(n));
    }
  }
}

TrainConfig pretrain_optimizer_config(const TrainConfig& cfg) {
  TrainConfig c = cfg;
  c.weight_decay = 0.0;
  c.grad_clip = false;
  c.optimizer = OptimizerKind::kAdamW;
  return c;
}

}  // namespace

double pretrain_student_base(StudentTransformer& model, std::span<const PairExample> train, const TrainConfig& cfg) {
  std::vector<std::size_t> pairs;
  std::vector<int> group;
  paraphrase_pairs(train, pairs, group);
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const auto vocab = static_cast<std::size_t>(model.config().vocab_size);
  double last_epoch_loss = 0.0;
  if (cfg.base_pretrain_epochs > 0 && !pairs.empty()) {
    model.set_base_trainable(true);
    Optimizer opt(model.base_parameters(), pretrain_optimizer_config(cfg));
    auto rng = make_stream(cfg.seed, "base_pretrain");
    const ForwardMode mode{false, nullptr, false};
    for (int epoch = 0; epoch < cfg.base_pretrain_epochs; ++epoch) {
      std::shuffle(pairs.begin(), pairs.end(), rng);
      double total = 0.0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < pairs.size(); start += b) {
        const std::size_t end = std::min(start + b, pairs.size());
        std::vector<Tensor> doc_losses;
        for (std::size_t n = start; n < end; ++n) {
          const auto& e = train[pairs[n]];
          const auto prompt = make_match_prompt(e.text_i, e.text_j);
          const std::size_t t = prompt.tokens.size();
          const auto hidden = model.forward(prompt.tokens, mode).hidden;
          const auto log_probs = log(softmax(model.lm_logits(slice_rows(hidden, 0, t - 1)), 1), kProbEps);
          std::vector<std::size_t> targets;
          for (std::size_t pos = 0; pos + 1 < t; ++pos) {
            targets.push_back(pos * vocab + static_cast<std::size_t>(std::clamp(prompt.tokens[pos + 1], 0,
                                                                               static_cast<int>(vocab) - 1)));
          }
          doc_losses.push_back(reshape(mean(gather(log_probs, targets)), {1}));
        }
        auto loss = scale(mean(concat_rows(doc_losses)), -1.0);
        opt.zero_grad();
        backward(loss);
        opt.step(cfg.base_pretrain_lr);
        total += loss.item();
        ++steps;
      }
      last_epoch_loss = total / static_cast<double>(steps);
    }
    opt.zero_grad();
  }
  model.set_base_trainable(false);
  return last_epoch_loss;
}

double prefit_teacher(TeacherEncoder& teacher, std::span<const PairExample> train, const TrainConfig& cfg) {
  if (teacher.frozen()) throw ContractError("prefit_teacher: teacher is already frozen");
  std::vector<std::size_t> pairs;
  std::vector<int> group;
  paraphrase_pairs(train, pairs, group);
  const auto b = static_cast<std::size_t>(cfg.teacher_batch_size);
  double last_epoch_loss = 0.0;
  if (cfg.teacher_epochs > 0 && pairs.size() >= 2) {
    Optimizer opt(teacher.parameters(), pretrain_optimizer_config(cfg));
    auto rng = make_stream(cfg.seed, "teacher_prefit");
    const double inv_t = 1.0 / cfg.teacher_temperature;
    for (int epoch = 0; epoch < cfg.teacher_epochs; ++epoch) {
      std::vector<std::size_t> order(pairs.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      double total = 0.0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start + 2 <= order.size(); start += b) {
        const std::size_t end = std::min(start + b, order.size());
        const std::size_t n = end - start;
        std::vector<Tensor> ti, tj;
        std::vector<double> mask(n * n, 0.0);
        for (std::size_t a = 0; a < n; ++a) {
          const auto& e = train[pairs[order[start + a]]];
          ti.push_back(teacher.encode(e.text_i));
          tj.push_back(teacher.encode(e.text_j));
          for (std::size_t c = 0; c < n; ++c)
            if (a != c && group[order[start + a]] == group[order[start + c]]) mask[a * n + c] = kMaskValue;
        }
        auto logits = add(scale(cosine_matrix(stack(ti), stack(tj)), inv_t), Tensor({n, n}, std::move(mask)));
        std::vector<std::size_t> diag(n);
        for (std::size_t a = 0; a < n; ++a) diag[a] = a * n + a;
        auto rows = gather(log(softmax(logits, 1), kProbEps), diag);
        auto cols = gather(log(softmax(logits, 0), kProbEps), diag);
        auto loss = scale(add(mean(rows), mean(cols)), -0.5);
        opt.zero_grad();
        backward(loss);
        opt.step(cfg.teacher_lr);
        total += loss.item();
        ++steps;
      }
      last_epoch_loss = steps ? total / static_cast<double>(steps) : 0.0;
    }
  }
  teacher.freeze();
  return last_epoch_loss;
}

StepLoss compute_batch_loss(const StudentTransformer& model, const StepInputs& in, const TrainConfig& cfg,
                            const ForwardMode& mode) {
  const std::size_t b = in.index.size();
  if (in.y.rank() != 2 || in.y.dim(0) != b || in.y.dim(1) != b) {
    throw DimensionError("label matrix " + shape_str(in.y.shape()) + " does not match batch size " + std::to_string(b));
  }
  std::vector<Tensor> ri, rj, probs;
  std::vector<int> labels;
  for (auto n : in.index) {
    const auto& e = in.examples[n];
    const auto enc = model.encode_pair(make_match_prompt(e.text_i, e.text_j), mode);
    ri.push_back(enc.r_i);
    rj.push_back(enc.r_j);
    probs.push_back(p_yes(enc.logits));
    labels.push_back(e.label);
  }
  Tensor l_sup = in.include_sup ? supervised_loss(stack(probs), labels) : Tensor::scalar(0.0);
  Tensor l_dist = Tensor::scalar(0.0);
  Tensor l_mcl = Tensor::scalar(0.0);
  std::size_t filtered = 0, anchors = 0;
  if (cfg.uses_teacher()) {
    if (!in.teacher) throw ContractError("compute_batch_loss: distillation terms need teacher representations");
    std::vector<Tensor> ti, tj;
    for (auto n : in.index) {
      ti.push_back(in.teacher->r_i.at(n));
      tj.push_back(in.teacher->r_j.at(n));
    }
    BatchMatrices m;
    m.alpha_s = cosine_matrix(stack(ti), stack(tj));
    m.alpha_l = cosine_matrix(stack(ri), stack(rj));
    m.y = in.y;
    if (in.phi_override) m.phi = *in.phi_override;
    else if (cfg.disable_filter) m.phi = all_pass_mask(m.alpha_s.shape());
    else m.phi = filter_mask(m.alpha_s, m.y, cfg.theta);
    filtered = count_filtered(m.phi);
    if (cfg.dist_active()) l_dist = distillation_loss(m);
    if (cfg.mcl_active()) {
      anchors = count_mcl_anchors(m.phi, m.y);
      l_mcl = mcl_loss(angular(m.alpha_l), angular(m.alpha_s), m.phi, m.y, cfg.m_c, cfg.negative_margin);
    }
  }
  return {total_loss(l_sup, l_dist, l_mcl, cfg.weights(), filtered), anchors};
}

std::vector<int> labels_of(std::span<const PairExample> examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.label);
  return out;
}

std::vector<double> predict_scores(const StudentTransformer& model, std::span<const PairExample> examples) {
  NoGradGuard guard;
  std::vector<double> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    const auto prompt = make_match_prompt(e.text_i, e.text_j);
    const auto logits = model.forward(prompt.tokens).logits;
    out.push_back(p_yes_value(logits.at(0), logits.at(1)));
  }
  return out;
}

MetricsReport evaluate(const StudentTransformer& model, std::span<const PairExample> examples,
                       const std::string& split, std::size_t step) {
  const auto scores = predict_scores(model, examples);
  const auto labels = labels_of(examples);
  MetricsReport r;
  r.step = step;
  r.split = split;
  if (examples.empty()) warn("evaluating an empty " + split + " set");
  r.accuracy = accuracy(scores, labels);
  r.f1 = f1_score(scores, labels);
  r.auc = roc_auc(scores, labels);
  r.loss.l_sup = mean_bce(scores, labels);
  r.loss.total = r.loss.l_sup;
  return r;
}

TrainResult train(StudentTransformer& model, const TeacherEncoder* teacher, const Corpus& data,
                  const TrainConfig& cfg, const TrainIo& io) {
  cfg.validate();
  TeacherCache cache;
  if (cfg.uses_teacher()) {
    if (!teacher) throw ConfigError("distillation losses are enabled but no teacher was given");
    if (!teacher->frozen()) throw ContractError("train: teacher must be frozen");
    if (teacher->dim() != static_cast<std::size_t>(model.config().lora_rank())) {
      throw DimensionError("teacher dim " + std::to_string(teacher->dim()) + " differs from adapter rank " +
                           std::to_string(model.config().lora_rank()));
    }
    cache = encode_with_teacher(*teacher, data.train);
  }
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = data.train.size() / batch;
  if (cfg.epochs > 0 && per_epoch == 0) {
    throw ConfigError("training set of " + std::to_string(data.train.size()) + " examples is smaller than one batch");
  }
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(cfg.epochs);
  const LrSchedule schedule(cfg.learning_rate, cfg.warmup_ratio, total_steps);

  Optimizer opt(model.trainable_parameters(), cfg);
  MetricLog log(io.metrics_csv);
  TrainResult result;
  auto dropout_rng = make_stream(cfg.seed, "dropout");

  auto checkpoint = [&](std::size_t step, bool initial) {
    CheckpointRecord rec;
    rec.step = step;
    rec.initial = initial;
    rec.dev = evaluate(model, data.dev, "dev", step);
    rec.test = evaluate(model, data.test, "test", step);
    rec.dev.lr = rec.test.lr = schedule.at(step);
    log.append(rec.dev);
    log.append(rec.test);
    rec.values = snapshot(opt.params());
    if (!io.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%06zu.ckpt", step);
      rec.path = io.checkpoint_dir / name;
      save_checkpoint(rec.path, model.parameters(), io.config_text);
    }
    result.checkpoints.push_back(std::move(rec));
  };
  auto abort_run = [&](const std::string& why) {
    restore(opt.params(), result.checkpoints.back().values);
    result.log = log.rows();
    throw TrainingError(why + "; parameters restored to checkpoint at step " +
                        std::to_string(result.checkpoints.back().step));
  };

  checkpoint(0, true);
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = make_batches(data.train, batch, splitmix64(cfg.seed + static_cast<std::uint64_t>(epoch)),
                                      cfg.same_cluster_positives);
    std::vector<std::size_t> eval_at;
    for (int k = 1; k <= cfg.evals_per_epoch; ++k) {
      eval_at.push_back(std::max<std::size_t>(1, per_epoch * static_cast<std::size_t>(k) /
                                                     static_cast<std::size_t>(cfg.evals_per_epoch)));
    }
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const double lr = schedule.at(step);
      StepInputs in{data.train, batches[bi].index, batches[bi].y, cfg.uses_teacher() ? &cache : nullptr, {}, true};
      StepLoss sl;
      try {
        sl = compute_batch_loss(model, in, cfg, ForwardMode{true, &dropout_rng, true});
        opt.zero_grad();
        backward(sl.loss.total);
        opt.step(lr);
      } catch (const TrainingError& e) {
        abort_run(std::string(e.what()) + " at step " + std::to_string(step));
      } catch (const DomainError& e) {
        abort_run(std::string(e.what()) + " at step " + std::to_string(step));
      }
      ++step;
      if (!all_finite(opt.params())) abort_run("non-finite parameters after step " + std::to_string(step));
      MetricsReport row;
      row.step = step;
      row.split = "train";
      row.has_metrics = false;
      row.loss = sl.loss.breakdown;
      row.lr = lr;
      log.append(row);
      if (std::find(eval_at.begin(), eval_at.end(), bi + 1) != eval_at.end()) checkpoint(step, false);
    }
  }
  result.steps = step;
  result.log = log.rows();
  return result;
}

SelectedCheckpoints select_and_average_checkpoints(std::span<const CheckpointRecord> checkpoints, std::size_t k) {
  if (checkpoints.empty()) throw ContractError("select_and_average_checkpoints: no checkpoints");
  if (k == 0) throw ConfigError("k must be at least 1");
  std::vector<const CheckpointRecord*> pool;
  for (const auto& c : checkpoints)
    if (!c.initial) pool.push_back(&c);
  if (pool.empty())
    for (const auto& c : checkpoints) pool.push_back(&c);
  if (pool.size() < k) {
    warn("only " + std::to_string(pool.size()) + " checkpoints available for top-" + std::to_string(k) +
         " selection; averaging all of them");
    k = pool.size();
  }
  std::stable_sort(pool.begin(), pool.end(), [](const CheckpointRecord* a, const CheckpointRecord* b) {
    return a->dev.f1 > b->dev.f1;
  });
  pool.resize(k);

  auto average = [&](auto member, const std::string& split) {
    MetricsReport r;
    r.split = split;
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (const auto* c : pool) {
      const MetricsReport& m = c->*member;
      r.accuracy += m.accuracy;
      r.f1 += m.f1;
      r.loss.l_sup += m.loss.l_sup;
      r.loss.l_dist += m.loss.l_dist;
      r.loss.l_mcl += m.loss.l_mcl;
      r.loss.total += m.loss.total;
      if (m.auc) {
        auc_sum += *m.auc;
        ++auc_n;
      }
      r.step = std::max(r.step, m.step);
    }
    const auto n = static_cast<double>(pool.size());
    r.accuracy /= n;
    r.f1 /= n;
    r.loss.l_sup /= n;
    r.loss.l_dist /= n;
    r.loss.l_mcl /= n;
    r.loss.total /= n;
    if (auc_n) r.auc = auc_sum / static_cast<double>(auc_n);
    return r;
  };
  SelectedCheckpoints s;
  for (const auto* c : pool) s.steps.push_back(c->step);
  s.dev = average(&CheckpointRecord::dev, "dev");
  s.test = average(&CheckpointRecord::test, "test");
  return s;
}

ScoreHistogram export_score_histogram(const StudentTransformer& model, std::span<const PairExample> examples,
                                      std::size_t bins) {
  return score_histogram(predict_scores(model, examples), labels_of(examples), bins);
}

std::string to_string(LossSubset s) {
  switch (s) {
    case LossSubset::kAll: return "all";
    case LossSubset::kSup: return "sup";
    case LossSubset::kDist: return "dist";
    case LossSubset::kMcl: return "mcl";
  }
  return "all";
}

LossSubset parse_loss_subset(const std::string& s) {
  if (s == "all") return LossSubset::kAll;
  if (s == "sup") return LossSubset::kSup;
  if (s == "dist") return LossSubset::kDist;
  if (s == "mcl") return LossSubset::kMcl;
  throw ConfigError("unknown loss subset '" + s + "' (expected all, sup, dist or mcl)");
}

GradCheckResult grad_check(StudentTransformer& model, const StepInputs& batch, const TrainConfig& cfg,
                           const GradCheckOptions& opt) {
  TrainConfig c = cfg;
  StepInputs in = batch;
  switch (opt.losses) {
    case LossSubset::kAll: break;
    case LossSubset::kSup: c.disable_dist = c.disable_mcl = true; break;
    case LossSubset::kDist:
      c.disable_mcl = true;
      in.include_sup = false;
      break;
    case LossSubset::kMcl:
      c.disable_dist = true;
      in.include_sup = false;
      break;
  }
  if (opt.zero_phi) in.phi_override = Tensor::zeros({in.index.size(), in.index.size()});
  const ForwardMode mode{false, nullptr, true};

  auto params = model.trainable_parameters();
  for (auto& p : params) p.tensor.zero_grad();
  const auto loss = compute_batch_loss(model, in, c, mode).loss.total;
  backward(loss);

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].tensor.size(); ++i) coords.emplace_back(p, i);
  std::vector<std::pair<std::size_t, std::size_t>> chosen;
  auto rng = make_stream(opt.seed, "gradcheck");
  std::sample(coords.begin(), coords.end(), std::back_inserter(chosen), std::min(opt.coordinates, coords.size()), rng);

  GradCheckResult r;
  r.loss = loss.item();
  r.coordinates = chosen.size();
  struct SilenceWarnings {
    WarningSink previous = set_warning_sink([](const std::string&) {});
    ~SilenceWarnings() { set_warning_sink(std::move(previous)); }
  } silence;
  NoGradGuard guard;
  auto eval = [&] { return compute_batch_loss(model, in, c, mode).loss.total.item(); };
  for (auto [p, i] : chosen) {
    Tensor handle = params[p].tensor;
    auto w = handle.mutable_values();
    const double saved = w[i];
    w[i] = saved + opt.h;
    const double up = eval();
    w[i] = saved - opt.h;
    const double down = eval();
    w[i] = saved;
    const double numeric = (up - down) / (2.0 * opt.h);
    const double analytic = handle.has_grad() ? handle.grad()[i] : 0.0;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelErrFloor});
    r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / denom);
    r.max_abs_grad = std::max(r.max_abs_grad, std::abs(analytic));
  }
  return r;
}

}  // namespace flipdistill
