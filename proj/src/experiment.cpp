#include "flipdistill/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flipdistill/checkpoint.hpp"
#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"
#include "flipdistill/rng.hpp"

namespace flipdistill {

namespace fs = std::filesystem;

namespace {

const char* kSplits[] = {"train", "dev", "test"};

template <typename C>
auto& split_of(C& c, const std::string& s) {
  if (s == "train") return c.train;
  if (s == "dev") return c.dev;
  if (s == "test") return c.test;
  throw ParseError("unknown split '" + s + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt_auc(const std::optional<double>& v) { return v ? fmt(*v) : std::string{}; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

Corpus load_or_generate(const RunConfig& cfg, const fs::path& data_dir) {
  if (data_dir.empty()) {
    cfg.data.validate();
    return generate_synthetic_corpus(cfg.data);
  }
  Corpus c;
  const fs::path manifest_path = data_dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    const Manifest m = read_manifest(manifest_path);
    for (const auto& f : m.files) {
      const fs::path p = data_dir / f.path;
      if (file_hash(p) != f.content_hash) warn("dataset file " + p.string() + " does not match its manifest hash");
      split_of(c, f.split) = load_dataset(p);
    }
    return c;
  }
  for (const char* s : kSplits) split_of(c, s) = load_dataset(data_dir / (std::string(s) + ".jsonl"));
  return c;
}

Manifest write_corpus(const fs::path& dir, const Corpus& corpus, const RunConfig& cfg) {
  fs::create_directories(dir);
  Manifest m;
  m.config_text = to_config_text(cfg);
  m.config_hash = config_hash(cfg);
  for (const char* s : kSplits) {
    const std::string name = std::string(s) + ".jsonl";
    const auto& examples = split_of(corpus, s);
    write_dataset(dir / name, examples);
    m.files.push_back({s, name, examples.size(), file_hash(dir / name)});
  }
  write_manifest(dir / "manifest.json", m);
  return m;
}

PreparedModels prepare_models(const RunConfig& cfg, const Corpus& corpus, bool with_teacher) {
  auto student_rng = make_stream(cfg.model.seed, "student");
  PreparedModels out{StudentTransformer(cfg.model, student_rng), std::nullopt};
  out.base_lm_loss = pretrain_student_base(out.student, corpus.train, cfg.train);
  if (with_teacher) {
    auto teacher_rng = make_stream(cfg.model.seed, "teacher");
    out.teacher.emplace(cfg.model, teacher_rng);
    out.teacher_loss = prefit_teacher(*out.teacher, corpus.train, cfg.train);
  }
  return out;
}

RunSummary run_training(const std::string& name, const RunConfig& cfg, const Corpus& corpus,
                        const PreparedModels& prepared, const fs::path& run_dir) {
  cfg.validate();
  if (cfg.train.uses_teacher() && !prepared.teacher) throw ConfigError("run " + name + " needs a teacher");
  StudentTransformer model = prepared.student.clone();

  TrainIo io;
  io.config_text = to_config_text(cfg);
  if (!run_dir.empty()) {
    fs::create_directories(run_dir / "checkpoints");
    write_text(run_dir / "config.resolved", io.config_text);
    io.metrics_csv = run_dir / "metrics.csv";
    io.checkpoint_dir = run_dir / "checkpoints";
  }

  RunSummary s;
  s.name = name;
  s.config = cfg;
  s.result = train(model, prepared.teacher ? &*prepared.teacher : nullptr, corpus, cfg.train, io);
  s.selected = select_and_average_checkpoints(s.result.checkpoints, static_cast<std::size_t>(cfg.train.top_k));
  const std::size_t best = s.selected.steps.front();
  for (const auto& ck : s.result.checkpoints) {
    if (ck.step == best) {
      restore(model.trainable_parameters(), ck.values);
      break;
    }
  }
  s.histogram = export_score_histogram(model, corpus.test, static_cast<std::size_t>(cfg.train.histogram_bins));
  if (!run_dir.empty()) write_histogram_csv(run_dir / "histogram.csv", s.histogram);
  return s;
}

std::vector<SweepPoint> sweep_margin(const RunConfig& base, const std::vector<double>& margins, const Corpus& corpus,
                                     const PreparedModels& prepared, const fs::path& out_dir) {
  std::vector<SweepPoint> points;
  for (double m : margins) {
    SweepPoint p;
    p.m_c = m;
    RunConfig cfg = base;
    cfg.train.m_c = m;
    const std::string name = "mc_" + fmt(m);
    try {
      p.run = run_training(name, cfg, corpus, prepared, out_dir.empty() ? fs::path{} : out_dir / name);
    } catch (const std::exception& e) {
      p.error = e.what();
      warn("sweep point m_c=" + fmt(m) + " failed: " + p.error);
    }
    points.push_back(std::move(p));
  }
  return points;
}

void write_sweep_csv(const fs::path& path, const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  out << "m_c,dev_f1,test_f1,test_acc,test_auc,status\n";
  for (const auto& p : points) {
    out << fmt(p.m_c) << ',';
    if (p.run) {
      const auto& sel = p.run->selected;
      out << fmt(sel.dev.f1) << ',' << fmt(sel.test.f1) << ',' << fmt(sel.test.accuracy) << ','
          << fmt_auc(sel.test.auc) << ",ok\n";
    } else {
      std::string why = p.error;
      std::replace(why.begin(), why.end(), ',', ';');
      std::replace(why.begin(), why.end(), '\n', ' ');
      out << ",,,,failed: " << why << '\n';
    }
  }
  write_text(path, out.str());
}

RunConfig ablation_config(const RunConfig& base, const std::string& name) {
  RunConfig cfg = base;
  if (name == "full") return cfg;
  if (name == "no-mcl") {
    cfg.train.disable_mcl = true;
  } else if (name == "no-dist") {
    cfg.train.disable_dist = true;
  } else if (name == "no-filter") {
    cfg.train.disable_filter = true;
  } else {
    throw ConfigError("unknown ablation '" + name + "'");
  }
  return cfg;
}

std::vector<RunSummary> ablate(const RunConfig& base, const Corpus& corpus, const PreparedModels& prepared,
                               const fs::path& out_dir) {
  std::vector<RunSummary> runs;
  for (const auto& name : ablation_names()) {
    runs.push_back(run_training(name, ablation_config(base, name), corpus, prepared,
                                out_dir.empty() ? fs::path{} : out_dir / name));
  }
  return runs;
}

void write_ablation_csv(const fs::path& path, const std::vector<RunSummary>& runs) {
  std::ostringstream out;
  out << "run,disable_mcl,disable_dist,disable_filter,dev_f1,test_acc,test_f1,test_auc,separation\n";
  for (const auto& r : runs) {
    const auto& t = r.config.train;
    out << r.name << ',' << t.disable_mcl << ',' << t.disable_dist << ',' << t.disable_filter << ','
        << fmt(r.selected.dev.f1) << ',' << fmt(r.selected.test.accuracy) << ',' << fmt(r.selected.test.f1) << ','
        << fmt_auc(r.selected.test.auc) << ',' << fmt(r.histogram.separation) << '\n';
  }
  write_text(path, out.str());
}

GradCheckResult run_gradcheck(const RunConfig& cfg, std::size_t batch_size, const GradCheckOptions& opt) {
  cfg.validate();
  if (batch_size < 2) throw ConfigError("gradcheck needs a batch of at least 2 pairs");
  SyntheticCorpusConfig small = cfg.data;
  small.n_examples = std::max<int>(static_cast<int>(batch_size) * 4, 60);
  const Corpus corpus = generate_synthetic_corpus(small);
  if (corpus.train.size() < batch_size) throw ConfigError("gradcheck corpus is smaller than the batch");

  auto teacher_rng = make_stream(cfg.model.seed, "teacher");
  TeacherEncoder teacher(cfg.model, teacher_rng);
  teacher.freeze();
  auto student_rng = make_stream(cfg.model.seed, "student");
  StudentTransformer student(cfg.model, student_rng);

  const std::span<const PairExample> batch(corpus.train.data(), batch_size);
  const TeacherCache cache = encode_with_teacher(teacher, batch);
  std::vector<std::size_t> index(batch_size);
  for (std::size_t n = 0; n < batch_size; ++n) index[n] = n;
  StepInputs in{batch, index, pair_label_matrix(batch, index, cfg.train.same_cluster_positives), &cache, {}, true};
  return grad_check(student, in, cfg.train, opt);
}

std::string format_report(const MetricsReport& r, std::uint64_t hash) {
  char h[32];
  std::snprintf(h, sizeof h, "%016" PRIx64, hash);
  std::ostringstream out;
  out << "config_hash " << h << '\n'
      << "split " << r.split << '\n'
      << "step " << r.step << '\n'
      << "accuracy " << fmt(r.accuracy) << '\n'
      << "f1 " << fmt(r.f1) << '\n'
      << "auc " << (r.auc ? fmt(*r.auc) : std::string("undefined")) << '\n'
      << "bce " << fmt(r.loss.l_sup) << '\n';
  return out.str();
}

}  // namespace flipdistill
