// flipdistill command-line entry point.
//
// Every command resolves its configuration in this order: built-in
// defaults, FLIPDISTILL_SEED, --config file, --seed, per-field flags,
// then --set overrides.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "flipdistill/checkpoint.hpp"
#include "flipdistill/errors.hpp"
#include "flipdistill/experiment.hpp"
#include "flipdistill/log.hpp"

namespace fs = std::filesystem;
using namespace flipdistill;

namespace {

std::string kebab(std::string s) {
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

bool key_is_shared(const std::string& key) {
  int n = 0;
  for (const auto& f : config_fields()) n += f.key == key;
  return n > 1;
}

bool is_bool_field(const ConfigField& f) {
  const std::string v = f.get(RunConfig{});
  return v == "true" || v == "false";
}

// Config flags shared by every command.
struct ConfigOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::map<const ConfigField*, std::string> fields;
  std::vector<std::string> overrides;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "config file with [data], [model] and [train] sections");
    cmd.add_option("--seed", seed, "seed for data, model and training (fallback: FLIPDISTILL_SEED)");
    cmd.add_option("--set", overrides, "section.key=value override, repeatable");
    const RunConfig defaults;
    for (const auto& f : config_fields()) {
      const std::string name = "--" + (key_is_shared(f.key) ? f.section + "-" : std::string{}) + kebab(f.key);
      const std::string help = "[" + f.section + "] " + f.help;
      if (is_bool_field(f)) {
        cmd.add_flag_function(
               name, [this, p = &f](std::int64_t n) { fields[p] = n > 0 ? "true" : "false"; }, help)
            ->default_str(f.get(defaults))
            ->group("Config");
      } else {
        cmd.add_option_function<std::string>(
               name, [this, p = &f](const std::string& v) { fields[p] = v; }, help)
            ->default_str(f.get(defaults))
            ->group("Config");
      }
    }
  }

  RunConfig resolve() const {
    RunConfig cfg;
    cfg.set_seed(env_seed(cfg.train.seed));
    if (!config_path.empty()) cfg = load_config(config_path, cfg);
    if (seed) cfg.set_seed(*seed);
    for (const auto& [f, v] : fields) f->set(cfg, v);
    for (const auto& o : overrides) apply_override(cfg, o);
    cfg.validate();
    return cfg;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw std::runtime_error("cannot write " + path.string());
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string auc_text(const std::optional<double>& a) { return a ? num(*a) : "n/a"; }

void print_summary(const RunSummary& s) {
  const auto& sel = s.selected;
  std::cout << s.name << ": steps " << s.result.steps << ", top-" << sel.steps.size() << " checkpoints";
  for (auto st : sel.steps) std::cout << ' ' << st;
  std::cout << "\n  dev  f1 " << num(sel.dev.f1) << " acc " << num(sel.dev.accuracy) << " auc " << auc_text(sel.dev.auc)
            << "\n  test f1 " << num(sel.test.f1) << " acc " << num(sel.test.accuracy) << " auc "
            << auc_text(sel.test.auc) << "\n  separation " << num(s.histogram.separation) << '\n';
}

bool summary_finite(const RunSummary& s) {
  return std::isfinite(s.selected.test.f1) && std::isfinite(s.selected.dev.f1) && std::isfinite(s.histogram.separation);
}

std::vector<double> parse_margins(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad margin '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty margin list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flipped knowledge distillation on synthetic text matching"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(44);

  ConfigOptions gen_opts, train_opts, eval_opts, grad_opts, sweep_opts, ablate_opts;

  auto* gen = app.add_subcommand("gen", "generate train/dev/test splits and a manifest");
  fs::path gen_out = "data";
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen_opts.attach(*gen);

  auto* train_cmd = app.add_subcommand("train", "train adapters and write runs/<name>/");
  fs::path train_data, runs_root = "runs";
  std::string run_name = "train";
  train_cmd->add_option("--data", train_data, "dataset directory from gen (default: generate in memory)");
  train_cmd->add_option("--runs", runs_root, "root directory for run outputs")->capture_default_str();
  train_cmd->add_option("--name", run_name, "run name")->capture_default_str();
  train_opts.attach(*train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  fs::path eval_ckpt, eval_data, eval_report;
  std::string eval_split = "test";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory (default: regenerate from the checkpoint config)");
  eval_cmd->add_option("--split", eval_split, "train, dev or test")
      ->check(CLI::IsMember({"train", "dev", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--report", eval_report, "report path (default: <checkpoint>.<split>.report)");

  auto* grad_cmd = app.add_subcommand("gradcheck", "compare tape gradients with central differences");
  std::string grad_loss = "all";
  std::size_t grad_batch = 3;
  GradCheckOptions gopt;
  double grad_tol = 1e-4;
  grad_cmd->add_option("--loss", grad_loss, "loss subset: all, sup, dist, mcl")
      ->check(CLI::IsMember({"all", "sup", "dist", "mcl"}))
      ->capture_default_str();
  grad_cmd->add_option("--batch", grad_batch, "pairs in the batch")->capture_default_str();
  grad_cmd->add_option("--coordinates", gopt.coordinates, "sampled parameter coordinates")->capture_default_str();
  grad_cmd->add_option("--step", gopt.h, "finite-difference step")->capture_default_str();
  grad_cmd->add_option("--tolerance", grad_tol, "maximum relative error")->capture_default_str();
  grad_cmd->add_flag("--zero-phi", gopt.zero_phi, "filter every pair out");
  grad_opts.attach(*grad_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep-margin", "train once per margin and write sweep.csv");
  std::string margins = "0,0.02,0.04,0.06,0.08,0.1";
  fs::path sweep_out = "runs/sweep-margin", sweep_data;
  sweep_cmd->add_option("--margins", margins, "comma-separated m_c values")->capture_default_str();
  sweep_cmd->add_option("--out", sweep_out, "output directory")->capture_default_str();
  sweep_cmd->add_option("--data", sweep_data, "dataset directory (default: generate in memory)");
  sweep_opts.attach(*sweep_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "train full, no-mcl, no-dist and no-filter runs");
  fs::path ablate_out = "runs/ablate", ablate_data;
  ablate_cmd->add_option("--out", ablate_out, "output directory")->capture_default_str();
  ablate_cmd->add_option("--data", ablate_data, "dataset directory (default: generate in memory)");
  ablate_opts.attach(*ablate_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const RunConfig cfg = gen_opts.resolve();
      const Corpus corpus = load_or_generate(cfg);
      const Manifest m = write_corpus(gen_out, corpus, cfg);
      for (const auto& f : m.files) std::cout << (gen_out / f.path).string() << ": " << f.count << " pairs\n";
      return 0;
    }

    if (train_cmd->parsed()) {
      const RunConfig cfg = train_opts.resolve();
      const Corpus corpus = load_or_generate(cfg, train_data);
      const PreparedModels prepared = prepare_models(cfg, corpus, cfg.train.uses_teacher());
      const RunSummary s = run_training(run_name, cfg, corpus, prepared, runs_root / run_name);
      print_summary(s);
      return summary_finite(s) ? 0 : 1;
    }

    if (eval_cmd->parsed()) {
      const Checkpoint ckpt = read_checkpoint(eval_ckpt);
      const RunConfig cfg = parse_config(ckpt.config_text);
      auto rng = make_stream(cfg.model.seed, "student");
      StudentTransformer model(cfg.model, rng);
      load_into(ckpt, model.parameters(), ckpt.config_hash);
      Corpus corpus = load_or_generate(cfg, eval_data);
      const auto& examples = eval_split == "train" ? corpus.train : eval_split == "dev" ? corpus.dev : corpus.test;
      std::size_t step = 0;
      std::sscanf(eval_ckpt.stem().string().c_str(), "step-%zu", &step);
      const MetricsReport r = evaluate(model, examples, eval_split, step);
      const std::string text = format_report(r, ckpt.config_hash);
      std::cout << text;
      if (eval_report.empty()) eval_report = eval_ckpt.string() + "." + eval_split + ".report";
      write_file(eval_report, text);
      return std::isfinite(r.loss.l_sup) ? 0 : 1;
    }

    if (grad_cmd->parsed()) {
      const RunConfig cfg = grad_opts.resolve();
      gopt.losses = parse_loss_subset(grad_loss);
      gopt.seed = cfg.train.seed;
      const GradCheckResult r = run_gradcheck(cfg, grad_batch, gopt);
      const bool ok = std::isfinite(r.max_rel_error) && r.max_rel_error <= grad_tol;
      std::printf("gradcheck loss=%s coordinates=%zu max_rel_error=%.3e max_abs_grad=%.3e %s\n", grad_loss.c_str(),
                  r.coordinates, r.max_rel_error, r.max_abs_grad, ok ? "PASS" : "FAIL");
      return ok ? 0 : 1;
    }

    if (sweep_cmd->parsed()) {
      const RunConfig cfg = sweep_opts.resolve();
      const auto values = parse_margins(margins);
      const Corpus corpus = load_or_generate(cfg, sweep_data);
      const PreparedModels prepared = prepare_models(cfg, corpus, cfg.train.uses_teacher());
      const auto points = sweep_margin(cfg, values, corpus, prepared, sweep_out);
      write_sweep_csv(sweep_out / "sweep.csv", points);
      bool ok = true;
      for (const auto& p : points) {
        if (p.run) {
          std::cout << "m_c " << p.m_c << ": dev f1 " << num(p.run->selected.dev.f1) << ", test f1 "
                    << num(p.run->selected.test.f1) << '\n';
          ok = ok && summary_finite(*p.run);
        } else {
          std::cout << "m_c " << p.m_c << ": failed: " << p.error << '\n';
          ok = false;
        }
      }
      return ok ? 0 : 1;
    }

    if (ablate_cmd->parsed()) {
      const RunConfig cfg = ablate_opts.resolve();
      const Corpus corpus = load_or_generate(cfg, ablate_data);
      const PreparedModels prepared = prepare_models(cfg, corpus, true);
      const auto runs = ablate(cfg, corpus, prepared, ablate_out);
      write_ablation_csv(ablate_out / "ablation.csv", runs);
      bool ok = true;
      std::printf("%-10s %8s %8s %8s %8s %10s\n", "run", "dev_f1", "test_acc", "test_f1", "test_auc", "separation");
      for (const auto& r : runs) {
        std::printf("%-10s %8.4f %8.4f %8.4f %8s %10.4f\n", r.name.c_str(), r.selected.dev.f1,
                    r.selected.test.accuracy, r.selected.test.f1, auc_text(r.selected.test.auc).c_str(),
                    r.histogram.separation);
        ok = ok && summary_finite(r);
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
