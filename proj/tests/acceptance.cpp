// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "test_util.hpp"
#include "flipdistill/experiment.hpp"
#include "flipdistill/losses.hpp"
#include "flipdistill/metrics.hpp"
#include "flipdistill/models.hpp"
#include "flipdistill/rng.hpp"
#include "flipdistill/vocab.hpp"

namespace fd = flipdistill;
namespace fs = std::filesystem;
using fd::Tensor;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr std::size_t kGradBatch = 3;
constexpr double kDistTolerance = 1e-12;
constexpr int kSeeds = 5;
constexpr int kSeedsNeeded = 3;
constexpr double kTrainingSeconds = 2.0 * 3600.0;
const std::vector<double> kRegionMargins{0.04, 0.06, 0.08};

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor square(std::size_t b, std::vector<double> v) { return Tensor({b, b}, std::move(v)); }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Small synthetic task used for every training criterion.
fd::RunConfig toy_config(std::uint64_t seed) {
  fd::RunConfig cfg;
  cfg.data.n_clusters = 12;
  cfg.data.label_noise = 0.1;
  cfg.data.n_examples = 7200;
  cfg.train.learning_rate = 1e-3;
  cfg.train.evals_per_epoch = 2;
  cfg.train.epochs = 3;
  cfg.set_seed(seed);
  cfg.validate();
  return cfg;
}

fd::RunConfig sup_only(fd::RunConfig cfg) {
  cfg.train.disable_mcl = true;
  cfg.train.disable_dist = true;
  return cfg;
}

fd::RunConfig with_margin(fd::RunConfig cfg, double m_c) {
  cfg.train.m_c = m_c;
  return cfg;
}

Outcome gradcheck() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string parts;
  for (auto subset : {fd::LossSubset::kAll, fd::LossSubset::kSup, fd::LossSubset::kDist, fd::LossSubset::kMcl}) {
    fd::GradCheckOptions opt;
    opt.losses = subset;
    const auto r = fd::run_gradcheck(fd::RunConfig{}, kGradBatch, opt);
    worst = std::max(worst, std::isfinite(r.max_rel_error) ? r.max_rel_error : INFINITY);
    parts += " " + fd::to_string(subset) + "=" + fmt("%.2e", r.max_rel_error);
  }
  const double elapsed = seconds_since(t0);
  return {worst <= kGradTolerance && elapsed < kGradSeconds,
          "max rel err" + parts + ", " + fmt("%.1f", elapsed) + " s"};
}

Outcome filter_truth_table() {
  std::vector<double> alphas;
  for (int n = 0; n <= 10; ++n) alphas.push_back(n / 10.0);
  for (double a = -1.0; a < 0.0; a += 0.25) alphas.push_back(a);
  std::size_t mismatches = 0, checked = 0;
  for (double theta : {0.3, 0.5, 0.7}) {
    for (int y : {0, 1}) {
      for (double a : alphas) {
        const double got = fd::filter_mask(square(1, {a}), square(1, {double(y)}), theta).at(0, 0);
        mismatches += got != fdtest::phi_reference(a, y, theta);
        ++checked;
      }
    }
  }
  return {mismatches == 0, std::to_string(checked) + " cases, " + std::to_string(mismatches) + " mismatches"};
}

Outcome mcl_properties() {
  fdtest::WarningCounter quiet;
  auto rng = fd::make_stream(5, "mcl-zero");
  std::size_t unequal = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 + static_cast<std::size_t>(trial % 7);
    auto r = fdtest::random_batch(rng, b);
    const double got =
        fd::mcl_loss(square(b, r.theta_l), square(b, r.theta_s), square(b, r.phi), square(b, r.y), 0.0).item();
    unequal += got != fdtest::margin_free_reference(r.theta_l, r.phi, r.y, b);
  }

  auto theta = square(3, {0.3, 1.0, 2.0, 1.5, 0.4, 0.9, 2.2, 1.1, 0.5});
  auto eye = square(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const double no_negatives = fd::mcl_loss(theta, theta, eye, eye, 0.06).item();

  auto mono = fd::make_stream(7, "mcl-monotone");
  std::uniform_real_distribution<double> margin(0.0, 0.2), ts(0.05, std::numbers::pi / 2);
  std::size_t violations = 0, configs = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b = 2 + static_cast<std::size_t>(trial % 5);
    auto r = fdtest::random_batch(mono, b, 0.4, std::numbers::pi - 0.4);
    for (auto& t : r.theta_s) t = ts(mono);
    double m1 = margin(mono), m2 = margin(mono);
    if (m1 > m2) std::swap(m1, m2);
    for (auto mode : {fd::NegativeMargin::kPositivePairAngle, fd::NegativeMargin::kOwnAngle}) {
      auto loss = [&](double m) {
        return fd::mcl_loss(square(b, r.theta_l), square(b, r.theta_s), square(b, r.phi), square(b, r.y), m, mode)
            .item();
      };
      violations += loss(m1) > loss(m2);
    }
    ++configs;
  }
  return {unequal == 0 && no_negatives == 0.0 && violations == 0 && configs == 1000,
          "m_c=0 mismatches " + std::to_string(unequal) + "/200, no-negative loss " + fmt("%g", no_negatives) +
              ", monotonicity violations " + std::to_string(violations) + " over " + std::to_string(configs) +
              " configs"};
}

Outcome distillation_oracle() {
  auto rng = fd::make_stream(11, "dist-oracle");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> size(1, 8);
  std::bernoulli_distribution keep(0.6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto b = static_cast<std::size_t>(size(rng));
    std::vector<double> as(b * b), al(b * b), phi(b * b);
    for (std::size_t n = 0; n < b * b; ++n) {
      as[n] = u(rng);
      al[n] = u(rng);
      phi[n] = keep(rng) ? 1.0 : 0.0;
    }
    fd::BatchMatrices m{square(b, as), square(b, al), square(b, std::vector<double>(b * b, 0.0)), square(b, phi)};
    const double got = fd::distillation_loss(m).item();
    worst = std::max(worst, std::isfinite(got) ? std::abs(got - fdtest::distillation_reference(as, al, phi)) : INFINITY);
  }
  return {worst <= kDistTolerance, "100 triples, max abs err " + fmt("%.2e", worst)};
}

Outcome zero_expansion_identity() {
  fd::ModelConfig cfg;
  auto rng = fd::make_stream(8, "student");
  fd::StudentTransformer s(cfg, rng);
  for (std::size_t l = 0; l < s.layers(); ++l) {
    for (auto p : {fd::Projection::kQuery, fd::Projection::kKey, fd::Projection::kValue, fd::Projection::kOutput}) {
      auto b = s.adapter(l, p).B.mutable_values();
      std::fill(b.begin(), b.end(), 0.0);
    }
  }
  auto prompts = fd::make_stream(8, "prompts");
  std::uniform_int_distribution<std::size_t> len(1, 12);
  std::uniform_int_distribution<int> tok(fd::vocab::kFirstContent, cfg.vocab_size - 1);
  auto tokens = [&] {
    std::vector<int> out(len(prompts));
    for (auto& t : out) t = tok(prompts);
    return out;
  };
  auto same = [](const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
  };
  int differing = 0;
  for (int n = 0; n < 50; ++n) {
    auto a = tokens();
    auto b = tokens();
    auto p = fd::make_match_prompt(a, b);
    auto with = s.forward(p.tokens);
    auto base = s.forward(p.tokens, fd::ForwardMode{false, nullptr, false});
    differing += !(same(with.logits, base.logits) && same(with.hidden, base.hidden));
  }
  return {differing == 0, "50 prompts, " + std::to_string(differing) + " differ from the base model"};
}

Outcome metric_oracles() {
  auto rng = fd::make_stream(21, "auc");
  std::uniform_int_distribution<int> size(2, 50), level(0, 9);
  std::uniform_real_distribution<double> u;
  std::bernoulli_distribution coin(0.5);
  std::size_t auc_bad = 0, f1_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;
      y[i] = coin(rng);
    }
    y[0] = 1;
    y[1] = 0;
    const auto auc = fd::roc_auc(s, y);
    auc_bad += !auc || *auc != fdtest::brute_force_auc(s, y);

    for (auto& v : s) v = u(rng);
    double tp = 0, fp = 0, fn = 0, correct = 0;
    for (int i = 0; i < n; ++i) {
      const int pred = s[i] >= 0.5;
      tp += pred && y[i];
      fp += pred && !y[i];
      fn += !pred && y[i];
      correct += pred == y[i];
    }
    const double denom = 2 * tp + fp + fn;
    f1_bad += fd::accuracy(s, y) != correct / n;
    f1_bad += fd::f1_score(s, y) != (denom > 0 ? 2 * tp / denom : 0.0);
  }
  return {auc_bad == 0 && f1_bad == 0, "200 sets, AUC mismatches " + std::to_string(auc_bad) +
                                           ", accuracy/F1 mismatches " + std::to_string(f1_bad)};
}

struct SeedRuns {
  std::map<std::string, fd::RunSummary> runs;
  double f1(const std::string& name) const { return runs.at(name).selected.test.f1; }
};

// full, the three ablations, sup-only and the margin points for one seed.
SeedRuns train_seed(std::uint64_t seed, const fs::path& out) {
  const auto cfg = toy_config(seed);
  const auto corpus = fd::load_or_generate(cfg);
  const auto prepared = fd::prepare_models(cfg, corpus);
  SeedRuns s;
  for (const auto& name : fd::ablation_names()) {
    s.runs.emplace(name, fd::run_training(name, fd::ablation_config(cfg, name), corpus, prepared, out / name));
  }
  s.runs.emplace("sup-only", fd::run_training("sup-only", sup_only(cfg), corpus, prepared, out / "sup-only"));
  for (double m : {0.0, 0.04, 0.08}) {
    const std::string name = "mc-" + fmt("%.2f", m);
    s.runs.emplace(name, fd::run_training(name, with_margin(cfg, m), corpus, prepared, out / name));
  }
  return s;
}

double margin_f1(const SeedRuns& s, double m) {
  if (m == toy_config(1).train.m_c) return s.f1("full");
  return s.f1("mc-" + fmt("%.2f", m));
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Outcome>> results;
  auto check = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, o);
  };

  check("1 gradient check", gradcheck);
  check("2 filter truth table", filter_truth_table);
  check("3 margin contrastive loss properties", mcl_properties);
  check("4 distillation loss oracle", distillation_oracle);
  check("5 zero expansion identity", zero_expansion_identity);
  check("6 metric oracles", metric_oracles);

  const fs::path root = fs::temp_directory_path() / "flipdistill_acceptance";
  fs::remove_all(root);
  std::vector<SeedRuns> seeds;
  double training_seconds = 0.0;
  std::string training_error;
  {
    fdtest::WarningCounter quiet;
    const auto t0 = Clock::now();
    try {
      for (int seed = 1; seed <= kSeeds; ++seed) {
        seeds.push_back(train_seed(static_cast<std::uint64_t>(seed), root / ("seed-" + std::to_string(seed))));
        const auto& s = seeds.back();
        std::printf("  seed %d test F1: full %.4f no-mcl %.4f no-dist %.4f no-filter %.4f sup-only %.4f | "
                    "m_c 0 %.4f 0.04 %.4f 0.08 %.4f | separation full %.4f sup-only %.4f\n",
                    seed, s.f1("full"), s.f1("no-mcl"), s.f1("no-dist"), s.f1("no-filter"), s.f1("sup-only"),
                    s.f1("mc-0.00"), s.f1("mc-0.04"), s.f1("mc-0.08"), s.runs.at("full").histogram.separation,
                    s.runs.at("sup-only").histogram.separation);
        std::fflush(stdout);
      }
    } catch (const std::exception& e) {
      training_error = e.what();
    }
    training_seconds = seconds_since(t0);
  }

  check("7 ablation and margin ordering", [&]() -> Outcome {
    if (!training_error.empty()) return {false, "training failed: " + training_error};
    int ablation_wins = 0, margin_wins = 0;
    for (const auto& s : seeds) {
      ablation_wins += s.f1("full") >= s.f1("no-mcl") && s.f1("full") >= s.f1("no-dist") &&
                       s.f1("full") >= s.f1("no-filter");
      double region = 0.0;
      for (double m : kRegionMargins) region += margin_f1(s, m);
      margin_wins += region / static_cast<double>(kRegionMargins.size()) >= s.f1("mc-0.00");
    }
    return {ablation_wins >= kSeedsNeeded && margin_wins >= kSeedsNeeded && training_seconds <= kTrainingSeconds,
            "full >= every ablation on " + std::to_string(ablation_wins) + "/" + std::to_string(kSeeds) +
                " seeds, margin region >= m_c=0 on " + std::to_string(margin_wins) + "/" + std::to_string(kSeeds) +
                " seeds, " + fmt("%.0f", training_seconds) + " s"};
  });

  check("8 score separation", [&]() -> Outcome {
    if (!training_error.empty()) return {false, "training failed: " + training_error};
    int wins = 0;
    for (const auto& s : seeds) wins += s.runs.at("full").histogram.separation > s.runs.at("sup-only").histogram.separation;
    return {wins >= kSeedsNeeded,
            "full > sup-only on " + std::to_string(wins) + "/" + std::to_string(kSeeds) + " seeds"};
  });

  check("9 reproducible metric logs", [&]() -> Outcome {
    if (seeds.empty()) return {false, "no seed-1 run: " + training_error};
    fdtest::WarningCounter quiet;
    const auto cfg = toy_config(1);
    const auto corpus = fd::load_or_generate(cfg);
    const auto prepared = fd::prepare_models(cfg, corpus);
    fd::run_training("full", cfg, corpus, prepared, root / "repeat");
    const auto a = slurp(root / "seed-1/full/metrics.csv");
    const auto b = slurp(root / "repeat/metrics.csv");
    return {!a.empty() && a == b, "metrics.csv " + std::to_string(a.size()) + " bytes, " +
                                      (a == b ? "identical" : "different")};
  });

  int failed = 0;
  for (const auto& [name, o] : results) failed += !o.pass;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
