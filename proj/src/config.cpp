#include "flipdistill/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flipdistill/errors.hpp"
#include "flipdistill/rng.hpp"

namespace flipdistill {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty()) {
    throw ConfigError("invalid value '" + text + "' for " + key);
  }
  return v;
}

std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}
std::string format(int v) { return std::to_string(v); }
std::string format(std::uint64_t v) { return std::to_string(v); }
std::string format(bool v) { return v ? "true" : "false"; }
std::string format(Projection v) { return to_string(v); }
std::string format(OptimizerKind v) { return to_string(v); }
std::string format(NegativeMargin v) { return to_string(v); }

void parse_into(const std::string& key, const std::string& text, double& out) { out = parse_number<double>(key, text); }
void parse_into(const std::string& key, const std::string& text, int& out) { out = parse_number<int>(key, text); }
void parse_into(const std::string& key, const std::string& text, std::uint64_t& out) {
  out = parse_number<std::uint64_t>(key, text);
}
void parse_into(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1") out = true;
  else if (text == "false" || text == "0") out = false;
  else throw ConfigError("invalid boolean '" + text + "' for " + key);
}
void parse_into(const std::string&, const std::string& text, Projection& out) { out = parse_projection(text); }
void parse_into(const std::string&, const std::string& text, OptimizerKind& out) { out = parse_optimizer(text); }
void parse_into(const std::string&, const std::string& text, NegativeMargin& out) {
  out = parse_negative_margin(text);
}

template <class Section, class T>
ConfigField field(const char* section, Section RunConfig::*sec, const char* key, T Section::*member,
                  const char* help) {
  const std::string full = std::string(section) + "." + key;
  return ConfigField{section, key, help, [sec, member](const RunConfig& c) { return format(c.*sec.*member); },
                     [sec, member, full](RunConfig& c, const std::string& v) { parse_into(full, v, c.*sec.*member); }};
}

std::vector<ConfigField> build_fields() {
  using D = SyntheticCorpusConfig;
  using M = ModelConfig;
  using T = TrainConfig;
  constexpr auto d = &RunConfig::data;
  constexpr auto m = &RunConfig::model;
  constexpr auto t = &RunConfig::train;
  return {
      field("data", d, "vocab_size", &D::vocab_size, "token ids available to the generator"),
      field("data", d, "n_clusters", &D::n_clusters, "topical clusters"),
      field("data", d, "family_size", &D::family_size, "clusters per family sharing topic tokens"),
      field("data", d, "key_concepts", &D::key_concepts, "cluster-specific concepts"),
      field("data", d, "topic_concepts", &D::topic_concepts, "family-shared concepts"),
      field("data", d, "synonyms", &D::synonyms, "token ids per concept"),
      field("data", d, "templates_per_cluster", &D::templates_per_cluster, "templates per cluster across splits"),
      field("data", d, "min_template_len", &D::min_template_len, "shortest template"),
      field("data", d, "max_template_len", &D::max_template_len, "longest template"),
      field("data", d, "key_fraction", &D::key_fraction, "chance a template slot is a key concept"),
      field("data", d, "n_examples", &D::n_examples, "pairs across all splits"),
      field("data", d, "dev_fraction", &D::dev_fraction, "share of pairs and templates for dev"),
      field("data", d, "test_fraction", &D::test_fraction, "share of pairs and templates for test"),
      field("data", d, "positive_ratio", &D::positive_ratio, "fraction of positive pairs"),
      field("data", d, "cross_template_rate", &D::cross_template_rate, "positives built from two templates"),
      field("data", d, "synonym_swap_rate", &D::synonym_swap_rate, "paraphrase: synonym swap rate"),
      field("data", d, "shuffle_rate", &D::shuffle_rate, "paraphrase: adjacent swap rate"),
      field("data", d, "drop_rate", &D::drop_rate, "paraphrase: token drop rate"),
      field("data", d, "negative_hardness", &D::negative_hardness, "chance a negative comes from a sibling cluster"),
      field("data", d, "label_noise", &D::label_noise, "chance a label is flipped"),
      field("data", d, "max_len", &D::max_len, "maximum tokens per text"),
      field("data", d, "seed", &D::seed, "corpus seed"),
      field("model", m, "vocab_size", &M::vocab_size, "model vocabulary size"),
      field("model", m, "student_dim", &M::student_dim, "student width k = d"),
      field("model", m, "student_layers", &M::student_layers, "student decoder blocks"),
      field("model", m, "student_heads", &M::student_heads, "student attention heads"),
      field("model", m, "ffn_mult", &M::ffn_mult, "feed-forward expansion"),
      field("model", m, "teacher_dim", &M::teacher_dim, "teacher width, equal to the LoRA rank"),
      field("model", m, "teacher_layers", &M::teacher_layers, "teacher encoder layers"),
      field("model", m, "teacher_heads", &M::teacher_heads, "teacher attention heads"),
      field("model", m, "max_positions", &M::max_positions, "student positional table size"),
      field("model", m, "lora_dropout", &M::lora_dropout, "dropout on adapter inputs"),
      field("model", m, "lora_init_std", &M::lora_init_std, "Gaussian init std for A and B"),
      field("model", m, "rep_projection", &M::rep_projection, "adapter pooled for representations (q, k, v, o)"),
      field("model", m, "pool_post_dropout", &M::pool_post_dropout, "pool z after adapter dropout in training"),
      field("model", m, "seed", &M::seed, "initialization seed"),
      field("train", t, "learning_rate", &T::learning_rate, "peak learning rate"),
      field("train", t, "warmup_ratio", &T::warmup_ratio, "fraction of steps with linear warmup"),
      field("train", t, "weight_decay", &T::weight_decay, "decoupled weight decay"),
      field("train", t, "grad_clip", &T::grad_clip, "clip every gradient component"),
      field("train", t, "grad_clip_min", &T::grad_clip_min, "lower clip bound"),
      field("train", t, "grad_clip_max", &T::grad_clip_max, "upper clip bound"),
      field("train", t, "batch_size", &T::batch_size, "pairs per batch"),
      field("train", t, "epochs", &T::epochs, "passes over the training split"),
      field("train", t, "evals_per_epoch", &T::evals_per_epoch, "evaluations and checkpoints per epoch"),
      field("train", t, "m_c", &T::m_c, "angular margin scale"),
      field("train", t, "theta", &T::theta, "noise-filter threshold"),
      field("train", t, "w_dist", &T::w_dist, "distillation loss weight"),
      field("train", t, "w_mcl", &T::w_mcl, "margin contrastive loss weight"),
      field("train", t, "seed", &T::seed, "batching and dropout seed"),
      field("train", t, "disable_mcl", &T::disable_mcl, "ablation: drop the margin contrastive loss"),
      field("train", t, "disable_dist", &T::disable_dist, "ablation: drop the distillation loss"),
      field("train", t, "disable_filter", &T::disable_filter, "ablation: keep every pair"),
      field("train", t, "optimizer", &T::optimizer, "adamw or sgd"),
      field("train", t, "adam_beta1", &T::adam_beta1, "first-moment decay"),
      field("train", t, "adam_beta2", &T::adam_beta2, "second-moment decay"),
      field("train", t, "adam_eps", &T::adam_eps, "denominator epsilon"),
      field("train", t, "negative_margin", &T::negative_margin, "negative margin angle: positive or own"),
      field("train", t, "same_cluster_positives", &T::same_cluster_positives, "label same-cluster cross pairs 1"),
      field("train", t, "top_k", &T::top_k, "checkpoints averaged for the report"),
      field("train", t, "histogram_bins", &T::histogram_bins, "score histogram bins"),
      field("train", t, "base_pretrain_epochs", &T::base_pretrain_epochs, "student base next-token pretraining epochs"),
      field("train", t, "base_pretrain_lr", &T::base_pretrain_lr, "student base pretraining learning rate"),
      field("train", t, "teacher_epochs", &T::teacher_epochs, "teacher contrastive pre-fit epochs"),
      field("train", t, "teacher_lr", &T::teacher_lr, "teacher pre-fit learning rate"),
      field("train", t, "teacher_temperature", &T::teacher_temperature, "teacher pre-fit softmax temperature"),
      field("train", t, "teacher_batch_size", &T::teacher_batch_size, "teacher pre-fit batch size"),
  };
}

}  // namespace

void RunConfig::set_seed(std::uint64_t seed) {
  data.seed = seed;
  model.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  data.validate();
  model.validate();
  train.validate();
  if (model.vocab_size < data.vocab_size) {
    throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) + " is below data.vocab_size " +
                      std::to_string(data.vocab_size));
  }
  if (model.max_positions < 2 * data.max_len + 3) {
    throw ConfigError("model.max_positions must hold two texts of data.max_len plus three special tokens");
  }
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = build_fields();
  return fields;
}

const ConfigField* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : config_fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::string section;
  std::size_t lineno = 0;
  std::istringstream is{std::string(text)};
  std::string raw;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", lineno);
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (section != "data" && section != "model" && section != "train") {
        throw ParseError("unknown section [" + section + "]", lineno);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key = value", lineno);
    if (section.empty()) throw ParseError("key outside of any section", lineno);
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    const auto* f = find_field(section, key);
    if (!f) throw ParseError("unknown key '" + key + "' in [" + section + "]", lineno);
    try {
      f->set(base, value);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("config file not found: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(to_config_text(cfg)); }

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' lacks '='");
  const auto name = trim(assignment.substr(0, eq));
  const std::string value(trim(assignment.substr(eq + 1)));
  const auto dot = name.find('.');
  if (dot != std::string_view::npos) {
    const auto* f = find_field(name.substr(0, dot), name.substr(dot + 1));
    if (!f) throw ConfigError("unknown config key '" + std::string(name) + "'");
    f->set(cfg, value);
    return;
  }
  const ConfigField* match = nullptr;
  for (const auto& f : config_fields()) {
    if (f.key != name) continue;
    if (match) throw ConfigError("ambiguous key '" + std::string(name) + "'; qualify it with a section");
    match = &f;
  }
  if (!match) throw ConfigError("unknown config key '" + std::string(name) + "'");
  match->set(cfg, value);
}

std::uint64_t env_seed(std::uint64_t fallback) {
  const char* v = std::getenv("FLIPDISTILL_SEED");
  if (!v || !*v) return fallback;
  return parse_number<std::uint64_t>("FLIPDISTILL_SEED", v);
}

}  // namespace flipdistill
