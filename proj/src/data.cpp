#include "flipdistill/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"
#include "flipdistill/rng.hpp"
#include "flipdistill/vocab.hpp"

namespace flipdistill {

using ojson = nlohmann::ordered_json;

namespace {

void require_rate(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

int split_templates(int per_cluster, double fraction) {
  return static_cast<int>(std::floor(per_cluster * fraction + 1e-9));
}

struct Layout {
  // concept -> synonym token ids
  std::vector<std::vector<int>> key;    // [cluster * key_concepts + q]
  std::vector<std::vector<int>> topic;  // [family * topic_concepts + q]
};

struct Template {
  int id = 0;
  int cluster = 0;
  std::vector<std::vector<int>> slots;  // synonym sets, canonical spelling first
};

class Generator {
 public:
  explicit Generator(const SyntheticCorpusConfig& cfg) : cfg_(cfg), rng_(make_stream(cfg.seed, "corpus")) {}

  Corpus run() {
    build_layout();
    build_templates();
    Corpus c;
    const auto n_dev = static_cast<std::size_t>(std::llround(cfg_.n_examples * cfg_.dev_fraction));
    const auto n_test = static_cast<std::size_t>(std::llround(cfg_.n_examples * cfg_.test_fraction));
    const auto n_train = static_cast<std::size_t>(cfg_.n_examples) - n_dev - n_test;
    c.train = examples(train_, n_train);
    c.dev = examples(dev_, n_dev);
    c.test = examples(test_, n_test);
    return c;
  }

 private:
  int families() const { return (cfg_.n_clusters + cfg_.family_size - 1) / cfg_.family_size; }
  int family_of(int cluster) const { return cluster / cfg_.family_size; }

  void build_layout() {
    int next = vocab::kFirstContent;
    auto concept_ids = [&] {
      std::vector<int> ids;
      for (int s = 0; s < cfg_.synonyms; ++s) ids.push_back(next++);
      return ids;
    };
    for (int c = 0; c < cfg_.n_clusters; ++c)
      for (int q = 0; q < cfg_.key_concepts; ++q) layout_.key.push_back(concept_ids());
    for (int f = 0; f < families(); ++f)
      for (int q = 0; q < cfg_.topic_concepts; ++q) layout_.topic.push_back(concept_ids());
  }

  void build_templates() {
    std::uniform_int_distribution<int> len(cfg_.min_template_len, cfg_.max_template_len);
    std::uniform_int_distribution<int> key_pick(0, cfg_.key_concepts - 1);
    std::uniform_int_distribution<int> topic_pick(0, std::max(cfg_.topic_concepts - 1, 0));
    std::bernoulli_distribution use_key(cfg_.key_fraction);
    const int n_dev = split_templates(cfg_.templates_per_cluster, cfg_.dev_fraction);
    const int n_test = split_templates(cfg_.templates_per_cluster, cfg_.test_fraction);
    train_.assign(static_cast<std::size_t>(cfg_.n_clusters), {});
    dev_ = train_;
    test_ = train_;
    int id = 0;
    for (int c = 0; c < cfg_.n_clusters; ++c) {
      for (int t = 0; t < cfg_.templates_per_cluster; ++t) {
        Template tpl;
        tpl.id = id++;
        tpl.cluster = c;
        const int n = len(rng_);
        bool has_key = false;
        for (int p = 0; p < n; ++p) {
          const bool key = cfg_.topic_concepts == 0 || use_key(rng_) || (p == n - 1 && !has_key);
          has_key = has_key || key;
          tpl.slots.push_back(key ? layout_.key[static_cast<std::size_t>(c * cfg_.key_concepts + key_pick(rng_))]
                                  : layout_.topic[static_cast<std::size_t>(family_of(c) * cfg_.topic_concepts +
                                                                           topic_pick(rng_))]);
        }
        auto& dst = t < n_dev ? dev_ : t < n_dev + n_test ? test_ : train_;
        dst[static_cast<std::size_t>(c)].push_back(std::move(tpl));
      }
    }
  }

  std::vector<int> realize(const Template& t) {
    std::bernoulli_distribution swap(cfg_.synonym_swap_rate);
    std::bernoulli_distribution shuffle(cfg_.shuffle_rate);
    std::bernoulli_distribution drop(cfg_.drop_rate);
    std::vector<int> out;
    for (const auto& syn : t.slots) {
      int tok = syn[0];
      if (syn.size() > 1 && swap(rng_)) {
        std::uniform_int_distribution<std::size_t> other(1, syn.size() - 1);
        tok = syn[other(rng_)];
      }
      out.push_back(tok);
    }
    for (std::size_t p = 0; p + 1 < out.size(); ++p)
      if (shuffle(rng_)) std::swap(out[p], out[p + 1]);
    std::vector<int> kept;
    for (int tok : out)
      if (!drop(rng_)) kept.push_back(tok);
    if (kept.empty()) kept.push_back(out[std::uniform_int_distribution<std::size_t>(0, out.size() - 1)(rng_)]);
    if (kept.size() > static_cast<std::size_t>(cfg_.max_len)) kept.resize(static_cast<std::size_t>(cfg_.max_len));
    return kept;
  }

  const Template& pick(const std::vector<std::vector<Template>>& pool, int cluster) {
    const auto& ts = pool[static_cast<std::size_t>(cluster)];
    return ts[std::uniform_int_distribution<std::size_t>(0, ts.size() - 1)(rng_)];
  }

  int other_cluster(int c) {
    const int fam = family_of(c);
    std::vector<int> siblings, strangers;
    for (int o = 0; o < cfg_.n_clusters; ++o) {
      if (o == c) continue;
      (family_of(o) == fam ? siblings : strangers).push_back(o);
    }
    const bool hard = !siblings.empty() && (strangers.empty() || std::bernoulli_distribution(cfg_.negative_hardness)(rng_));
    const auto& from = hard ? siblings : strangers;
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng_)];
  }

  std::vector<PairExample> examples(const std::vector<std::vector<Template>>& pool, std::size_t n) {
    const auto n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg_.positive_ratio));
    std::vector<int> labels(n, 0);
    std::fill_n(labels.begin(), n_pos, 1);
    std::shuffle(labels.begin(), labels.end(), rng_);
    std::uniform_int_distribution<int> cluster_pick(0, cfg_.n_clusters - 1);
    std::bernoulli_distribution cross(cfg_.cross_template_rate);
    std::bernoulli_distribution flip(cfg_.label_noise);
    std::vector<PairExample> out;
    out.reserve(n);
    for (int label : labels) {
      const int c = cluster_pick(rng_);
      const Template& a = pick(pool, c);
      const Template* b = &a;
      if (label == 1) {
        if (pool[static_cast<std::size_t>(c)].size() > 1 && cross(rng_)) {
          while (b->id == a.id) b = &pick(pool, c);
        }
      } else {
        b = &pick(pool, other_cluster(c));
      }
      PairExample ex;
      ex.text_i = realize(a);
      ex.text_j = realize(*b);
      ex.label = flip(rng_) ? 1 - label : label;
      ex.cluster_i = a.cluster;
      ex.cluster_j = b->cluster;
      ex.template_i = a.id;
      ex.template_j = b->id;
      out.push_back(std::move(ex));
    }
    return out;
  }

  const SyntheticCorpusConfig& cfg_;
  Rng rng_;
  Layout layout_;
  std::vector<std::vector<Template>> train_, dev_, test_;
};

std::string example_to_json(const PairExample& e) {
  ojson j;
  j["text_i"] = e.text_i;
  j["text_j"] = e.text_j;
  j["label"] = e.label;
  if (e.cluster_i) j["cluster_i"] = *e.cluster_i;
  if (e.cluster_j) j["cluster_j"] = *e.cluster_j;
  if (e.template_i) j["template_i"] = *e.template_i;
  if (e.template_j) j["template_j"] = *e.template_j;
  return j.dump();
}

std::vector<int> token_array(const ojson& j, const char* field, std::size_t line) {
  if (!j.contains(field)) throw ParseError(std::string("missing field '") + field + "'", line);
  const auto& a = j.at(field);
  if (!a.is_array() || a.empty()) throw ParseError(std::string("field '") + field + "' must be a non-empty integer array", line);
  std::vector<int> out;
  for (const auto& v : a) {
    if (!v.is_number_integer()) throw ParseError(std::string("field '") + field + "' holds a non-integer token", line);
    out.push_back(v.get<int>());
  }
  return out;
}

std::optional<int> optional_int(const ojson& j, const char* field, std::size_t line) {
  if (!j.contains(field)) return std::nullopt;
  if (!j.at(field).is_number_integer()) throw ParseError(std::string("field '") + field + "' must be an integer", line);
  return j.at(field).get<int>();
}

}  // namespace

void SyntheticCorpusConfig::validate() const {
  for (auto [v, name] : {std::pair{vocab_size, "vocab_size"}, {n_clusters, "n_clusters"}, {family_size, "family_size"},
                         {key_concepts, "key_concepts"}, {synonyms, "synonyms"},
                         {templates_per_cluster, "templates_per_cluster"}, {min_template_len, "min_template_len"},
                         {max_len, "max_len"}}) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  }
  if (topic_concepts < 0) throw ConfigError("topic_concepts must be non-negative");
  if (n_examples < 0) throw ConfigError("n_examples must be non-negative");
  if (n_clusters < 2) throw ConfigError("n_clusters must be at least 2 to form negatives");
  if (max_template_len < min_template_len) throw ConfigError("max_template_len < min_template_len");
  for (auto [v, name] : {std::pair{key_fraction, "key_fraction"}, {dev_fraction, "dev_fraction"},
                         {test_fraction, "test_fraction"}, {positive_ratio, "positive_ratio"},
                         {cross_template_rate, "cross_template_rate"}, {synonym_swap_rate, "synonym_swap_rate"},
                         {shuffle_rate, "shuffle_rate"}, {drop_rate, "drop_rate"},
                         {negative_hardness, "negative_hardness"}, {label_noise, "label_noise"}}) {
    require_rate(v, name);
  }
  if (dev_fraction + test_fraction >= 1.0) throw ConfigError("dev_fraction + test_fraction must be below 1");
  const int families = (n_clusters + family_size - 1) / family_size;
  const long needed = vocab::kFirstContent + static_cast<long>(synonyms) *
                                                 (static_cast<long>(n_clusters) * key_concepts +
                                                  static_cast<long>(families) * topic_concepts);
  if (needed > vocab_size) {
    throw ConfigError("corpus needs " + std::to_string(needed) + " token ids but vocab_size is " +
                      std::to_string(vocab_size));
  }
  const int n_dev = split_templates(templates_per_cluster, dev_fraction);
  const int n_test = split_templates(templates_per_cluster, test_fraction);
  if ((dev_fraction > 0 && n_dev < 1) || (test_fraction > 0 && n_test < 1) ||
      templates_per_cluster - n_dev - n_test < 1) {
    throw ConfigError("templates_per_cluster too small to give every split at least one template per cluster");
  }
  if (static_cast<std::size_t>(n_examples) > capacity()) {
    throw ConfigError("n_examples " + std::to_string(n_examples) + " exceeds corpus capacity " +
                      std::to_string(capacity()));
  }
}

std::size_t SyntheticCorpusConfig::capacity() const {
  // Distinct ordered template pairs available within the splits.
  const auto t = static_cast<std::size_t>(n_clusters) * static_cast<std::size_t>(std::max(templates_per_cluster, 0));
  const auto d = static_cast<std::size_t>(n_clusters) * static_cast<std::size_t>(split_templates(templates_per_cluster, dev_fraction));
  const auto s = static_cast<std::size_t>(n_clusters) * static_cast<std::size_t>(split_templates(templates_per_cluster, test_fraction));
  const auto tr = t - d - s;
  return tr * tr + d * d + s * s;
}

Corpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  cfg.validate();
  return Generator(cfg).run();
}

bool is_content_token(int id) { return id >= vocab::kFirstContent; }

void write_dataset(const std::filesystem::path& path, std::span<const PairExample> examples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& e : examples) os << example_to_json(e) << '\n';
}

std::vector<PairExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset not found: " + path.string());
  std::vector<PairExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw ParseError("record is not a JSON object", lineno);
    PairExample ex;
    ex.text_i = token_array(j, "text_i", lineno);
    ex.text_j = token_array(j, "text_j", lineno);
    if (!j.contains("label")) throw ParseError("missing field 'label'", lineno);
    const auto& lbl = j.at("label");
    if (!lbl.is_number_integer() || (lbl.get<int>() != 0 && lbl.get<int>() != 1)) {
      throw ParseError("label must be 0 or 1", lineno);
    }
    ex.label = lbl.get<int>();
    ex.cluster_i = optional_int(j, "cluster_i", lineno);
    ex.cluster_j = optional_int(j, "cluster_j", lineno);
    ex.template_i = optional_int(j, "template_i", lineno);
    ex.template_j = optional_int(j, "template_j", lineno);
    out.push_back(std::move(ex));
  }
  if (out.empty()) warn("dataset " + path.string() + " is empty");
  return out;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a64(ss.str());
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  ojson j;
  j["format_version"] = m.format_version;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config_text;
  j["files"] = ojson::array();
  for (const auto& f : m.files) {
    j["files"].push_back({{"split", f.split}, {"path", f.path}, {"count", f.count}, {"content_hash", f.content_hash}});
  }
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write manifest " + path.string());
  os << j.dump(2) << '\n';
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("manifest not found: " + path.string());
  ojson j;
  try {
    j = ojson::parse(is);
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.config_text = j.at("config").get<std::string>();
    for (const auto& f : j.at("files")) {
      m.files.push_back({f.at("split").get<std::string>(), f.at("path").get<std::string>(),
                         f.at("count").get<std::size_t>(), f.at("content_hash").get<std::uint64_t>()});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed manifest " + path.string() + ": " + e.what());
  }
}

Tensor pair_label_matrix(std::span<const PairExample> examples, std::span<const std::size_t> index,
                         bool same_cluster_positives) {
  const std::size_t b = index.size();
  std::vector<double> y(b * b, 0.0);
  for (std::size_t a = 0; a < b; ++a) {
    const auto& ea = examples[index[a]];
    for (std::size_t c = 0; c < b; ++c) {
      const auto& ec = examples[index[c]];
      if (a == c) {
        y[a * b + c] = ea.label;
      } else if (same_cluster_positives && ea.cluster_i && ec.cluster_j && *ea.cluster_i == *ec.cluster_j) {
        y[a * b + c] = 1.0;
      }
    }
  }
  return Tensor({b, b}, std::move(y));
}

std::vector<Batch> make_batches(std::span<const PairExample> examples, std::size_t batch_size, std::uint64_t seed,
                                bool same_cluster_positives) {
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 for in-batch negatives");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto rng = make_stream(seed, "batches");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start + batch_size <= order.size(); start += batch_size) {
    Batch b;
    b.index.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                   order.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
    b.y = pair_label_matrix(examples, b.index, same_cluster_positives);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace flipdistill
