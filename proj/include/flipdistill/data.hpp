#pragma once

// Synthetic text-matching corpora over an integer vocabulary, the JSONL
// dataset format, and batch assembly with in-batch negatives.
//
// Corpus structure: clusters are grouped into families. Each cluster owns a
// set of key concepts and each family a set of shared topic concepts; every
// concept is spelled by a few synonymous token ids. A template is a concept
// sequence drawn from its cluster's keys and its family's topics. Positive
// pairs are two paraphrased realizations of templates from one cluster;
// negative pairs cross clusters, and `negative_hardness` is the chance the
// other cluster is a sibling in the same family (and so shares topic tokens).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flipdistill/tensor.hpp"

namespace flipdistill {

struct PairExample {
  std::vector<int> text_i;
  std::vector<int> text_j;
  int label = 0;
  std::optional<int> cluster_i;
  std::optional<int> cluster_j;
  std::optional<int> template_i;
  std::optional<int> template_j;

  bool operator==(const PairExample&) const = default;
};

struct SyntheticCorpusConfig {
  int vocab_size = 512;
  int n_clusters = 24;
  int family_size = 3;
  int key_concepts = 6;      // per cluster
  int topic_concepts = 6;    // per family
  int synonyms = 2;          // token ids per concept
  int templates_per_cluster = 30;
  int min_template_len = 4;
  int max_template_len = 8;
  double key_fraction = 0.5;
  int n_examples = 7000;     // across all splits
  double dev_fraction = 0.15;
  double test_fraction = 0.15;
  double positive_ratio = 0.5;
  double cross_template_rate = 0.5;  // positives built from two templates of one cluster
  double synonym_swap_rate = 0.3;
  double shuffle_rate = 0.1;
  double drop_rate = 0.1;
  double negative_hardness = 0.5;
  double label_noise = 0.0;
  int max_len = 32;
  std::uint64_t seed = 1;

  // Throws ConfigError on out-of-range values or an infeasible size.
  void validate() const;
  std::size_t capacity() const;
};

struct Corpus {
  std::vector<PairExample> train;
  std::vector<PairExample> dev;
  std::vector<PairExample> test;
};

Corpus generate_synthetic_corpus(const SyntheticCorpusConfig& cfg);

// Token ids that carry cluster or family meaning (everything the generator
// can emit). Used to check lexical overlap of negatives.
bool is_content_token(int id);

// One JSON object per line: {"text_i":[..],"text_j":[..],"label":0|1,
// optional "cluster_i","cluster_j","template_i","template_j"}.
void write_dataset(const std::filesystem::path& path, std::span<const PairExample> examples);
// Throws ParseError naming the first malformed line. Warns on an empty file.
std::vector<PairExample> load_dataset(const std::filesystem::path& path);

struct Manifest {
  int format_version = 1;
  std::uint64_t config_hash = 0;
  std::string config_text;
  struct File {
    std::string split;
    std::string path;
    std::size_t count = 0;
    std::uint64_t content_hash = 0;
    bool operator==(const File&) const = default;
  };
  std::vector<File> files;
  bool operator==(const Manifest&) const = default;
};

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);
std::uint64_t file_hash(const std::filesystem::path& path);

struct Batch {
  std::vector<std::size_t> index;  // positions in the source example set
  Tensor y;                        // [B, B] pair labels
};

// Seed-deterministic shuffle into batches of exactly batch_size; the final
// partial batch is dropped. Off-diagonal y entries are 1 only when
// `same_cluster_positives` is set and both sides carry the same cluster id.
std::vector<Batch> make_batches(std::span<const PairExample> examples, std::size_t batch_size, std::uint64_t seed,
                                bool same_cluster_positives = true);

Tensor pair_label_matrix(std::span<const PairExample> examples, std::span<const std::size_t> index,
                         bool same_cluster_positives = true);

}  // namespace flipdistill
