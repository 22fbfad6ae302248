#pragma once

// Teacher bi-encoder, toy decoder-only student, and the LoRA adapters whose
// compression matrix A doubles as the student's text encoder.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flipdistill/rng.hpp"
#include "flipdistill/tensor.hpp"

namespace flipdistill {

enum class Projection { kQuery, kKey, kValue, kOutput };

std::string to_string(Projection p);
Projection parse_projection(const std::string& s);

struct ModelConfig {
  int vocab_size = 512;
  int student_dim = 64;  // k == d for every attention projection
  int student_layers = 2;
  int student_heads = 2;
  int ffn_mult = 4;
  int teacher_dim = 16;  // r; also the LoRA rank
  int teacher_layers = 2;
  int teacher_heads = 2;
  int max_positions = 80;
  double lora_dropout = 0.05;
  double lora_init_std = 0.01;
  Projection rep_projection = Projection::kOutput;
  bool pool_post_dropout = true;
  std::uint64_t seed = 1;

  int lora_rank() const { return teacher_dim; }
  // Throws ConfigError on inconsistent dimensions.
  void validate() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Per-call forward settings. Dropout only fires when training and an rng is given.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
  bool use_adapters = true;
};

struct LoraAdapter {
  Tensor A;  // [r, k] compression ("encoder")
  Tensor B;  // [d, r] expansion ("decoder")
  double dropout_rate = 0.0;

  std::size_t rank() const { return A.dim(0); }

  // Gaussian init N(0, init_std) for both matrices. Requires r <= min(d, k)
  // and warns when r is not strictly smaller.
  static LoraAdapter make(std::size_t d, std::size_t k, std::size_t r, double init_std, double dropout_rate, Rng& rng);
};

struct LoraOutput {
  Tensor h_prime;  // [T, d] = x W0^T + z B^T
  Tensor z;        // [T, r] = dropout(x) A^T
};

LoraOutput lora_forward(const Tensor& w0, const LoraAdapter& adapter, const Tensor& x, const ForwardMode& mode = {});

struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  bool operator==(const Span&) const = default;
};

struct Prompt {
  std::vector<int> tokens;
  Span span_i;
  Span span_j;
};

// [MATCH] text_i [SEP] text_j [ANS]
Prompt make_match_prompt(std::span<const int> text_i, std::span<const int> text_j);

struct PairEncoding {
  Tensor r_i;     // [r]
  Tensor r_j;     // [r]
  Tensor logits;  // [2] = (a_yes, a_no)
  Span span_i;
  Span span_j;
};

class TeacherEncoder {
 public:
  TeacherEncoder(const ModelConfig& cfg, Rng& rng);

  // Mean over positions of the final layer's outputs. Throws InputError on
  // an empty sequence; ids outside the vocabulary map to UNK.
  Tensor encode(std::span<const int> tokens) const;
  // Final-layer outputs before pooling, [T, r].
  Tensor token_outputs(std::span<const int> tokens) const;

  std::size_t dim() const { return static_cast<std::size_t>(cfg_.teacher_dim); }
  void freeze();
  bool frozen() const { return frozen_; }
  // Diagnostic switch: skip the attention sublayers.
  void set_attention_enabled(bool on) { attention_ = on; }

  std::vector<NamedTensor> parameters() const;

 private:
  struct Block {
    Tensor wq, wk, wv, wo, w1, w2;
  };
  ModelConfig cfg_;
  Tensor embed_;
  std::vector<Block> blocks_;
  bool frozen_ = false;
  bool attention_ = true;
};

class StudentTransformer {
 public:
  StudentTransformer(const ModelConfig& cfg, Rng& rng);

  struct Output {
    Tensor logits;  // [2] yes/no logits at the final position
    Tensor rep_z;   // [T, r] compressed activations of the representation adapter
    Tensor hidden;  // [T, k] final residual stream
  };

  Output forward(std::span<const int> tokens, const ForwardMode& mode = {}) const;
  // Throws InputError on empty, overlapping or out-of-range spans.
  PairEncoding encode_pair(std::span<const int> tokens, Span span_i, Span span_j, const ForwardMode& mode = {}) const;
  PairEncoding encode_pair(const Prompt& prompt, const ForwardMode& mode = {}) const {
    return encode_pair(prompt.tokens, prompt.span_i, prompt.span_j, mode);
  }

  // Deep copy; the clone shares no tensors with this model.
  StudentTransformer clone() const;

  const ModelConfig& config() const { return cfg_; }
  std::size_t layers() const { return blocks_.size(); }
  LoraAdapter& adapter(std::size_t layer, Projection p);
  const LoraAdapter& adapter(std::size_t layer, Projection p) const;

  std::vector<NamedTensor> parameters() const;
  // Base (non-adapter) tensors: embeddings, head and projections.
  std::vector<NamedTensor> base_parameters() const;
  // Base pretraining only; every other use expects the base frozen.
  void set_base_trainable(bool on);
  // Next-token logits at every position from the final hidden states, [T, V].
  Tensor lm_logits(const Tensor& hidden) const;
  std::vector<NamedTensor> trainable_parameters() const;
  std::size_t parameter_count() const;
  std::size_t trainable_count() const;

 private:
  struct Block {
    Tensor wq, wk, wv, wo, w1, w2;
    LoraAdapter q, k, v, o;
  };
  ModelConfig cfg_;
  Tensor embed_;
  Tensor pos_;
  Tensor head_;  // [V, k]
  std::vector<Block> blocks_;
};

// Stable two-class softmax of (a_yes, a_no); differentiable, shape [1].
Tensor p_yes(const Tensor& logits);
double p_yes_value(double a_yes, double a_no);

}  // namespace flipdistill
