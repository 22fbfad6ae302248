#include "flipdistill/models.hpp"

#include <cmath>

#include "flipdistill/errors.hpp"
#include "flipdistill/log.hpp"
#include "flipdistill/vocab.hpp"

namespace flipdistill {

namespace {

constexpr double kMaskValue = -1e30;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor init_weight(std::size_t out, std::size_t in, Rng& rng, bool trainable) {
  return Tensor::randn({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng, trainable);
}

std::vector<int> sanitize(std::span<const int> tokens, int vocab) {
  std::vector<int> ids(tokens.begin(), tokens.end());
  for (auto& t : ids)
    if (t < 0 || t >= vocab) t = vocab::kUnk;
  return ids;
}

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMaskValue;
  return Tensor({t, t}, std::move(m));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const Tensor* mask) {
  const std::size_t dim = q.dim(1);
  const std::size_t dh = dim / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = heads == 1 ? k : slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = heads == 1 ? v : slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = scale(matmul_nt(qh, kh), inv);
    if (mask) scores = add(scores, *mask);
    outs.push_back(matmul(softmax(scores, 1), vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

void check_span(Span s, std::size_t len, const char* which) {
  if (s.begin >= s.end) throw InputError(std::string(which) + " is empty");
  if (s.end > len) throw InputError(std::string(which) + " exceeds prompt length " + std::to_string(len));
}

}  // namespace

std::string to_string(Projection p) {
  switch (p) {
    case Projection::kQuery: return "q";
    case Projection::kKey: return "k";
    case Projection::kValue: return "v";
    case Projection::kOutput: return "o";
  }
  return "o";
}

Projection parse_projection(const std::string& s) {
  if (s == "q") return Projection::kQuery;
  if (s == "k") return Projection::kKey;
  if (s == "v") return Projection::kValue;
  if (s == "o") return Projection::kOutput;
  throw ConfigError("unknown projection '" + s + "' (expected q, k, v or o)");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(student_dim, "student_dim");
  positive(student_layers, "student_layers");
  positive(student_heads, "student_heads");
  positive(ffn_mult, "ffn_mult");
  positive(teacher_dim, "teacher_dim");
  positive(teacher_layers, "teacher_layers");
  positive(teacher_heads, "teacher_heads");
  positive(max_positions, "max_positions");
  if (vocab_size <= vocab::kFirstContent) throw ConfigError("vocab_size too small for reserved tokens");
  if (student_dim % student_heads) throw ConfigError("student_dim must be divisible by student_heads");
  if (teacher_dim % teacher_heads) throw ConfigError("teacher_dim must be divisible by teacher_heads");
  if (teacher_dim > student_dim) throw ConfigError("LoRA rank (teacher_dim) must not exceed student_dim");
  if (lora_dropout < 0.0 || lora_dropout >= 1.0) throw ConfigError("lora_dropout must lie in [0, 1)");
  if (lora_init_std < 0.0) throw ConfigError("lora_init_std must be non-negative");
}

// ---------------------------------------------------------------------------
// LoRA

LoraAdapter LoraAdapter::make(std::size_t d, std::size_t k, std::size_t r, double init_std, double dropout_rate,
                              Rng& rng) {
  if (r == 0 || r > std::min(d, k)) {
    throw ConfigError("LoRA rank " + std::to_string(r) + " must lie in [1, min(d, k)] = [1, " +
                      std::to_string(std::min(d, k)) + "]");
  }
  if (r == std::min(d, k)) warn("LoRA rank " + std::to_string(r) + " is not smaller than min(d, k)");
  LoraAdapter a;
  a.A = Tensor::randn({r, k}, init_std, rng, true);
  a.B = Tensor::randn({d, r}, init_std, rng, true);
  a.dropout_rate = dropout_rate;
  return a;
}

LoraOutput lora_forward(const Tensor& w0, const LoraAdapter& adapter, const Tensor& x, const ForwardMode& mode) {
  if (w0.rank() != 2 || x.rank() != 2 || adapter.A.rank() != 2 || adapter.B.rank() != 2) {
    throw DimensionError("lora_forward: expected matrices");
  }
  const std::size_t d = w0.dim(0), k = w0.dim(1), r = adapter.A.dim(0);
  if (x.dim(1) != k || adapter.A.dim(1) != k || adapter.B.dim(0) != d || adapter.B.dim(1) != r) {
    throw DimensionError("lora_forward: inconsistent shapes W0 " + shape_str(w0.shape()) + ", A " +
                         shape_str(adapter.A.shape()) + ", B " + shape_str(adapter.B.shape()) + ", x " +
                         shape_str(x.shape()));
  }
  auto base = matmul_nt(x, w0);
  const bool drop = mode.training && mode.rng && adapter.dropout_rate > 0.0;
  auto z = matmul_nt(drop ? dropout(x, adapter.dropout_rate, *mode.rng) : x, adapter.A);
  if (!mode.use_adapters) return {base, z};
  return {add(base, matmul_nt(z, adapter.B)), z};
}

Prompt make_match_prompt(std::span<const int> text_i, std::span<const int> text_j) {
  Prompt p;
  p.tokens.reserve(text_i.size() + text_j.size() + 3);
  p.tokens.push_back(vocab::kMatch);
  p.tokens.insert(p.tokens.end(), text_i.begin(), text_i.end());
  p.tokens.push_back(vocab::kSep);
  p.tokens.insert(p.tokens.end(), text_j.begin(), text_j.end());
  p.tokens.push_back(vocab::kAns);
  p.span_i = {1, 1 + text_i.size()};
  p.span_j = {2 + text_i.size(), 2 + text_i.size() + text_j.size()};
  return p;
}

// ---------------------------------------------------------------------------
// Teacher

TeacherEncoder::TeacherEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t r = dim(), h = r * sz(cfg.ffn_mult);
  embed_ = Tensor::randn({sz(cfg.vocab_size), r}, 1.0, rng, true);
  for (int l = 0; l < cfg.teacher_layers; ++l) {
    blocks_.push_back({init_weight(r, r, rng, true), init_weight(r, r, rng, true), init_weight(r, r, rng, true),
                       init_weight(r, r, rng, true), init_weight(h, r, rng, true), init_weight(r, h, rng, true)});
  }
}

Tensor TeacherEncoder::token_outputs(std::span<const int> tokens) const {
  if (tokens.empty()) throw InputError("teacher_encode: empty token sequence");
  const auto ids = sanitize(tokens, cfg_.vocab_size);
  auto x = embedding(embed_, ids);
  for (const auto& b : blocks_) {
    if (attention_) {
      auto h = rms_norm_rows(x);
      auto att = multi_head_attention(matmul_nt(h, b.wq), matmul_nt(h, b.wk), matmul_nt(h, b.wv),
                                      sz(cfg_.teacher_heads), nullptr);
      x = add(x, matmul_nt(att, b.wo));
    }
    auto h2 = rms_norm_rows(x);
    x = add(x, matmul_nt(gelu(matmul_nt(h2, b.w1)), b.w2));
  }
  return x;
}

Tensor TeacherEncoder::encode(std::span<const int> tokens) const { return reduce_mean(token_outputs(tokens), 0); }

void TeacherEncoder::freeze() {
  for (auto& p : parameters()) p.tensor.set_requires_grad(false);
  frozen_ = true;
}

std::vector<NamedTensor> TeacherEncoder::parameters() const {
  std::vector<NamedTensor> out{{"teacher.embed", embed_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto p = "teacher.block" + std::to_string(l) + ".";
    const auto& b = blocks_[l];
    out.push_back({p + "wq", b.wq});
    out.push_back({p + "wk", b.wk});
    out.push_back({p + "wv", b.wv});
    out.push_back({p + "wo", b.wo});
    out.push_back({p + "w1", b.w1});
    out.push_back({p + "w2", b.w2});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Student

StudentTransformer::StudentTransformer(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t k = sz(cfg.student_dim), r = sz(cfg.lora_rank()), h = k * sz(cfg.ffn_mult);
  embed_ = Tensor::randn({sz(cfg.vocab_size), k}, 1.0, rng);
  pos_ = Tensor::randn({sz(cfg.max_positions), k}, 0.5, rng);
  head_ = init_weight(sz(cfg.vocab_size), k, rng, false);
  for (int l = 0; l < cfg.student_layers; ++l) {
    Block b{init_weight(k, k, rng, false), init_weight(k, k, rng, false), init_weight(k, k, rng, false),
            init_weight(k, k, rng, false), init_weight(h, k, rng, false), init_weight(k, h, rng, false),
            {}, {}, {}, {}};
    b.q = LoraAdapter::make(k, k, r, cfg.lora_init_std, cfg.lora_dropout, rng);
    b.k = LoraAdapter::make(k, k, r, cfg.lora_init_std, cfg.lora_dropout, rng);
    b.v = LoraAdapter::make(k, k, r, cfg.lora_init_std, cfg.lora_dropout, rng);
    b.o = LoraAdapter::make(k, k, r, cfg.lora_init_std, cfg.lora_dropout, rng);
    blocks_.push_back(std::move(b));
  }
}

LoraAdapter& StudentTransformer::adapter(std::size_t layer, Projection p) {
  auto& b = blocks_.at(layer);
  switch (p) {
    case Projection::kQuery: return b.q;
    case Projection::kKey: return b.k;
    case Projection::kValue: return b.v;
    case Projection::kOutput: return b.o;
  }
  return b.o;
}

const LoraAdapter& StudentTransformer::adapter(std::size_t layer, Projection p) const {
  return const_cast<StudentTransformer*>(this)->adapter(layer, p);
}

StudentTransformer::Output StudentTransformer::forward(std::span<const int> tokens, const ForwardMode& mode) const {
  if (tokens.empty()) throw InputError("student forward: empty token sequence");
  if (tokens.size() > sz(cfg_.max_positions)) {
    throw InputError("student forward: sequence of " + std::to_string(tokens.size()) + " exceeds max_positions " +
                     std::to_string(cfg_.max_positions));
  }
  const auto ids = sanitize(tokens, cfg_.vocab_size);
  const std::size_t t = ids.size();
  auto x = add(embedding(embed_, ids), slice_rows(pos_, 0, t));
  const auto mask = causal_mask(t);
  Tensor rep;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const bool last = l + 1 == blocks_.size();
    auto h = rms_norm_rows(x);
    auto q = lora_forward(b.wq, b.q, h, mode);
    auto k = lora_forward(b.wk, b.k, h, mode);
    auto v = lora_forward(b.wv, b.v, h, mode);
    auto att = multi_head_attention(q.h_prime, k.h_prime, v.h_prime, sz(cfg_.student_heads), &mask);
    auto o = lora_forward(b.wo, b.o, att, mode);
    if (last) {
      const LoraOutput* src = nullptr;
      const Tensor* in = nullptr;
      switch (cfg_.rep_projection) {
        case Projection::kQuery: src = &q; in = &h; break;
        case Projection::kKey: src = &k; in = &h; break;
        case Projection::kValue: src = &v; in = &h; break;
        case Projection::kOutput: src = &o; in = &att; break;
      }
      const bool dropped = mode.training && mode.rng && cfg_.lora_dropout > 0.0;
      rep = (cfg_.pool_post_dropout || !dropped) ? src->z : matmul_nt(*in, adapter(l, cfg_.rep_projection).A);
    }
    x = add(x, o.h_prime);
    auto h2 = rms_norm_rows(x);
    x = add(x, matmul_nt(gelu(matmul_nt(h2, b.w1)), b.w2));
  }
  const std::vector<int> yes_no{vocab::kYes, vocab::kNo};
  auto final_row = rms_norm_rows(slice_rows(x, t - 1, t));
  auto logits = reshape(matmul_nt(final_row, embedding(head_, yes_no)), {2});
  return {logits, rep, x};
}

Tensor StudentTransformer::lm_logits(const Tensor& hidden) const { return matmul_nt(rms_norm_rows(hidden), head_); }

std::vector<NamedTensor> StudentTransformer::base_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : parameters())
    if (p.name.find(".lora_") == std::string::npos) out.push_back(p);
  return out;
}

StudentTransformer StudentTransformer::clone() const {
  StudentTransformer c(*this);
  auto copy = [](Tensor& t) { t = Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()), t.requires_grad()); };
  copy(c.embed_);
  copy(c.pos_);
  copy(c.head_);
  for (auto& b : c.blocks_) {
    for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) copy(*t);
    for (LoraAdapter* a : {&b.q, &b.k, &b.v, &b.o}) {
      copy(a->A);
      copy(a->B);
    }
  }
  return c;
}

void StudentTransformer::set_base_trainable(bool on) {
  for (auto& p : base_parameters()) p.tensor.set_requires_grad(on);
}

PairEncoding StudentTransformer::encode_pair(std::span<const int> tokens, Span span_i, Span span_j,
                                             const ForwardMode& mode) const {
  check_span(span_i, tokens.size(), "span_i");
  check_span(span_j, tokens.size(), "span_j");
  if (span_i.begin < span_j.end && span_j.begin < span_i.end) throw InputError("span_i and span_j overlap");
  auto out = forward(tokens, mode);
  PairEncoding enc;
  enc.r_i = reduce_mean(slice_rows(out.rep_z, span_i.begin, span_i.end), 0);
  enc.r_j = reduce_mean(slice_rows(out.rep_z, span_j.begin, span_j.end), 0);
  enc.logits = out.logits;
  enc.span_i = span_i;
  enc.span_j = span_j;
  return enc;
}

std::vector<NamedTensor> StudentTransformer::parameters() const {
  std::vector<NamedTensor> out{{"student.embed", embed_}, {"student.pos", pos_}, {"student.head", head_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto p = "student.block" + std::to_string(l) + ".";
    const auto& b = blocks_[l];
    out.push_back({p + "wq", b.wq});
    out.push_back({p + "wk", b.wk});
    out.push_back({p + "wv", b.wv});
    out.push_back({p + "wo", b.wo});
    out.push_back({p + "w1", b.w1});
    out.push_back({p + "w2", b.w2});
    for (auto [name, a] : {std::pair{"q", &b.q}, {"k", &b.k}, {"v", &b.v}, {"o", &b.o}}) {
      out.push_back({p + "lora_" + name + ".A", a->A});
      out.push_back({p + "lora_" + name + ".B", a->B});
    }
  }
  return out;
}

std::vector<NamedTensor> StudentTransformer::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (auto& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(p);
  return out;
}

std::size_t StudentTransformer::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

std::size_t StudentTransformer::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : trainable_parameters()) n += p.tensor.size();
  return n;
}

Tensor p_yes(const Tensor& logits) {
  if (logits.size() != 2) throw DimensionError("p_yes: expected 2 logits, got " + shape_str(logits.shape()));
  const std::size_t idx = 0;
  return gather(softmax(reshape(logits, {2}), 0), std::span<const std::size_t>(&idx, 1));
}

double p_yes_value(double a_yes, double a_no) {
  // 1 / (1 + e^{-(a_yes - a_no)}), written to avoid overflow on either side.
  const double g = a_yes - a_no;
  if (g >= 0) return 1.0 / (1.0 + std::exp(-g));
  const double e = std::exp(g);
  return e / (1.0 + e);
}

}  // namespace flipdistill
