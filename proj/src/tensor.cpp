#include "flipdistill/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "flipdistill/errors.hpp"

namespace flipdistill {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

std::atomic<std::uint64_t> g_seq{0};

std::uint64_t next_seq() { return g_seq.fetch_add(1, std::memory_order_relaxed) + 1; }

NodePtr new_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = next_seq();
  return n;
}

std::vector<double>& grad_of(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

thread_local bool g_grad_enabled = true;

// Builds an op result. History is recorded only if some input needs it.
Tensor record(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
              std::function<void(Node&)> bw) {
  auto n = new_node(std::move(shape), std::move(value));
  n->leaf = false;
  bool rg = false;
  for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  if (rg && g_grad_enabled) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

Tensor record_many(Shape shape, std::vector<double> value, std::span<const Tensor> inputs,
                   std::function<void(Node&)> bw) {
  auto n = new_node(std::move(shape), std::move(value));
  n->leaf = false;
  bool rg = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (rg && g_grad_enabled) {
    n->requires_grad = true;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(bw);
  }
  return Tensor(std::move(n));
}

// c[m,n] += a[m,k] * b[n,k]^T. Each entry sums over k in index order.
void nt_product(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(x.shape()));
  }
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return record(x.shape(), std::move(out), {&x}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& g = grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape() && b.size() != 1) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcastable");
  }
}

// dfa/dfb return partials w.r.t. a and b at (a_i, b_i).
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA dfa, DB dfb) {
  check_binary(a, b, name);
  const bool bcast = a.shape() != b.shape();
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[bcast ? 0 : i]);
  return record(a.shape(), std::move(out), {&a, &b}, [bcast, dfa, dfb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * dfa(pa.value[i], pb.value[bcast ? 0 : i]);
    }
    if (pb.requires_grad) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < n; ++i) g[bcast ? 0 : i] += self.grad[i] * dfb(pa.value[i], pb.value[bcast ? 0 : i]);
    }
  });
}

// Splits a shape around `axis` into (outer, len, inner) strides.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

// Treat rank-1 tensors as a single row.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& x, const char* op) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(new_node({}, {0.0})) {}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor: zero-length dimension in " + shape_str(shape));
  node_ = new_node(std::move(shape), std::move(values));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::span<double> Tensor::mutable_grad() { return grad_of(*node_); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) throw ContractError("set_requires_grad: only leaf tensors can change requires_grad");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= size()) throw DimensionError("at: index out of range");
  return node_->value[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2 || i >= dim(0) || j >= dim(1)) throw DimensionError("at: index out of range");
  return node_->value[i * dim(1) + j];
}

Tensor Tensor::detach() const {
  auto n = new_node(node_->shape, node_->value);
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!std::isfinite(loss.item())) throw ContractError("backward: loss is not finite");
  if (!loss.requires_grad()) return;

  // Tape of reachable recorded operations, replayed in reverse recording order.
  std::vector<Node*> tape;
  std::vector<Node*> stack{loss.node().get()};
  std::unordered_set<const Node*> seen{stack.back()};
  auto mark = [&](const Node* n) { return seen.insert(n).second; };
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    tape.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && mark(p.get())) stack.push_back(p.get());
    }
  }
  std::sort(tape.begin(), tape.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : tape) {
    if (n->leaf) {
      grad_of(*n);
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  Node& root = *loss.node();
  root.grad[0] += 1.0;
  for (Node* n : tape) {
    if (n->backward) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* bp = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return record({m, n}, std::move(c), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = grad_of(pa);
      std::vector<double> s(m * k, 0.0);
      nt_product(g, pb.value.data(), s.data(), m, n, k);
      for (std::size_t i = 0; i < m * k; ++i) ga[i] += s[i];
    }
    if (pb.requires_grad) {
      auto& gb = grad_of(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.value[i * k + p];
          const double* gi = g + i * n;
          double* gbp = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
        }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: cannot multiply " + shape_str(a.shape()) + " by transpose of " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> c(m * n, 0.0);
  nt_product(a.values().data(), b.values().data(), c.data(), m, k, n);
  return record({m, n}, std::move(c), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = grad_of(pa);
      for (std::size_t i = 0; i < m; ++i) {
        double* gai = ga.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          const double* bj = pb.value.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) gai[p] += gij * bj[p];
        }
      }
    }
    if (pb.requires_grad) {
      auto& gb = grad_of(pb);
      for (std::size_t i = 0; i < m; ++i) {
        const double* ai = pa.value.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          double* gbj = gb.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) gbj[p] += gij * ai[p];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return record({n, m}, std::move(out), {&a}, [m, n](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor outer(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "outer");
  require_rank(b, 1, "outer");
  const std::size_t m = a.dim(0), n = b.dim(0);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i] * b.values()[j];
  return record({m, n}, std::move(out), {&a, &b}, [m, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = grad_of(pa);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i] += self.grad[i * n + j] * pb.value[j];
    }
    if (pb.requires_grad) {
      auto& g = grad_of(pb);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * pa.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x, double eps) {
  for (double v : x.values()) {
    if (!(v + eps > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v + eps));
  }
  return unary(x, [eps](double v) { return std::log(v + eps); }, [eps](double v, double) { return 1.0 / (v + eps); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  // Derivative at 0 is taken as 0 (subgradient of a norm at the origin).
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor cos(const Tensor& x) {
  return unary(x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor arccos(const Tensor& x) {
  static constexpr double lo = -1.0 + kArccosClamp;
  static constexpr double hi = 1.0 - kArccosClamp;
  return unary(
      x, [](double v) { return std::acos(std::clamp(v, lo, hi)); },
      [](double v, double) { return (v > lo && v < hi) ? -1.0 / std::sqrt(1.0 - v * v) : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

// ---------------------------------------------------------------------------
// reductions

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = xv[base];
      for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, xv[base + l * v.inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double e = std::exp(xv[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= s;
    }
  return record(x.shape(), std::move(out), {&x}, [v](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) dot += self.grad[base + l * v.inner] * self.value[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t idx = base + l * v.inner;
          g[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

namespace {

Tensor reduce_axis(const Tensor& x, std::size_t axis, bool average, const char* name) {
  const AxisView v = axis_view(x.shape(), axis, name);
  const double w = average ? 1.0 / static_cast<double>(v.len) : 1.0;
  std::vector<double> out(v.outer * v.inner, 0.0);
  auto xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.len; ++l)
      for (std::size_t in = 0; in < v.inner; ++in) out[o * v.inner + in] += xv[(o * v.len + l) * v.inner + in];
  if (average)
    for (auto& s : out) s *= w;
  return record(drop_axis(x.shape(), axis), std::move(out), {&x}, [v, w](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.len; ++l)
        for (std::size_t in = 0; in < v.inner; ++in) g[(o * v.len + l) * v.inner + in] += w * self.grad[o * v.inner + in];
  });
}

}  // namespace

Tensor reduce_mean(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, true, "reduce_mean"); }
Tensor reduce_sum(const Tensor& x, std::size_t axis) { return reduce_axis(x, axis, false, "reduce_sum"); }

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return record({}, {s}, {&x}, [](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---------------------------------------------------------------------------
// indexing / layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return record(std::move(shape), std::move(out), {&x}, [](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1);
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end * n));
  return record({end - begin, n}, std::move(out), {&x}, [begin, n](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1), w = end - begin;
  std::vector<double> out(m * w);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xv[i * n + begin + j];
  return record({m, w}, std::move(out), {&x}, [m, n, w, begin](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = as_rows(parts[0], "concat_rows").second;
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    auto [r, c] = as_rows(p, "concat_rows");
    if (c != n) throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    offsets.push_back(rows * n);
    rows += r;
  }
  std::vector<double> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return record_many({rows, n}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.dim(1));
    cols += p.dim(1);
  }
  std::vector<double> out(m * cols);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * cols + off + j] = pv[i * widths[k] + j];
    off += widths[k];
  }
  return record_many({m, cols}, std::move(out), parts, [m, cols, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) {
        auto& g = grad_of(p);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * cols + off + j];
      }
      off += widths[k];
    }
  });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DimensionError("gather: no indices");
  std::vector<double> out(indices.size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= x.size()) throw DimensionError("gather: index " + std::to_string(indices[n]) + " out of range");
    out[n] = x.values()[indices[n]];
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return record({idx.size()}, std::move(out), {&x}, [idx](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t n = 0; n < idx.size(); ++n) g[idx[n]] += self.grad[n];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  const std::size_t vocab = table.dim(0), k = table.dim(1);
  std::vector<double> out(ids.size() * k);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw DimensionError("embedding: id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[t] * k), k, out.begin() + static_cast<std::ptrdiff_t>(t * k));
  }
  std::vector<int> id_copy(ids.begin(), ids.end());
  return record({ids.size(), k}, std::move(out), {&table}, [id_copy, k](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t t = 0; t < id_copy.size(); ++t)
      for (std::size_t j = 0; j < k; ++j) g[static_cast<std::size_t>(id_copy[t]) * k + j] += self.grad[t * k + j];
  });
}

// ---------------------------------------------------------------------------
// neural-net helpers

Tensor rms_norm_rows(const Tensor& x, double eps) {
  auto [m, n] = as_rows(x, "rms_norm_rows");
  std::vector<double> out(x.size());
  std::vector<double> inv(m);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[i * n + j] * xv[i * n + j];
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * inv[i];
  }
  return record(x.shape(), std::move(out), {&x}, [m, n, inv](Node& self) {
    auto& g = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      dot /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (self.grad[i * n + j] - self.value[i * n + j] * dot) * inv[i];
    }
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& v : mask) v = keep(rng) ? s : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace flipdistill
