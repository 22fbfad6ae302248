#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "fd_oracle.hpp"
#include "flipdistill/errors.hpp"
#include "flipdistill/tensor.hpp"

namespace fd = flipdistill;
using fd::Tensor;

namespace {

Tensor uniform(fd::Shape shape, fd::Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(fd::shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), rg);
}

std::vector<double> grads_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

// Backward of `loss_fn` w.r.t. `x` vs central differences.
double grad_check(Tensor& x, const std::function<Tensor()>& loss_fn, double h = 1e-5) {
  x.zero_grad();
  fd::backward(loss_fn());
  auto analytic = grads_of(x);
  auto numeric = fdtest::central_diff(x.mutable_values(), [&] { return loss_fn().item(); }, h);
  return fdtest::max_rel_err(analytic, numeric);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {0.3, -1.5, 2.25, 7.0});
  auto c = fd::matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(c.values()[i], m.values()[i]);
}

TEST(Matmul, HandArithmetic) {
  auto c = fd::matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {0, 1}));
  ASSERT_EQ(c.shape(), (fd::Shape{2, 1}));
  EXPECT_EQ(c.at(0, 0), 2.0);
  EXPECT_EQ(c.at(1, 0), 4.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    fd::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const fd::DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.rfind("[2,3]"), msg.find("[2,3]"));
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  fd::Rng rng(11);
  auto a = uniform({3, 4}, rng);
  auto b = uniform({4, 2}, rng);
  EXPECT_LE(grad_check(a, [&] { return fd::sum(fd::matmul(a, b)); }), 1e-6);
  EXPECT_LE(grad_check(b, [&] { return fd::sum(fd::matmul(a, b)); }), 1e-6);
}

TEST(Matmul, TransposedVariantAgreesWithExplicitTranspose) {
  fd::Rng rng(3);
  auto a = uniform({3, 5}, rng, -1, 1, false);
  auto b = uniform({4, 5}, rng, -1, 1, false);
  auto c1 = fd::matmul_nt(a, b);
  auto c2 = fd::matmul(a, fd::transpose(b));
  for (std::size_t i = 0; i < c1.size(); ++i) EXPECT_DOUBLE_EQ(c1.values()[i], c2.values()[i]);
}

TEST(ReduceMean, HandArithmetic) {
  auto m = fd::reduce_mean(Tensor({2, 2}, {1, 3, 5, 7}), 0);
  ASSERT_EQ(m.shape(), (fd::Shape{2}));
  EXPECT_EQ(m.at(0), 3.0);
  EXPECT_EQ(m.at(1), 5.0);
}

TEST(ReduceMean, LengthOneAxisIsIdentityOnValues) {
  Tensor x({1, 3}, {0.1, -2.0, 4.5});
  auto m = fd::reduce_mean(x, 0);
  ASSERT_EQ(m.shape(), (fd::Shape{3}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.at(i), x.at(i));
}

TEST(ReduceMean, AxisOutOfRange) { EXPECT_THROW(fd::reduce_mean(Tensor::zeros({2, 2}), 2), fd::DimensionError); }

TEST(ReduceMean, GradientMatchesFiniteDifferences) {
  fd::Rng rng(5);
  auto x = uniform({3, 4}, rng);
  auto w = uniform({4}, rng, -1, 1, false);
  EXPECT_LE(grad_check(x, [&] { return fd::sum(fd::mul(fd::reduce_mean(x, 0), w)); }), 1e-6);
}

TEST(Elementwise, ArccosAnchors) {
  EXPECT_NEAR(fd::arccos(Tensor::scalar(1.0)).item(), 0.0, 1e-3);
  EXPECT_DOUBLE_EQ(fd::arccos(Tensor::scalar(0.0)).item(), std::numbers::pi / 2);
  EXPECT_NEAR(fd::arccos(Tensor::scalar(-1.0)).item(), std::numbers::pi, 1e-3);
}

TEST(Elementwise, ArccosDerivativeAtHalf) {
  auto x = Tensor::scalar(0.5, true);
  fd::backward(fd::arccos(x));
  EXPECT_NEAR(x.grad()[0], -1.0 / std::sqrt(0.75), 1e-12);
  auto numeric = fdtest::central_diff(x.mutable_values(), [&] { return fd::arccos(x).item(); });
  EXPECT_LE(fdtest::rel_err(x.grad()[0], numeric[0]), 1e-6);
  EXPECT_NEAR(numeric[0], -1.1547, 1e-4);
}

TEST(Elementwise, ArccosGradientIsZeroWhenClamped) {
  auto x = Tensor::scalar(1.0, true);
  fd::backward(fd::arccos(x));
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  EXPECT_THROW(fd::log(Tensor({2}, {1.0, 0.0})), fd::DomainError);
  EXPECT_THROW(fd::log(Tensor({1}, {-0.5})), fd::DomainError);
  EXPECT_NO_THROW(fd::log(Tensor({1}, {0.0}), 1e-12));
}

TEST(Elementwise, NonBroadcastableShapes) {
  EXPECT_THROW(fd::add(Tensor::zeros({2, 2}), Tensor::zeros({2})), fd::DimensionError);
  EXPECT_NO_THROW(fd::add(Tensor::zeros({2, 2}), Tensor::scalar(1.0)));
}

TEST(Softmax, SymmetricInputsGiveUniform) {
  auto s = fd::softmax(Tensor({2}, {0.0, 0.0}), 0);
  EXPECT_EQ(s.at(0), 0.5);
  EXPECT_EQ(s.at(1), 0.5);
}

TEST(Softmax, TwoClassReduction) {
  const double a = 3.7, c = -1.25;
  auto s = fd::softmax(Tensor({2}, {a, a + c}), 0);
  EXPECT_NEAR(s.at(1), 1.0 / (1.0 + std::exp(-c)), 1e-15);
}

TEST(Softmax, StableForLargeLogits) {
  auto s = fd::softmax(Tensor({3}, {1000.0, 1000.0, -1000.0}), 0);
  EXPECT_NEAR(s.at(0), 0.5, 1e-15);
  EXPECT_TRUE(std::isfinite(s.at(2)));
}

TEST(Softmax, RowsSumToOneAndGradientMatches) {
  fd::Rng rng(8);
  auto x = uniform({3, 4}, rng);
  auto w = uniform({3, 4}, rng, -1, 1, false);
  for (std::size_t axis : {0u, 1u}) {
    auto s = fd::softmax(x, axis);
    auto tot = fd::reduce_sum(s, axis);
    for (double v : tot.values()) EXPECT_NEAR(v, 1.0, 1e-14);
    EXPECT_LE(grad_check(x, [&] { return fd::sum(fd::mul(fd::softmax(x, axis), w)); }), 1e-6);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  fd::backward(fd::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  auto x = Tensor({3}, {0.5, -2.0, 3.0}, true);
  fd::backward(fd::sum(fd::mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x.at(i));
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  fd::Rng rng(21);
  auto a = uniform({3, 4}, rng);
  auto b = uniform({4, 2}, rng);
  auto loss = [&] { return fd::sum(fd::exp(fd::reduce_mean(fd::matmul(a, b), 1))); };
  EXPECT_LE(grad_check(a, loss), 1e-5);
  EXPECT_LE(grad_check(b, loss), 1e-5);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor({2}, {1, 2}, true);
  EXPECT_THROW(fd::backward(fd::scale(x, 2.0)), fd::ContractError);
}

TEST(Backward, RepeatedCallsAccumulateOnLeavesOnly) {
  auto x = Tensor({3}, {0.5, -2.0, 3.0}, true);
  auto loss = fd::sum(fd::exp(fd::mul(x, x)));
  fd::backward(loss);
  auto once = grads_of(x);
  fd::backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
  x.zero_grad();
  fd::backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], once[i]);
}

TEST(Backward, UnreachableTensorsGetNoGradient) {
  auto x = Tensor({2}, {1, 2}, true);
  auto y = Tensor({2}, {3, 4}, true);
  auto frozen = Tensor({2}, {5, 6}, false);
  fd::backward(fd::sum(fd::mul(x, frozen)));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(y.has_grad());
  EXPECT_FALSE(frozen.has_grad());
}

TEST(Backward, ForwardOpsAreDeterministic) {
  fd::Rng r1(99), r2(99);
  auto a1 = uniform({4, 6}, r1), a2 = uniform({4, 6}, r2);
  auto f = [](const Tensor& a) {
    return fd::softmax(fd::matmul_nt(fd::rms_norm_rows(a), fd::gelu(a)), 1);
  };
  auto o1 = f(a1), o2 = f(a2);
  for (std::size_t i = 0; i < o1.size(); ++i) EXPECT_EQ(o1.values()[i], o2.values()[i]);
}

// Random-trial property: every differentiable op agrees with central
// differences (h = 1e-5) on inputs drawn from [-1, 1].
TEST(Property, EveryDifferentiableOpMatchesFiniteDifferences) {
  fd::Rng rng(2024);
  using Op = std::function<Tensor(const Tensor&, const Tensor&)>;
  struct Case {
    const char* name;
    Op op;
    double lo = -1.0, hi = 1.0;  // input range for the first operand
  };
  const std::vector<Case> cases = {
      {"matmul", [](const Tensor& x, const Tensor& y) { return fd::matmul(x, fd::transpose(y)); }},
      {"matmul_nt", [](const Tensor& x, const Tensor& y) { return fd::matmul_nt(x, y); }},
      {"add", [](const Tensor& x, const Tensor& y) { return fd::add(x, y); }},
      {"sub", [](const Tensor& x, const Tensor& y) { return fd::sub(x, y); }},
      {"mul", [](const Tensor& x, const Tensor& y) { return fd::mul(x, y); }},
      {"div", [](const Tensor& x, const Tensor& y) { return fd::div(x, fd::add_scalar(fd::mul(y, y), 0.5)); }},
      {"exp", [](const Tensor& x, const Tensor&) { return fd::exp(x); }},
      {"log", [](const Tensor& x, const Tensor&) { return fd::log(fd::add_scalar(x, 1.5)); }},
      {"sqrt", [](const Tensor& x, const Tensor&) { return fd::sqrt(fd::add_scalar(x, 1.5)); }},
      {"cos", [](const Tensor& x, const Tensor&) { return fd::cos(x); }},
      {"arccos", [](const Tensor& x, const Tensor&) { return fd::arccos(fd::scale(x, 0.95)); }},
      {"clamp", [](const Tensor& x, const Tensor&) { return fd::clamp(x, -0.5, 0.5); }},
      {"gelu", [](const Tensor& x, const Tensor&) { return fd::gelu(x); }},
      {"softmax0", [](const Tensor& x, const Tensor&) { return fd::softmax(x, 0); }},
      {"softmax1", [](const Tensor& x, const Tensor&) { return fd::softmax(x, 1); }},
      {"mean0", [](const Tensor& x, const Tensor&) { return fd::reduce_mean(x, 0); }},
      {"sum1", [](const Tensor& x, const Tensor&) { return fd::reduce_sum(x, 1); }},
      {"rms_norm", [](const Tensor& x, const Tensor&) { return fd::rms_norm_rows(x); }},
      {"slice_cols", [](const Tensor& x, const Tensor&) { return fd::slice_cols(x, 1, 3); }},
      {"slice_rows", [](const Tensor& x, const Tensor&) { return fd::slice_rows(x, 1, 2); }},
      {"concat_rows", [](const Tensor& x, const Tensor& y) {
         std::vector<Tensor> p{x, y};
         return fd::concat_rows(p);
       }},
      {"concat_cols", [](const Tensor& x, const Tensor& y) {
         std::vector<Tensor> p{y, x};
         return fd::concat_cols(p);
       }},
      {"gather", [](const Tensor& x, const Tensor&) {
         std::vector<std::size_t> idx{0, 5, 5, 2};
         return fd::gather(x, idx);
       }},
      {"outer", [](const Tensor& x, const Tensor& y) { return fd::outer(fd::reduce_sum(x, 0), fd::reduce_sum(y, 1)); }},
  };
  std::size_t trials = 0;
  double worst = 0.0;
  for (int round = 0; round < 5; ++round) {
    for (const auto& c : cases) {
      auto x = uniform({3, 4}, rng, c.lo, c.hi);
      auto y = uniform({3, 4}, rng);
      auto probe = c.op(x, y);
      auto w = uniform(probe.shape(), rng, -1, 1, false);
      auto loss = [&] { return fd::sum(fd::mul(c.op(x, y), w)); };
      double ex = grad_check(x, loss);
      y.zero_grad();
      fd::backward(loss());
      auto ay = grads_of(y);
      if (ay.empty()) ay.assign(y.size(), 0.0);
      auto ny = fdtest::central_diff(y.mutable_values(), [&] { return loss().item(); });
      double ey = fdtest::max_rel_err(ay, ny);
      EXPECT_LE(ex, 1e-4) << c.name;
      EXPECT_LE(ey, 1e-4) << c.name;
      worst = std::max({worst, ex, ey});
      ++trials;
    }
  }
  EXPECT_GE(trials, 100u);
  RecordProperty("max_rel_err", std::to_string(worst));
}

TEST(NoGradGuard, SuspendsRecordingAndRestores) {
  Tensor x({2}, {1.0, 2.0}, true);
  EXPECT_TRUE(fd::grad_enabled());
  {
    fd::NoGradGuard outer;
    EXPECT_FALSE(fd::grad_enabled());
    {
      fd::NoGradGuard inner;
      EXPECT_FALSE(fd::grad_enabled());
    }
    EXPECT_FALSE(fd::grad_enabled());
    auto y = fd::sum(fd::mul(x, x));
    EXPECT_EQ(y.item(), 5.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(fd::grad_enabled());
  auto z = fd::sum(fd::mul(x, x));
  EXPECT_TRUE(z.requires_grad());
  fd::backward(z);
  EXPECT_EQ(x.grad()[1], 4.0);
}
