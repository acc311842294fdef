#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "hvm/gradcheck.hpp"
#include "hvm/kernels.hpp"
#include "hvm/s6.hpp"

using namespace hvm;
using hvm::test::fill;
using hvm::test::random_tensor;
using hvm::test::to_vec;

namespace {

Tensor<double> scalar_tensor(Shape s, double v) { return Tensor<double>::full(std::move(s), v); }

}  // namespace

TEST(Discretize, UnitCase) {
  auto d = discretize(scalar_tensor({1, 1, 1}, 1.0), scalar_tensor({1, 1}, -1.0), scalar_tensor({1, 1, 1}, 1.0));
  EXPECT_NEAR(d.a_bar.item(), std::exp(-1.0), 1e-15);
  EXPECT_NEAR(d.b_bar.item(), 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(d.a_bar.item(), 0.3679, 1e-4);
  EXPECT_NEAR(d.b_bar.item(), 0.6321, 1e-4);
}

TEST(Discretize, SmallDeltaLimit) {
  auto d = discretize(scalar_tensor({1, 1, 1}, 1e-12), scalar_tensor({1, 1}, -3.0), scalar_tensor({1, 1, 1}, 2.0));
  EXPECT_NEAR(d.a_bar.item(), 1.0, 1e-11);
  EXPECT_NEAR(d.b_bar.item(), 0.0, 1e-11);
}

TEST(Discretize, RejectsNonPositiveDelta) {
  EXPECT_THROW(discretize(scalar_tensor({1, 1, 1}, 0.0), scalar_tensor({1, 1}, -1.0), scalar_tensor({1, 1, 1}, 1.0)),
               std::invalid_argument);
  EXPECT_THROW(discretize(scalar_tensor({1, 1, 1}, -0.1), scalar_tensor({1, 1}, -1.0), scalar_tensor({1, 1, 1}, 1.0)),
               std::invalid_argument);
}

TEST(ZohPhi, SeriesAndClosedFormAgreeAtTheThreshold) {
  for (double z : {1e-5, -1e-5}) {
    const double below = kernels::zoh_phi(std::nextafter(z, 0.0));
    const double exact = std::expm1(z) / z;
    EXPECT_NEAR(below, exact, 1e-10);
    EXPECT_NEAR(kernels::zoh_phi(z), exact, 1e-10);
  }
  EXPECT_EQ(kernels::zoh_phi(0.0), 1.0);
  // Delta = 0.5 against an A just inside the series branch.
  const double z = 0.5 * -1.9e-5;
  EXPECT_NEAR(kernels::zoh_phi(z), std::expm1(z) / z, 1e-10);
}

TEST(ZohPhi, DerivativeMatchesDifferenceQuotient) {
  for (double z : {-6.0, -1.0, -1e-2, -2e-3, -5e-4, 0.0, 1e-4, 0.3}) {
    const double h = 1e-6;
    const double fd = (std::expm1(z + h) / (z + h) - std::expm1(z - h) / (z - h)) / (2 * h);
    const double analytic = kernels::zoh_phi_derivative(z);
    if (std::abs(z) > 2 * h) EXPECT_NEAR(analytic, fd, 1e-7) << z;
    else EXPECT_NEAR(analytic, 0.5, 1e-9);
  }
}

TEST(SelectiveScan, HandUnrolledThreeSteps) {
  // h_t = e^-1 h_{t-1} + (1 - e^-1) x_t with x = [1, 0, 0], C = 1, D_skip = 0.
  auto x = Tensor<double>({1, 3, 1}, {1, 0, 0});
  auto y = selective_scan(x, scalar_tensor({1, 3, 1}, 1.0), scalar_tensor({1, 1}, -1.0), scalar_tensor({1, 3, 1}, 1.0),
                          scalar_tensor({1, 3, 1}, 1.0), scalar_tensor({1}, 0.0));
  const double e = std::exp(-1.0);
  double h = 0;
  for (int t = 0; t < 3; ++t) {
    h = e * h + (1 - e) * x[t];
    EXPECT_NEAR(y[t], h, 1e-12);
  }
  EXPECT_NEAR(y[0], 0.6321, 1e-4);
  EXPECT_NEAR(y[1], 0.2325, 1e-4);
  EXPECT_NEAR(y[2], 0.0855, 1e-4);
}

TEST(SelectiveScan, SingleStep) {
  auto x = random_tensor<double>({2, 1, 3}, 1);
  auto delta = random_tensor<double>({2, 1, 3}, 2, 0.1, 1.0);
  auto a = random_tensor<double>({3, 4}, 3, -3, -0.1);
  auto b = random_tensor<double>({2, 1, 4}, 4), c = random_tensor<double>({2, 1, 4}, 5);
  auto d = random_tensor<double>({3}, 6);
  auto y = selective_scan(x, delta, a, b, c, d);
  for (std::size_t bi = 0; bi < 2; ++bi) {
    for (std::size_t di = 0; di < 3; ++di) {
      double want = d[di] * x[bi * 3 + di];
      for (std::size_t n = 0; n < 4; ++n) {
        const double dt = delta[bi * 3 + di], z = dt * a[di * 4 + n];
        want += c[bi * 4 + n] * (std::expm1(z) / z) * dt * b[bi * 4 + n] * x[bi * 3 + di];
      }
      EXPECT_NEAR(y[bi * 3 + di], want, 1e-12);
    }
  }
}

TEST(SelectiveScan, RejectsEmptySequence) {
  EXPECT_THROW(Tensor<double>::zeros({1, 0, 2}), ShapeError);
}

TEST(S6, InitialisationInvariants) {
  InitRng rng(1);
  S6<float> s6(6, 16, rng);
  for (float v : s6.a.data()) EXPECT_LT(v, 0.0f);
  EXPECT_EQ(s6.a.shape(), (Shape{6, 16}));
  EXPECT_EQ(s6.a[0], -1.0f);
  EXPECT_EQ(s6.a[15], -16.0f);
  auto p = s6.project_inputs(random_tensor<float>({2, 9, 6}, 2, -50, 50));
  for (float v : p.delta.data()) EXPECT_GT(v, 0.0f);
}

TEST(S6, ProjectionExamples) {
  InitRng rng(2);
  S6<double> s6(3, 4, rng);
  fill(s6.delta_proj.weight, 0.0);
  fill(s6.delta_proj.bias, std::log(std::expm1(0.01)));  // softplus^-1(0.01)
  auto p = s6.project_inputs(random_tensor<double>({2, 5, 3}, 3));
  EXPECT_EQ(p.delta.shape(), (Shape{2, 5, 3}));
  EXPECT_EQ(p.b.shape(), (Shape{2, 5, 4}));
  EXPECT_EQ(p.c.shape(), (Shape{2, 5, 4}));
  for (double v : p.delta.data()) EXPECT_NEAR(v, 0.01, 1e-15);

  fill(s6.b_proj.bias, 0.0);
  fill(s6.c_proj.bias, 0.0);
  auto z = s6.project_inputs(Tensor<double>::zeros({1, 2, 3}));
  for (double v : z.b.data()) EXPECT_EQ(v, 0.0);
  for (double v : z.c.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(s6.forward(Tensor<double>::zeros({1, 2, 4})), ShapeError);
}

TEST(S6, VanishingDeltaLeavesOnlySkipPath) {
  InitRng rng(3);
  S6<double> s6(4, 8, rng);
  fill(s6.delta_proj.weight, 0.0);
  fill(s6.delta_proj.bias, -40.0);  // delta ~ 4e-18
  auto x = random_tensor<double>({2, 7, 4}, 4);
  auto y = s6.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], s6.d_skip[i % 4] * x[i], 1e-6);
}

TEST(S6, LongSequenceStaysBounded) {
  InitRng rng(4);
  S6<float> s6(4, 16, rng);
  // Random walk input of length 4096.
  std::mt19937_64 g(5);
  std::normal_distribution<float> step(0.0f, 0.1f);
  std::vector<float> walk(4096 * 4);
  for (std::size_t i = 4; i < walk.size(); ++i) walk[i] = std::clamp(walk[i - 4] + step(g), -3.0f, 3.0f);
  auto y = s6.forward(Tensor<float>({1, 4096, 4}, walk));
  for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(S6, FrozenDiscretisationIsLinearInX) {
  auto x = random_tensor<double>({2, 11, 3}, 6);
  auto delta = random_tensor<double>({2, 11, 3}, 7, 0.05, 1.0);
  auto a = random_tensor<double>({3, 5}, 8, -4, -0.2);
  auto b = random_tensor<double>({2, 11, 5}, 9), c = random_tensor<double>({2, 11, 5}, 10);
  auto d = random_tensor<double>({3}, 11);
  auto y = selective_scan(x, delta, a, b, c, d);
  for (double alpha : {-2.5, 0.3, 7.0}) {
    auto ya = selective_scan(ops::scale(x, alpha), delta, a, b, c, d);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(ya[i], alpha * y[i], 1e-5);
  }
}

TEST(S6, GradientsOfEveryParameter) {
  InitRng rng(12);
  S6<double> s6(3, 4, rng);
  auto x = random_tensor<double>({2, 5, 3}, 13, -2, 2, true);
  auto r = random_tensor<double>({2, 5, 3}, 14);
  std::vector<NamedTensor> targets{{"x", x}};
  for (auto& p : s6.parameters()) targets.emplace_back(p.name, p.tensor);
  auto rep = check_gradients("s6", targets, [&] { return ops::sum(ops::mul(s6.forward(x), r)); }, kModuleTolerance,
                             kGradcheckStep);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error << " at " << rep.worst;
  EXPECT_EQ(targets.size(), 1u + 8u);  // A, D_skip and three biased projections
}
