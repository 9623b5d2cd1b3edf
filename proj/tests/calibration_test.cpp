#include <gtest/gtest.h>

#include <random>

#include "rangecal/calibration.hpp"
#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"
#include "test_util.hpp"

using namespace rangecal;

namespace {

void expect_vec(const std::vector<double>& got, const std::vector<double>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12) << k;
}

}  // namespace

TEST(ZsNorm, AnalyticCases) {
  expect_vec(zs_norm_transform(std::vector<double>{0, 2}, {1, 3}), {1, 3});
  expect_vec(zs_norm_transform(std::vector<double>{1, 3}, {1, 3}), {1, 3});
  expect_vec(zs_norm_transform(std::vector<double>{5, 5}, {0, 2}), {1, 1});
  const auto out = zs_norm_transform(std::vector<double>{0, 4, 2}, {0, 2});
  expect_vec(out, {0, 2, 1});
  EXPECT_EQ(argmax_index(out), 1u);
}

TEST(ZsNorm, InvalidRange) {
  try {
    zs_norm_transform(std::vector<double>{0, 1}, {3, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidRange);
  }
  EXPECT_THROW(penalty_term(std::vector<double>{0, 1}, {3, 1}), Error);
}

TEST(ZsNorm, EndpointsExactAndOrderKept) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 300; ++t) {
    const auto l = testutil::random_vector(rng, 2 + t % 12, -300, 300);
    const auto b = testutil::random_vector(rng, 2, -20, 20);
    const RangePair r{std::min(b[0], b[1]), std::max(b[0], b[1])};
    const auto out = zs_norm_transform(l, r);
    EXPECT_NEAR(out[argmin_index(out)], r.lo, 1e-9);
    EXPECT_NEAR(out[argmax_index(out)], r.hi, 1e-9);
    for (std::size_t i = 0; i < l.size(); ++i) {
      for (std::size_t j = 0; j < l.size(); ++j) {
        if (l[i] < l[j]) EXPECT_LE(out[i], out[j]);
      }
    }
  }
}

TEST(ZsNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const std::size_t K = 2 + t % 6;
    auto l = testutil::random_vector(rng, K, -5, 5);
    const RangePair r{-1.0, 2.5};
    const auto w = testutil::random_vector(rng, K, -1, 1);
    auto f = [&] {
      const auto out = zs_norm_transform(l, r);
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += w[k] * out[k];
      return s;
    };
    const auto analytic = zs_norm_backward(l, r, w);
    const auto numeric = testutil::numeric_gradient(f, l);
    EXPECT_LT(testutil::relative_error(analytic, numeric), 1e-6);
  }
}

TEST(Penalty, AnalyticCases) {
  const auto inside = penalty_term(std::vector<double>{1.5, 2.0, 2.9}, {1, 3});
  EXPECT_EQ(inside.value, 0.0);
  const auto p = penalty_term(std::vector<double>{0, 5}, {1, 3});
  EXPECT_DOUBLE_EQ(p.value, 3.0);
  expect_vec(p.subgradient, {-1, 1});
  const auto edge = penalty_term(std::vector<double>{1, 3}, {1, 3});
  expect_vec(edge.subgradient, {0, 0});
}

TEST(Penalty, ZeroIffInside) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto l = testutil::random_vector(rng, 4, -3, 3);
    const RangePair r{-2, 2};
    bool inside = true;
    for (double x : l) inside = inside && x >= r.lo && x <= r.hi;
    EXPECT_EQ(penalty_term(l, r).value == 0.0, inside);
  }
}

TEST(Sals, AnalyticAndArgmax) {
  expect_vec(sals(std::vector<double>{10, 30, 20}, {0, 2}), {0, 2, 1});
  std::mt19937_64 rng(6);
  for (int t = 0; t < 300; ++t) {
    const auto l = testutil::random_vector(rng, 2 + t % 10, -100, 100);
    EXPECT_EQ(argmax_index(sals(l, {0.5, 7.0})), argmax_index(l));
  }
}

TEST(ScaledRange, Cases) {
  EXPECT_EQ(scaled_range({1, 3}, 0.5), (RangePair{1.5, 2.5}));
  EXPECT_EQ(scaled_range({1, 3}, 1.0), (RangePair{1, 3}));
  EXPECT_EQ(scaled_range({0, 4}, 0.25), (RangePair{1.5, 2.5}));
  EXPECT_THROW(scaled_range({0, 4}, 0.0), Error);
  EXPECT_THROW(scaled_range({0, 4}, -1.0), Error);
}

TEST(ScaledRange, NarrowerRangeFlattensSoftmax) {
  std::mt19937_64 rng(8);
  const double factors[] = {1.0, 0.75, 0.5, 0.25, 0.1};
  for (int t = 0; t < 100; ++t) {
    const auto l = testutil::random_vector(rng, 5, -10, 10);
    const RangePair r{-3, 6};
    double prev = -1.0;
    for (double f : factors) {
      const double h = entropy(softmax(sals(l, scaled_range(r, f))));
      EXPECT_GE(h, prev - 1e-12);
      prev = h;
    }
  }
}

TEST(Rows, OneRangePerRow) {
  const Matrix l = from_rows({{0, 2}, {4, 0}});
  const std::vector<RangePair> r{{1, 3}, {0, 1}};
  const Matrix out = sals_rows(l, r);
  EXPECT_EQ(out, from_rows({{1, 3}, {1, 0}}));
  EXPECT_THROW(sals_rows(l, std::vector<RangePair>{{1, 3}}), Error);
}
