#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rangecal/core_math.hpp"
#include "rangecal/error.hpp"
#include "rangecal/zeroshot.hpp"
#include "test_util.hpp"

using namespace rangecal;

TEST(Prototypes, SinglePromptIsItself) {
  const Matrix a = from_rows({{0.6, 0.8, 0.0}});
  const Matrix b = from_rows({{0.0, 0.0, 1.0}});
  const auto p = build_prototypes({a, b});
  EXPECT_EQ(p.prototypes, from_rows({{0.6, 0.8, 0.0}, {0.0, 0.0, 1.0}}));
  EXPECT_EQ(p.temperature, kDefaultTemperature);
}

TEST(Prototypes, MeanRenormalized) {
  const auto p = build_prototypes({from_rows({{1, 0, 0}, {0, 1, 0}}), from_rows({{0, 0, 1}})});
  EXPECT_NEAR(p.prototypes(0, 0), std::sqrt(2.0) / 2, 1e-15);
  EXPECT_NEAR(p.prototypes(0, 1), std::sqrt(2.0) / 2, 1e-15);
  const auto raw =
      build_prototypes({from_rows({{1, 0, 0}, {0, 1, 0}}), from_rows({{0, 0, 1}})}, 0.01, false);
  EXPECT_DOUBLE_EQ(raw.prototypes(0, 0), 0.5);
}

TEST(Prototypes, Errors) {
  try {
    build_prototypes({from_rows({{1, 0}, {-1, 0}}), from_rows({{0, 1}})});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degeneracy);
  }
  try {
    build_prototypes({from_rows({{1, 0}}), from_rows({{0, 1, 0}})});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
  }
}

TEST(ZsLogits, Cases) {
  const auto p = make_prototype_set(from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  const Matrix l = zs_logits(from_rows({{1, 0, 0}}), p);
  EXPECT_NEAR(l(0, 0), 100.0, 1e-12);
  EXPECT_EQ(l(0, 1), 0.0);

  const double c = 1.0 / std::sqrt(3.0);
  const auto probs = softmax(zs_logits(from_rows({{c, c, c}}), p).row(0));
  for (double x : probs) EXPECT_NEAR(x, 1.0 / 3, 1e-12);

  const auto unit = make_prototype_set(from_rows({{1, 0}, {0, 1}}), 1.0);
  EXPECT_NEAR(zs_logits(from_rows({{0.3, 0.9}}), unit)(0, 0), 0.3, 1e-15);
}

TEST(RangeTable, Cases) {
  const auto r = zs_range_table(from_rows({{100, 0, 50}, {2, 2, 2}}));
  EXPECT_EQ(r[0], (RangePair{0, 100}));
  EXPECT_EQ(r[1], (RangePair{2, 2}));
}

TEST(RangeTable, MatchesRowScan) {
  std::mt19937_64 rng(1);
  const Matrix l = testutil::random_matrix(rng, 5, 4);
  const auto r = zs_range_table(l);
  for (std::size_t i = 0; i < 5; ++i) {
    double lo = l(i, 0), hi = l(i, 0);
    for (std::size_t k = 1; k < 4; ++k) {
      if (l(i, k) < lo) lo = l(i, k);
      if (l(i, k) > hi) hi = l(i, k);
    }
    EXPECT_EQ(r[i].lo, lo);
    EXPECT_EQ(r[i].hi, hi);
  }
}
