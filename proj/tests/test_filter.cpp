#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "atbias/error.hpp"
#include "atbias/filter.hpp"
#include "test_util.hpp"

using namespace atbias;
using atbias::testing::id_of;
using atbias::testing::make_dist;

namespace {

std::set<std::string> pieces(const TokenDistribution& d, const std::vector<TokenId>& ids) {
  std::set<std::string> out;
  for (auto id : ids) out.insert(d[d.find(id)].piece.raw);
  return out;
}

TokenDistribution abcd() {
  return make_dist({{"a", 0.7}, {"b", 0.2}, {"c", 0.06}, {"d", 0.04}},
                   DistributionOrigin::full_vocabulary);
}

}  // namespace

TEST(FilterConfig, DefaultsAndValidation) {
  FilterConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.alpha, 0.0005);
  EXPECT_EQ(cfg.k, 10u);
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_THROW((FilterConfig{0.0, 10}.validate()), ConfigError);
  EXPECT_THROW((FilterConfig{1.5, 10}.validate()), ConfigError);
  EXPECT_THROW((FilterConfig{0.1, 0}.validate()), ConfigError);
}

TEST(ProbabilisticFilter, ThresholdRelativeToMax) {
  const auto d = abcd();
  EXPECT_EQ(pieces(d, probabilistic_filter(d, 0.1)), (std::set<std::string>{"a", "b"}));
}

TEST(ProbabilisticFilter, AlphaOneKeepsOnlyTheMaximum) {
  const auto d = abcd();
  EXPECT_EQ(pieces(d, probabilistic_filter(d, 1.0)), (std::set<std::string>{"a"}));
  const auto tie = make_dist({{"a", 0.5}, {"b", 0.5}});
  EXPECT_EQ(pieces(tie, probabilistic_filter(tie, 1.0)), (std::set<std::string>{"a", "b"}));
}

TEST(RankFilter, CutsAtRankK) {
  const auto d = abcd();
  EXPECT_EQ(pieces(d, rank_filter(d, 3)), (std::set<std::string>{"a", "b", "c"}));
  EXPECT_EQ(pieces(d, rank_filter(d, 1)), (std::set<std::string>{"a"}));
}

TEST(RankFilter, KeepsTiesAtRankK) {
  const auto d = make_dist({{"a", 0.4}, {"b", 0.3}, {"c", 0.3}});
  EXPECT_EQ(pieces(d, rank_filter(d, 2)), (std::set<std::string>{"a", "b", "c"}));
}

TEST(HeadFilter, IntersectsBothFilters) {
  const auto d = abcd();
  const auto head = head_filter(d, {0.1, 3});
  EXPECT_EQ(pieces(d, head.members), (std::set<std::string>{"a", "b"}));
  EXPECT_NEAR(head.threshold_prob, 0.07, 1e-12);
  EXPECT_DOUBLE_EQ(head.kth_prob, 0.06);
  EXPECT_EQ(head.members.front(), id_of(d, "a"));
}

TEST(HeadFilter, VacuousConstraintsKeepEverything) {
  const auto d = abcd();
  EXPECT_EQ(head_filter(d, {1e-12, 4}).size(), 4u);
}

TEST(HeadFilter, DefaultsDropTokenBelowAlphaThreshold) {
  // a:0.9, b:0.0004, then 398 tokens of 0.00024 (sum 1).
  std::vector<std::pair<std::string, double>> rows = {{"a", 0.9}, {"b", 0.0004}};
  for (int i = 0; i < 398; ++i) rows.emplace_back("r" + std::to_string(i), 0.0996 / 398);
  const auto d = make_dist(rows, DistributionOrigin::full_vocabulary);
  const auto head = head_filter(d, FilterConfig{});
  EXPECT_EQ(pieces(d, head.members), (std::set<std::string>{"a"}));
}

TEST(HeadFilter, ShortSliceIsRejected) {
  const auto d = make_dist({{"a", 0.5}, {"b", 0.3}});
  EXPECT_THROW((void)head_filter(d, {0.1, 10}), ConfigError);
  const auto full = make_dist({{"a", 0.6}, {"b", 0.4}}, DistributionOrigin::full_vocabulary);
  EXPECT_EQ(head_filter(full, {0.1, 10}).size(), 2u);
}

TEST(HeadFilter, EmptyDistribution) {
  EXPECT_THROW((void)head_filter(TokenDistribution(), {0.1, 1}), PreconditionError);
}

TEST(MaskDistribution, RestrictsToHead) {
  const auto d = make_dist({{"a", 0.7}, {"b", 0.2}, {"c", 0.1}});
  HeadSet head;
  head.members = {id_of(d, "a"), id_of(d, "b")};
  const auto m = mask_distribution(d, head);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m[0].prob, 0.7);
  EXPECT_DOUBLE_EQ(m[1].prob, 0.2);

  head.members = {id_of(d, "a"), id_of(d, "b"), id_of(d, "c")};
  EXPECT_EQ(mask_distribution(d, head).size(), 3u);
  head.members = {id_of(d, "a")};
  EXPECT_EQ(mask_distribution(d, head).size(), 1u);
  head.members = {TokenId(99)};
  EXPECT_THROW((void)mask_distribution(d, head), PreconditionError);
}

TEST(FilterProperties, MonotoneInAlphaAndK) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-6, 1.0);
  for (int i = 0; i < 500; ++i) {
    const auto d = atbias::testing::random_dist(rng, 2 + rng() % 100);
    double a1 = u(rng), a2 = u(rng);
    if (a1 > a2) std::swap(a1, a2);
    const auto loose = probabilistic_filter(d, a1);
    for (auto id : probabilistic_filter(d, a2)) {
      EXPECT_NE(std::find(loose.begin(), loose.end(), id), loose.end());
    }
    std::size_t k1 = 1 + rng() % 20, k2 = 1 + rng() % 20;
    if (k1 > k2) std::swap(k1, k2);
    const auto wide = rank_filter(d, k2);
    for (auto id : rank_filter(d, k1)) {
      EXPECT_NE(std::find(wide.begin(), wide.end(), id), wide.end());
    }
  }
}

TEST(FilterProperties, SliceOfAtLeastKIsSufficient) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto size = 4 + rng() % 200;
    const auto d = atbias::testing::random_dist(rng, size);
    FilterConfig cfg{std::uniform_real_distribution<double>(1e-5, 1.0)(rng),
                     1 + rng() % std::min<std::size_t>(size, 32)};
    const auto slice = top_slice(d, cfg.k + rng() % 8);
    // Ties at rank k may extend past the slice, so only compare when the
    // slice holds the whole tie block.
    const auto full = head_filter(d, cfg);
    if (slice.size() < d.size() && slice[slice.size() - 1].prob == d[slice.size()].prob) {
      continue;
    }
    EXPECT_EQ(head_filter(slice, cfg).members, full.members);
  }
}
