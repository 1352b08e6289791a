#include <gtest/gtest.h>

#include <random>

#include "atbias/error.hpp"
#include "atbias/token_space.hpp"
#include "test_util.hpp"

using namespace atbias;
using atbias::testing::make_dist;

TEST(NormalizePiece, StripsByteLevelMarkerAndFoldsCase) {
  EXPECT_EQ(normalize_piece("ĠDaw"), "daw");
  EXPECT_EQ(normalize_piece("Stephen"), "stephen");
  EXPECT_EQ(normalize_piece(""), "");
}

TEST(NormalizePiece, StripsSentencePieceMarkerAndSpaces) {
  EXPECT_EQ(normalize_piece("▁Richard"), "richard");
  EXPECT_EQ(normalize_piece(" King "), "king");
  EXPECT_EQ(normalize_piece("▁"), "");
  EXPECT_EQ(normalize_piece("▁▁Ġx"), "x");
  EXPECT_EQ(normalize_piece("kins"), "kins");
}

TEST(NormalizePiece, KeepsInteriorMarkersAndNonAscii) {
  EXPECT_EQ(normalize_piece("a▁b"), "a▁b");
  EXPECT_EQ(normalize_piece("▁Zürich"), "zürich");
}

TEST(NormalizePiece, IdempotentOnRandomPieces) {
  std::mt19937_64 rng(7);
  const std::vector<std::string> parts = {"▁", "Ġ", " ", "A", "b", "Ö", "\t", "x", "Z"};
  std::uniform_int_distribution<std::size_t> pick(0, parts.size() - 1);
  std::uniform_int_distribution<int> len(0, 8);
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    for (int j = len(rng); j > 0; --j) s += parts[pick(rng)];
    const auto once = normalize_piece(s);
    EXPECT_EQ(normalize_piece(once), once) << "input '" << s << "'";
  }
}

TEST(PieceNormalizer, CustomMarkers) {
  PieceNormalizer norm({"##"});
  EXPECT_EQ(norm.normalize("##Kins"), "kins");
  EXPECT_EQ(norm.normalize("▁Kins"), "▁kins");
}

TEST(PieceNormalizer, SurfaceReplacesLeadingMarkerWithSpace) {
  PieceNormalizer norm;
  EXPECT_EQ(norm.to_surface("▁King"), " King");
  EXPECT_EQ(norm.to_surface("ĠKing"), " King");
  EXPECT_EQ(norm.to_surface("ley"), "ley");
}

TEST(TokenDistribution, RejectsUnsortedEntries) {
  std::vector<TokenEntry> e = {{TokenId(0), TokenPiece("a"), 0.2},
                               {TokenId(1), TokenPiece("b"), 0.7}};
  EXPECT_THROW(TokenDistribution(e, DistributionOrigin::top_slice), PreconditionError);
}

TEST(TokenDistribution, RejectsNegativeOrNonFinite) {
  EXPECT_THROW(make_dist({{"a", -0.1}}), PreconditionError);
  EXPECT_THROW(make_dist({{"a", std::nan("")}}), PreconditionError);
}

TEST(TokenDistribution, RejectsDuplicateIds) {
  std::vector<TokenEntry> e = {{TokenId(3), TokenPiece("a"), 0.5},
                               {TokenId(3), TokenPiece("b"), 0.4}};
  EXPECT_THROW(TokenDistribution(e, DistributionOrigin::top_slice), PreconditionError);
}

TEST(TokenDistribution, CoverageBounds) {
  EXPECT_THROW(make_dist({{"a", 0.8}, {"b", 0.3}}), PreconditionError);
  EXPECT_THROW(make_dist({{"a", 0.5}}, DistributionOrigin::full_vocabulary),
               PreconditionError);
  EXPECT_NO_THROW(make_dist({{"a", 0.5}, {"b", 0.5}}, DistributionOrigin::full_vocabulary));
}

TEST(TokenDistribution, FromUnsortedBreaksTiesById) {
  const auto d = make_dist({{"a", 0.25}, {"b", 0.5}, {"c", 0.25}});
  EXPECT_EQ(d[0].piece.raw, "b");
  EXPECT_EQ(d[1].token, TokenId(0));
  EXPECT_EQ(d[2].token, TokenId(2));
  EXPECT_EQ(d.find(TokenId(2)), 2u);
  EXPECT_EQ(d.find(TokenId(9)), d.size());
}

TEST(TopSlice, TruncatesWithoutRenormalizing) {
  const auto d = make_dist({{"a", 0.7}, {"b", 0.2}, {"c", 0.1}},
                           DistributionOrigin::full_vocabulary);
  const auto s = top_slice(d, 2);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].piece.raw, "a");
  EXPECT_DOUBLE_EQ(s[0].prob, 0.7);
  EXPECT_DOUBLE_EQ(s[1].prob, 0.2);
  EXPECT_NEAR(s.coverage(), 0.9, 1e-12);
  EXPECT_EQ(s.origin(), DistributionOrigin::top_slice);
}

TEST(TopSlice, NoOpWhenKeepingEverything) {
  const auto d = make_dist({{"a", 0.7}, {"b", 0.2}, {"c", 0.1}});
  const auto s = top_slice(d, 10);
  ASSERT_EQ(s.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(s[i].token, d[i].token);
}

TEST(TopSlice, Singleton) {
  const auto s = top_slice(make_dist({{"a", 1.0}}), 1);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s.coverage(), 1.0);
}

TEST(TopSlice, Errors) {
  EXPECT_THROW((void)top_slice(TokenDistribution(), 3), PreconditionError);
  EXPECT_THROW((void)top_slice(make_dist({{"a", 1.0}}), 0), PreconditionError);
}

TEST(TopSlice, PreservesOrderAndNeverIncreasesCoverage) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto d = atbias::testing::random_dist(rng, 1 + rng() % 64);
    const auto s = top_slice(d, 1 + rng() % 80);
    EXPECT_LE(s.coverage(), d.coverage() + 1e-12);
    for (std::size_t j = 0; j < s.size(); ++j) EXPECT_EQ(s[j].token, d[j].token);
    for (const auto& e : d.entries()) EXPECT_LE(e.prob, d[0].prob);
  }
}
