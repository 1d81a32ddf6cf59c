#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "olivine/rng.hpp"

using olivine::Rng;

namespace {

// Reference xoshiro256** step written from the published algorithm.
struct RefXoshiro {
  std::uint64_t s[4];
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

}  // namespace

TEST(SplitMix64, KnownSequenceFromZero) {
  std::uint64_t state = 0;
  EXPECT_EQ(olivine::splitmix64(state), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(olivine::splitmix64(state), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(olivine::splitmix64(state), 0x06C45D188009454FULL);
  EXPECT_EQ(olivine::splitmix64(state), 0xF88BB8A8724C81ECULL);
}

TEST(Rng, MatchesReferenceXoshiroSeededBySplitMix) {
  RefXoshiro ref{{0xE220A8397B1DCDAFULL, 0x6E789E6AA1B965F4ULL, 0x06C45D188009454FULL, 0xF88BB8A8724C81ECULL}};
  Rng rng(0);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(rng.next_u64(), ref.next()) << "draw " << i;
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, DeriveIsDeterministicAndKeySensitive) {
  auto first = [](std::initializer_list<std::uint64_t> k) { return Rng::derive(k).next_u64(); };
  EXPECT_EQ(first({1, 2, 3}), first({1, 2, 3}));
  EXPECT_NE(first({1, 2, 3}), first({1, 3, 2}));
  EXPECT_NE(first({1, 2}), first({1, 2, 0}));
  EXPECT_NE(first({7}), first({8}));
}

TEST(Rng, UniformStaysInHalfOpenUnitInterval) {
  Rng rng(5);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(Rng, UniformIntCoversInclusiveRangeEvenly) {
  Rng rng(9);
  std::vector<int> hist(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const auto v = rng.uniform_int(-3, 3);
    ASSERT_GE(v, -3);
    ASSERT_LE(v, 3);
    ++hist[static_cast<std::size_t>(v + 3)];
  }
  for (int c : hist) EXPECT_NEAR(c, n / 7, 500);
  EXPECT_EQ(rng.uniform_int(4, 4), 4);
}

TEST(Rng, NormalHasUnitMoments) {
  Rng rng(11);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, BernoulliEdgeProbabilities) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_FALSE(rng.bernoulli(0.0));
    EXPECT_TRUE(rng.bernoulli(1.0));
  }
}

TEST(Rng, ShuffleIsAPermutationAndSeedDependent) {
  std::vector<int> v(50), w(50);
  std::iota(v.begin(), v.end(), 0);
  w = v;
  Rng a(1), b(2);
  a.shuffle(std::span(v));
  b.shuffle(std::span(w));
  EXPECT_NE(v, w);
  std::set<int> seen(v.begin(), v.end());
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_EQ(*seen.begin(), 0);
  EXPECT_EQ(*seen.rbegin(), 49);
}
