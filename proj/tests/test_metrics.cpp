#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ssvc/evaluate.hpp"
#include "ssvc/metrics.hpp"
#include "ssvc/stats.hpp"
#include "ssvc/synth.hpp"

using namespace ssvc;
using namespace ssvc::metrics;

namespace {

std::string fixture(const std::string& name) { return std::string(SSVC_FIXTURE_DIR) + "/" + name; }

/// Plain recursive edit distance with memoization over (i, j) suffixes.
int edit_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    int& m = memo[i][j];
    if (m >= 0) return m;
    if (a[i] == b[j]) return m = go(i + 1, j + 1);
    return m = 1 + std::min({go(i + 1, j), go(i, j + 1), go(i + 1, j + 1)});
  };
  return go(0, 0);
}

std::vector<int> random_symbols(Rng& rng, int max_len, int alphabet) {
  std::vector<int> s(static_cast<std::size_t>(rng.below(max_len + 1)));
  for (int& v : s) v = rng.below(alphabet);
  return s;
}

synth::SpeakerParams speaker(std::uint64_t seed, int id) { return synth::make_speaker(seed, id); }

}  // namespace

TEST(EditDistance, IdenticalIsZero) {
  const std::vector<int> a{1, 2, 3};
  EXPECT_EQ(edit_distance_rate(a, a), 0.0);
}

TEST(EditDistance, OneSubstitutionInThree) {
  EXPECT_DOUBLE_EQ(edit_distance_rate(std::vector<int>{0, 9, 2}, std::vector<int>{0, 1, 2}), 1.0 / 3.0);
}

TEST(EditDistance, EmptyReference) {
  EXPECT_EQ(edit_distance_rate(std::vector<int>{}, std::vector<int>{}), 0.0);
  EXPECT_THROW(edit_distance_rate(std::vector<int>{1}, std::vector<int>{}), DataError);
  EXPECT_EQ(edit_distance_rate(std::vector<int>{}, std::vector<int>{1, 2}), 1.0);
}

TEST(EditDistance, InsertionsCanExceedOne) {
  EXPECT_DOUBLE_EQ(edit_distance_rate(std::vector<int>{1, 2, 3, 4}, std::vector<int>{5}), 4.0);
}

TEST(EditDistance, MatchesRecursiveOracle) {
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_symbols(rng, 14, 4), b = random_symbols(rng, 14, 4);
    ASSERT_EQ(levenshtein(a, b), edit_oracle(a, b));
  }
}

TEST(EditDistance, TriangleInequality) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_symbols(rng, 12, 3), b = random_symbols(rng, 12, 3), c = random_symbols(rng, 12, 3);
    ASSERT_LE(levenshtein(a, c), levenshtein(a, b) + levenshtein(b, c));
    if (!b.empty() && !c.empty()) {
      const double lhs = edit_distance_rate(a, c);
      const double rhs = edit_distance_rate(a, b) * static_cast<double>(b.size()) / static_cast<double>(c.size()) +
                         edit_distance_rate(b, c);
      ASSERT_LE(lhs, rhs + 1e-12);
    }
  }
}

TEST(WerAnalog, CleanUtteranceIsZero) {
  const synth::World w;
  const auto s = speaker(11, 0);
  const std::vector<int> content{3, 1, 4, 1, 5, 9, 2, 6};
  const auto u = w.make_utterance({s, content, 7, 4, 0.0f});
  EXPECT_EQ(wer_analog(w, u.features.frames, content, s), 0.0);
}

TEST(WerAnalog, DuplicatedBlockIsOneInsertion) {
  const synth::World w;
  const auto s = speaker(12, 0);
  std::vector<int> content{3, 1, 4, 1, 5, 9, 2, 6};
  auto dup = content;
  dup.insert(dup.begin() + 4, dup[4]);
  const auto u = w.make_utterance({s, dup, 7, 4, 0.0f});
  EXPECT_DOUBLE_EQ(wer_analog(w, u.features.frames, content, s), 1.0 / 8.0);
}

TEST(WerAnalog, PartialTrailingBlockIsIgnored) {
  const synth::World w;
  const auto s = speaker(13, 0);
  const std::vector<int> content{0, 7, 2};
  const auto u = w.make_utterance({s, content, 1, 4, 0.0f});
  Tensor longer = Tensor::matrix(u.features.length() + 2, u.features.dim());
  std::copy(u.features.frames.data(), u.features.frames.data() + u.features.frames.size(), longer.data());
  EXPECT_EQ(wer_analog(w, longer, content, s), 0.0);
  EXPECT_EQ(wer_analog(w, Tensor::matrix(2, u.features.dim()), content, s), 1.0);
}

TEST(Secs, SelfSimilarityIsOne) {
  const synth::World w;
  const auto u = w.make_utterance({speaker(14, 0), {1, 2, 3, 4, 5}, 3, 4, 0.02f});
  EXPECT_NEAR(secs(w, u.features.frames, u.features.frames), 1.0, 1e-12);
}

TEST(Secs, SameSpeakerPairsScoreHigherThanDifferentSpeakerPairs) {
  const synth::World w;
  Rng rng(15);
  const auto seeds = synth::select_speaker_seeds(1234, 8, 0.9);
  double same = 0, diff = 0;
  const int trials = 100;
  auto utt = [&](int spk) {
    std::vector<int> c(static_cast<std::size_t>(5 + rng.below(8)));
    for (int& v : c) v = rng.below(16);
    return w.make_utterance({speaker(seeds[static_cast<std::size_t>(spk)], spk), c, rng.next(), 4, 0.02f}).features.frames;
  };
  for (int i = 0; i < trials; ++i) {
    const int a = rng.below(8);
    const int b = (a + 1 + rng.below(7)) % 8;
    same += secs(w, utt(a), utt(a));
    diff += secs(w, utt(a), utt(b));
  }
  EXPECT_GT(same / trials, diff / trials + 0.5);
}

TEST(F0Correlation, IdentityAndNegation) {
  const std::vector<float> c{0.1f, -0.4f, 0.3f, 0.9f, -0.2f};
  std::vector<float> neg(c.size());
  std::transform(c.begin(), c.end(), neg.begin(), [](float v) { return -v; });
  EXPECT_NEAR(f0_correlation(c, c), 1.0, 1e-12);
  EXPECT_NEAR(f0_correlation(c, neg), -1.0, 1e-12);
}

TEST(F0Correlation, MatchesRawMomentOracle) {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + rng.below(60);
    std::vector<float> a(static_cast<std::size_t>(n)), b(a.size());
    for (int i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = static_cast<float>(rng.normal());
      b[static_cast<std::size_t>(i)] = static_cast<float>(0.5 * a[static_cast<std::size_t>(i)] + rng.normal());
    }
    long double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int i = 0; i < n; ++i) {
      const long double x = a[static_cast<std::size_t>(i)], y = b[static_cast<std::size_t>(i)];
      sa += x, sb += y, saa += x * x, sbb += y * y, sab += x * y;
    }
    const long double cov = sab - sa * sb / n, va = saa - sa * sa / n, vb = sbb - sb * sb / n;
    const double oracle = static_cast<double>(cov / std::sqrt(va * vb));
    ASSERT_NEAR(f0_correlation(a, b), oracle, 1e-6);
  }
}

TEST(F0Correlation, InvariantUnderPositiveAffineMaps) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> a(30), b(30), a2(30);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(rng.normal()), b[i] = static_cast<float>(rng.normal() + a[i]);
    const double scale = 0.1 + 5 * rng.uniform(), shift = 4 * rng.normal();
    for (std::size_t i = 0; i < a.size(); ++i) a2[i] = static_cast<float>(scale * a[i] + shift);
    ASSERT_NEAR(f0_correlation(a, b), f0_correlation(a2, b), 1e-6);
  }
}

TEST(F0Correlation, InvalidInputsThrow) {
  const std::vector<float> c{1, 2, 3}, k{2, 2, 2};
  EXPECT_THROW(f0_correlation(c, k), DataError);
  EXPECT_THROW(f0_correlation(c, std::vector<float>{1, 2}), DataError);
  EXPECT_THROW(f0_correlation(std::vector<float>{1}, std::vector<float>{1}), DataError);
  EXPECT_NEAR(f0_correlation_truncated(c, std::vector<float>{3, 2}), -1.0, 1e-12);
}

TEST(Probe, SeparableClassesAreLearned) {
  Rng rng(18);
  std::vector<std::vector<float>> tr, ev;
  std::vector<int> ytr, yev;
  for (int i = 0; i < 200; ++i) {
    const int y = i % 4;
    std::vector<float> x(6);
    for (float& v : x) v = static_cast<float>(0.3 * rng.normal());
    x[static_cast<std::size_t>(y)] += 2.0f;
    (i < 120 ? tr : ev).push_back(x);
    (i < 120 ? ytr : yev).push_back(y);
  }
  EXPECT_GE(speaker_probe(stack_rows(tr), ytr, stack_rows(ev), yev), 0.98);
}

TEST(Probe, ShuffledLabelsGiveChance) {
  Rng rng(19);
  const int C = 8, N = 800;
  std::vector<std::vector<float>> xs;
  std::vector<int> ys;
  for (int i = 0; i < N; ++i) {
    std::vector<float> x(10);
    for (float& v : x) v = static_cast<float>(rng.normal());
    x[static_cast<std::size_t>(i % C)] += 3.0f;
    xs.push_back(x);
    ys.push_back(i % C);
  }
  rng.shuffle(ys);
  const std::vector<std::vector<float>> tr(xs.begin(), xs.begin() + N / 2), ev(xs.begin() + N / 2, xs.end());
  const std::vector<int> ytr(ys.begin(), ys.begin() + N / 2), yev(ys.begin() + N / 2, ys.end());
  const double acc = speaker_probe(stack_rows(tr), ytr, stack_rows(ev), yev);
  const double chance = 1.0 / C, se = std::sqrt(chance * (1 - chance) / (N / 2));
  EXPECT_LT(std::fabs(acc - chance), 3 * se);
}

TEST(Probe, SingleClassThrows) {
  const Tensor x = Tensor::matrix(4, 3, 1.0f);
  EXPECT_THROW(speaker_probe(x, {0, 0, 0, 0}, x, {0, 0, 0, 0}), DataError);
}

// Fixture computed once with scipy 1.15.3 stats.ttest_rel and frozen.
TEST(TTest, MatchesFrozenFixture) {
  const std::vector<double> a{72.5, 81.0, 64.25, 90.0, 55.5, 77.0, 69.75, 84.5, 60.0, 73.25};
  const std::vector<double> b{70.0, 76.5, 66.0, 82.25, 51.0, 74.5, 63.0, 80.0, 61.5, 68.75};
  const auto r = stats::paired_ttest(a, b);
  EXPECT_NEAR(r.t, 3.480926540502461, 1e-6);
  EXPECT_NEAR(r.p, 0.0069284382414268935, 1e-4);
  EXPECT_EQ(r.df, 9);
  EXPECT_NEAR(r.mean_difference, 3.425, 1e-12);
}

TEST(TTest, TextbookStatistic) {
  Rng rng(20);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + rng.below(30);
    std::vector<double> a(static_cast<std::size_t>(n)), b(a.size()), d(a.size());
    for (int i = 0; i < n; ++i) {
      a[static_cast<std::size_t>(i)] = 50 + 10 * rng.normal();
      b[static_cast<std::size_t>(i)] = 50 + 10 * rng.normal();
      d[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)];
    }
    double m = 0, s2 = 0;
    for (double v : d) m += v / n;
    for (double v : d) s2 += (v - m) * (v - m) / (n - 1);
    const auto r = stats::paired_ttest(a, b);
    ASSERT_NEAR(r.t, m / std::sqrt(s2 / n), 1e-9 * (1 + std::fabs(r.t)));
    ASSERT_GE(r.p, 0.0);
    ASSERT_LE(r.p, 1.0);
  }
}

TEST(TTest, IdenticalScoresGiveZeroAndOne) {
  const std::vector<double> a{1, 5, 2, 8};
  const auto r = stats::paired_ttest(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
}

TEST(TTest, SwapNegatesTAndKeepsP) {
  const std::vector<double> a{3, 5, 2, 8, 7}, b{1, 5, 3, 4, 6};
  const auto r = stats::paired_ttest(a, b), s = stats::paired_ttest(b, a);
  EXPECT_EQ(r.t, -s.t);
  EXPECT_EQ(r.p, s.p);
}

TEST(TTest, ConstantDifferenceReportsMean) {
  const std::vector<double> a{3, 4, 5}, b{1, 2, 3};
  try {
    stats::paired_ttest(a, b);
    FAIL() << "expected ZeroVarianceError";
  } catch (const stats::ZeroVarianceError& e) {
    EXPECT_EQ(e.mean_difference, 2.0);
  }
}

TEST(TTest, PValueFallsAsShiftGrows) {
  Rng rng(21);
  std::vector<double> base(20), noise(20);
  for (std::size_t i = 0; i < base.size(); ++i) base[i] = 50 + 10 * rng.normal(), noise[i] = rng.normal();
  double mean = 0;
  for (double v : noise) mean += v / static_cast<double>(noise.size());
  for (double& v : noise) v -= mean;
  double prev = 2.0;
  for (int k = 0; k <= 20; ++k) {
    std::vector<double> shifted(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) shifted[i] = base[i] + noise[i] + 0.1 * k;
    const double p = stats::paired_ttest(shifted, base).p;
    if (k > 0) EXPECT_LE(p, prev);
    prev = p;
  }
}

TEST(TTest, BadLengthsThrow) {
  EXPECT_THROW(stats::paired_ttest({1, 2}, {1}), DataError);
  EXPECT_THROW(stats::paired_ttest({1}, {2}), DataError);
}

TEST(Mushra, ValidFixtureParses) {
  const auto t = stats::mushra_ingest(fixture("mushra_valid.csv"));
  ASSERT_EQ(t.systems, (std::vector<std::string>{"ssvc", "baseline"}));
  EXPECT_EQ(t.keys.size(), 8u);
  EXPECT_EQ(t.of("ssvc"), (std::vector<double>{78, 85, 62, 90, 71, 66, 88, 74}));
  EXPECT_EQ(t.of("baseline"), (std::vector<double>{70, 80, 60, 83, 65, 61, 79, 70}));
  EXPECT_THROW(static_cast<void>(t.of("other")), DataError);
}

TEST(Mushra, MalformedFixturesNameTheRow) {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"mushra_out_of_range.csv", "row 6: score 101"},
      {"mushra_duplicate.csv", "row 7: duplicate"},
      {"mushra_ragged.csv", "row 8: ragged block"},
  };
  for (const auto& [file, want] : cases) {
    try {
      stats::mushra_ingest(fixture(file));
      ADD_FAILURE() << file << " was accepted";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(want), std::string::npos) << file << ": " << e.what();
    }
  }
}

TEST(Mushra, OtherMalformedInputs) {
  EXPECT_THROW(stats::parse_mushra(""), DataError);
  EXPECT_THROW(stats::parse_mushra("tester,item,system,score\n"), DataError);
  EXPECT_THROW(stats::parse_mushra("tester,system,item,score\n"), DataError);
  EXPECT_THROW(stats::parse_mushra("tester,system,item,score\nt,s,i,abc\n"), DataError);
  EXPECT_THROW(stats::parse_mushra("tester,system,item,score\nt,s,i,-1\n"), DataError);
  EXPECT_THROW(stats::parse_mushra("tester,system,item,score\nt,s,i\n"), DataError);
  EXPECT_NO_THROW(stats::parse_mushra("tester,system,item,score\r\nt,s,i,100\r\n\r\n"));
}

TEST(Mushra, IdenticalColumnsReportNoDifference) {
  const auto t = stats::parse_mushra("tester,system,item,score\nt1,a,i,50\nt1,b,i,50\nt2,a,i,70\nt2,b,i,70\n");
  const auto row = eval::compare("MUSHRA", "a", "b", "score", t.of("a"), t.of("b"));
  ASSERT_TRUE(row.result.has_value());
  EXPECT_EQ(row.result->p, 1.0);
  EXPECT_EQ(row.note, "no difference");
  const auto shifted = eval::compare("MUSHRA", "a", "b", "score", {1, 2, 3}, {0, 1, 2});
  EXPECT_FALSE(shifted.result.has_value());
  EXPECT_NE(shifted.note.find("constant difference"), std::string::npos);
}
