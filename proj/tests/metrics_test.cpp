#include "netecho/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "netecho/common.hpp"

namespace nm = netecho::metrics;
using netecho::Rng;

namespace {

// Full-matrix Wagner-Fischer over bytes (ASCII inputs only).
std::size_t dp_edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    }
  }
  return d[a.size()][b.size()];
}

std::string random_string(Rng& rng) {
  const auto n = static_cast<std::size_t>(rng.uniform_int(0, 24));
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + rng.uniform_int(0, 3)));
  return s;
}

}  // namespace

TEST(Ned, Examples) {
  EXPECT_DOUBLE_EQ(nm::ned("same text", "same text"), 1.0);
  EXPECT_NEAR(nm::ned("abc", "abd"), 1.0 - 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(nm::ned("", "xyz"), 0.0);
  EXPECT_DOUBLE_EQ(nm::ned("", ""), 1.0);
}

TEST(Ned, CountsUnicodeScalars) {
  EXPECT_EQ(nm::levenshtein("caf\xc3\xa9", "cafe"), 1u);
  EXPECT_NEAR(nm::ned("caf\xc3\xa9", "cafe"), 0.75, 1e-12);
}

TEST(Ned, MatchesDynamicProgrammingOracle) {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_string(rng);
    const auto b = random_string(rng);
    const std::size_t d = dp_edit_distance(a, b);
    ASSERT_EQ(nm::levenshtein(a, b), d) << a << " / " << b;
    const double expected =
        a.empty() && b.empty() ? 1.0 : 1.0 - static_cast<double>(d) / std::max(a.size(), b.size());
    ASSERT_EQ(nm::ned(a, b), expected);
    ASSERT_EQ(nm::ned(a, b), nm::ned(b, a));
  }
}

TEST(Rouge, Examples) {
  EXPECT_DOUBLE_EQ(nm::rouge1_f1("the cat sat", "the cat sat"), 1.0);
  EXPECT_DOUBLE_EQ(nm::rouge1_f1("alpha beta", "gamma delta"), 0.0);
  EXPECT_NEAR(nm::rouge1_f1("a b c", "a b d"), 2.0 / 3.0, 1e-9);
}

TEST(Rouge, ClippedCountsAndCase) {
  // Overlap min(3,1) + min(1,1) = 2; p = 2/4, r = 2/2.
  EXPECT_NEAR(nm::rouge1_f1("a a a B", "A b"), 2 * 0.5 * 1.0 / 1.5, 1e-9);
  EXPECT_DOUBLE_EQ(nm::rouge1_f1("", ""), 1.0);
  EXPECT_DOUBLE_EQ(nm::rouge1_f1("", "x"), 0.0);
  EXPECT_DOUBLE_EQ(nm::rouge1_f1("x y z", "z q"), nm::rouge1_f1("z q", "x y z"));
}

TEST(TfCosine, Examples) {
  EXPECT_NEAR(nm::tf_cosine("a a b", "a b b"), 0.8, 1e-9);
  EXPECT_NEAR(nm::tf_cosine("one two", "one two"), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(nm::tf_cosine("one", "two"), 0.0);
  EXPECT_NEAR(nm::tf_cosine("a b c", "c d"), 1.0 / std::sqrt(6.0), 1e-9);
  EXPECT_DOUBLE_EQ(nm::cos_sim("x y", "y z"), nm::cos_sim("y z", "x y"));
}

TEST(Success, BoundaryIsInclusive) {
  nm::SimilarityReport r;
  r.prompt_ned = 0.6;
  r.response_ned = 0.4;
  EXPECT_TRUE(r.success());
  r.response_ned = 0.39;
  EXPECT_FALSE(r.success());
}

TEST(Success, RateIsCountOverTotal) {
  Rng rng(5);
  std::vector<nm::SimilarityReport> reports;
  int hits = 0;
  for (int i = 0; i < 57; ++i) {
    nm::SimilarityReport r;
    r.prompt_ned = rng.uniform();
    r.response_ned = rng.uniform();
    if ((r.prompt_ned + r.response_ned) / 2 >= 0.5) ++hits;
    reports.push_back(r);
  }
  EXPECT_DOUBLE_EQ(nm::success_rate(reports), hits / 57.0);
  nm::SimilarityReport perfect{1, 1, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(nm::success_rate({perfect, perfect}), 1.0);
  EXPECT_THROW(nm::success_rate({}), netecho::Error);
}

TEST(Compare, FillsAllFields) {
  const auto r = nm::compare("a b c", "x y", "a b d", "x y");
  EXPECT_NEAR(r.prompt_ned, 1.0 - 1.0 / 5.0, 1e-12);
  EXPECT_NEAR(r.prompt_rouge1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.prompt_cos, 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.response_ned, 1.0);
  EXPECT_DOUBLE_EQ(r.response_rouge1, 1.0);
  EXPECT_NEAR(r.response_cos, 1.0, 1e-12);
}

TEST(ReportCsv, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "netecho_report_test.csv";
  std::vector<nm::ReportRow> rows{{"v1", {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}},
                                  {"v2", {1, 1, 1, 0.25, 0.5, -0.5}}};
  nm::write_report_csv(rows, path);
  const auto back = nm::read_report_csv(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].trial, "v2");
  EXPECT_DOUBLE_EQ(back[0].report.prompt_cos, 0.3);
  EXPECT_DOUBLE_EQ(back[1].report.response_cos, -0.5);
  std::filesystem::remove(path);
}
