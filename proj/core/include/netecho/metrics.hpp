// Recovery similarity at character, word and embedding level, and the
// success accounting built on them.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace netecho::retrieval {
class DualTower;
}

namespace netecho::metrics {

/// 1 - levenshtein(a, b) / max(|a|, |b|) over Unicode scalar values; 1 when
/// both are empty.
double ned(std::string_view a, std::string_view b);

/// Plain edit distance over Unicode scalar values.
std::size_t levenshtein(std::string_view a, std::string_view b);

/// Unigram F1 with clipped counts over lower-cased whitespace words. Two
/// empty texts score 1, one empty text scores 0.
double rouge1_f1(std::string_view a, std::string_view b);

/// Cosine of lower-cased whitespace word counts.
double tf_cosine(std::string_view a, std::string_view b);

/// Cosine of text-tower embeddings, or tf_cosine when `tower` is null.
double cos_sim(std::string_view a, std::string_view b,
               const retrieval::DualTower* tower = nullptr);

struct SimilarityReport {
  double prompt_ned = 0.0;
  double prompt_rouge1 = 0.0;
  double prompt_cos = 0.0;
  double response_ned = 0.0;
  double response_rouge1 = 0.0;
  double response_cos = 0.0;

  /// Mean of the prompt and response NED reaches 0.5.
  bool success() const;
};

SimilarityReport compare(std::string_view true_prompt, std::string_view true_response,
                         std::string_view prompt, std::string_view response,
                         const retrieval::DualTower* tower = nullptr);

/// Fraction of successful trials. Throws on an empty list.
double success_rate(const std::vector<SimilarityReport>& reports);

struct ReportRow {
  std::string trial;
  SimilarityReport report;
};

/// CSV with a header and one row per trial: the six metric values and the
/// success flag (0/1).
void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);

}  // namespace netecho::metrics
