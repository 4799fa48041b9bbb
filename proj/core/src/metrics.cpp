#include "netecho/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "netecho/common.hpp"
#include "netecho/retrieval.hpp"

namespace netecho::metrics {

std::size_t levenshtein(std::string_view a, std::string_view b) {
  const auto x = utf8_decode(a);
  const auto y = utf8_decode(b);
  std::vector<std::size_t> prev(y.size() + 1), cur(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= y.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

double ned(std::string_view a, std::string_view b) {
  const std::size_t n = std::max(utf8_length(a), utf8_length(b));
  if (n == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(n);
}

namespace {

std::map<std::string, double> word_counts(std::string_view s) {
  std::map<std::string, double> out;
  for (auto& w : split_whitespace(to_lower_ascii(s))) out[w] += 1.0;
  return out;
}

double total(const std::map<std::string, double>& m) {
  double t = 0.0;
  for (const auto& [w, c] : m) t += c;
  return t;
}

}  // namespace

double rouge1_f1(std::string_view a, std::string_view b) {
  const auto ca = word_counts(a);
  const auto cb = word_counts(b);
  const double na = total(ca), nb = total(cb);
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  double overlap = 0.0;
  for (const auto& [w, c] : ca) {
    const auto it = cb.find(w);
    if (it != cb.end()) overlap += std::min(c, it->second);
  }
  if (overlap == 0) return 0.0;
  const double p = overlap / na, r = overlap / nb;
  return 2 * p * r / (p + r);
}

double tf_cosine(std::string_view a, std::string_view b) {
  const auto ca = word_counts(a);
  const auto cb = word_counts(b);
  if (ca.empty() && cb.empty()) return 1.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [w, c] : ca) {
    na += c * c;
    const auto it = cb.find(w);
    if (it != cb.end()) dot += c * it->second;
  }
  for (const auto& [w, c] : cb) nb += c * c;
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double cos_sim(std::string_view a, std::string_view b, const retrieval::DualTower* tower) {
  if (tower == nullptr) return tf_cosine(a, b);
  return retrieval::cosine(tower->embed_text(a), tower->embed_text(b));
}

bool SimilarityReport::success() const { return (prompt_ned + response_ned) / 2.0 >= 0.5; }

SimilarityReport compare(std::string_view true_prompt, std::string_view true_response,
                         std::string_view prompt, std::string_view response,
                         const retrieval::DualTower* tower) {
  SimilarityReport r;
  r.prompt_ned = ned(true_prompt, prompt);
  r.prompt_rouge1 = rouge1_f1(true_prompt, prompt);
  r.prompt_cos = cos_sim(true_prompt, prompt, tower);
  r.response_ned = ned(true_response, response);
  r.response_rouge1 = rouge1_f1(true_response, response);
  r.response_cos = cos_sim(true_response, response, tower);
  return r;
}

double success_rate(const std::vector<SimilarityReport>& reports) {
  if (reports.empty()) throw Error("success_rate of an empty report list");
  const auto hits = std::count_if(reports.begin(), reports.end(),
                                  [](const SimilarityReport& r) { return r.success(); });
  return static_cast<double>(hits) / static_cast<double>(reports.size());
}

namespace {
constexpr std::string_view kCsvHeader =
    "trial,prompt_ned,prompt_rouge1,prompt_cos,response_ned,response_rouge1,response_cos,success";
}

void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write report " + path.string());
  out << kCsvHeader << '\n';
  out.precision(17);
  for (const auto& row : rows) {
    if (row.trial.find_first_of(",\n\"") != std::string::npos) {
      throw Error("trial id not representable in CSV: " + row.trial);
    }
    const auto& r = row.report;
    out << row.trial << ',' << r.prompt_ned << ',' << r.prompt_rouge1 << ',' << r.prompt_cos << ','
        << r.response_ned << ',' << r.response_rouge1 << ',' << r.response_cos << ','
        << (r.success() ? 1 : 0) << '\n';
  }
  if (!out) throw Error("failed writing report " + path.string());
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read report " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw Error("report " + path.string() + " has an unexpected header");
  }
  std::vector<ReportRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 8) {
      throw Error("report line " + std::to_string(line_no) + ": expected 8 fields");
    }
    ReportRow row;
    row.trial = cells[0];
    double* fields[] = {&row.report.prompt_ned,   &row.report.prompt_rouge1,
                        &row.report.prompt_cos,   &row.report.response_ned,
                        &row.report.response_rouge1, &row.report.response_cos};
    try {
      for (int i = 0; i < 6; ++i) *fields[i] = std::stod(cells[static_cast<std::size_t>(i) + 1]);
    } catch (const std::exception&) {
      throw Error("report line " + std::to_string(line_no) + ": bad number");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace netecho::metrics
