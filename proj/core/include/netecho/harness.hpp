// Experiment plumbing: one declarative config, the benchmark pipeline
// stages (probe, train, attack, defense sweep, report) and their artifacts.
#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "netecho/classify.hpp"
#include "netecho/corpus.hpp"
#include "netecho/refine.hpp"
#include "netecho/retrieval.hpp"
#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace netecho::harness {

struct CorpusSpec {
  std::size_t topics = 10;
  std::size_t per_topic = 100;
  corpus::Imbalance imbalance = corpus::Imbalance::kUniform;
  /// Ingest this JSONL corpus instead of synthesizing one.
  std::optional<std::filesystem::path> path;
  std::size_t vocab_size = 3000;
};

/// Extraction settings that override the scenario's defaults.
struct ExtractionOverrides {
  std::optional<std::int64_t> per_token_overhead;
  std::optional<std::int64_t> per_group_overhead;
  std::optional<std::int64_t> burst_gap;
  std::optional<traceex::CountMode> mode;
  std::optional<double> length_multiple_base;
  std::optional<int> fixed_k;
};

struct SweepSpec {
  std::vector<double> dummy_rates{0.01, 0.05, 0.10, 0.20, 0.50, 1.00};
  std::vector<double> loss_noise_rates{0.01, 0.03, 0.05, 0.07, 0.10};
  /// Constant-size padding for the A vs AB comparison; 0 skips it.
  std::int64_t pad_multiple = 1024;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "runs/default";
  CorpusSpec corpus;
  std::string scenario = "A";
  sim::DefenseConfig defense;
  ExtractionOverrides extraction;
  traceex::FeatureMode mode = traceex::FeatureMode::kAB;
  classify::TrainConfig classifier;
  /// Also train a Trace A classifier when mode is AB, for comparison.
  bool compare_modes = true;
  retrieval::DualTrainConfig retrieval;
  refine::AttackConfig attack;
  std::size_t ngram_order = 3;
  std::size_t confidence_samples = 50;
  /// Victims drawn evenly from the test split; 0 takes all of it.
  std::size_t victims = 0;
  SweepSpec sweep;

  ExperimentConfig();
  /// Presets exist, rates are fractions, nested configs validate.
  void validate() const;
  /// Named sub-seed ("corpus", "sim", "train", "attack").
  std::uint64_t seed_for(std::string_view stage) const;
  sim::ScenarioConfig scenario_config() const;
  traceex::ExtractionConfig extraction_config() const;
};

/// Parses a JSON config; absent keys keep their defaults, unknown keys are
/// errors. Validates the result.
ExperimentConfig parse_config(std::string_view json);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved config as pretty JSON.
std::string config_to_json(const ExperimentConfig& cfg);

/// Overrides cfg.output_dir from the NETECHO_OUT environment variable.
void apply_env_overrides(ExperimentConfig& cfg);

/// File names inside a run directory.
namespace files {
inline constexpr const char* kConfig = "config.json";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kQueryDb = "querydb.jsonl";
inline constexpr const char* kSplit = "split.json";
inline constexpr const char* kClassifier = "classifier.params";
inline constexpr const char* kClassifierA = "classifier_a.params";
inline constexpr const char* kDualTower = "dual_tower.params";
inline constexpr const char* kTrainMetrics = "train_metrics.json";
inline constexpr const char* kTranscripts = "transcripts.jsonl";
inline constexpr const char* kAttackReport = "attack_report.csv";
inline constexpr const char* kAttackReportIter0 = "attack_report_iter0.csv";
inline constexpr const char* kAttackVictims = "attack_victims.csv";
inline constexpr const char* kAttackSummary = "attack_summary.json";
inline constexpr const char* kDefenseSweep = "defense_sweep.csv";
inline constexpr const char* kSummaryCsv = "summary.csv";
inline constexpr const char* kSummaryMd = "summary.md";
inline constexpr const char* kSimilarityByLength = "similarity_by_length.csv";
inline constexpr const char* kAccuracyPlot = "accuracy_vs_rate.svg";
inline constexpr const char* kSimilarityPlot = "similarity_vs_length.svg";
}  // namespace files

// ------------------------------------------------------------ benchmark

/// Answers prompts from a fixed corpus: the stored response of an exact
/// prompt match, otherwise that of the prompt with the highest TF cosine
/// (ties to the earlier conversation).
class LookupResponder {
 public:
  explicit LookupResponder(const corpus::TopicCorpus& corpus);
  std::string respond(std::string_view prompt) const;

 private:
  std::vector<std::string> prompts_;
  std::vector<std::string> responses_;
};

/// Corpus, vocabulary and the observable application of a run.
/// The vocabulary is shared so app.vocab stays valid when the struct moves.
struct Benchmark {
  corpus::TopicCorpus corpus;
  std::shared_ptr<const corpus::Vocab> vocab;
  std::shared_ptr<const corpus::SyntheticResponder> synthetic;
  std::shared_ptr<const LookupResponder> lookup;
  refine::ProbeApp app;
};

/// Builds the corpus from the config (synthesized or ingested).
Benchmark make_benchmark(const ExperimentConfig& cfg);
/// Builds the benchmark around an already materialized corpus.
Benchmark make_benchmark(const ExperimentConfig& cfg, corpus::TopicCorpus corpus);

// ------------------------------------------------------------ commands

struct ProbeSummary {
  std::size_t records = 0;
  std::filesystem::path db_path;
};

/// Writes config.json, corpus.jsonl and querydb.jsonl into the run dir.
ProbeSummary cmd_probe(const ExperimentConfig& cfg);

/// Re-extracts side traces from a packet log with the config's extraction
/// settings and writes them as JSONL; returns the number of traces.
std::size_t cmd_extract(const ExperimentConfig& cfg, const std::filesystem::path& packet_log,
                        const std::filesystem::path& out);

struct TrainSummary {
  classify::Accuracy test;
  classify::Accuracy val;
  std::optional<classify::Accuracy> test_mode_a;
  double recall_at_1 = 0.0;
  std::size_t train = 0, val_size = 0, test_size = 0;
  double classifier_seconds = 0.0;
  double retrieval_seconds = 0.0;
};

/// Splits the probe DB 8:1:1, trains the classifier on the train split and
/// the dual tower on train + val (the attacker's DB), and writes
/// checkpoints, split.json and train_metrics.json.
TrainSummary cmd_train(const ExperimentConfig& cfg);

struct MeanSimilarity {
  double prompt_ned = 0.0, prompt_rouge1 = 0.0, prompt_cos = 0.0;
  double response_ned = 0.0, response_rouge1 = 0.0, response_cos = 0.0;
};

struct AttackSummary {
  std::size_t victims = 0;
  double success_rate = 0.0;
  double success_rate_iter0 = 0.0;
  MeanSimilarity final_mean;
  MeanSimilarity iter0_mean;
  std::size_t widened = 0;
  std::size_t probe_calls = 0;
  double seconds = 0.0;
};

/// Runs the online attack on `victim_ids` (test-split victims when empty)
/// against the train + val DB, and writes transcripts and reports.
AttackSummary cmd_attack(const ExperimentConfig& cfg, const std::vector<std::string>& victim_ids = {});

struct SweepRow {
  std::string kind;  // none, dummy, loss, noise, loss+noise, padding
  double rate = 0.0;
  traceex::FeatureMode mode = traceex::FeatureMode::kAB;
  classify::Accuracy accuracy;

  std::string experiment() const;
};

/// Attack-time perturbations of the test split's packet traces evaluated
/// with the trained classifier; the padding rows retrain A and AB on padded
/// traces. Writes defense_sweep.csv.
std::vector<SweepRow> cmd_defense_sweep(const ExperimentConfig& cfg);

std::vector<SweepRow> read_sweep_csv(const std::filesystem::path& path);

struct LengthBin {
  std::size_t lo = 0, hi = 0;  // token lengths in [lo, hi)
  std::size_t count = 0;
  double response_ned = 0.0, response_rouge1 = 0.0, response_cos = 0.0;
};

/// Mean final-response similarity per response-length bin of `width`
/// tokens; empty bins are omitted.
std::vector<LengthBin> similarity_by_length(const std::filesystem::path& run_dir,
                                            std::size_t width = 25);

struct ReportSummary {
  std::size_t experiments = 0;
  std::vector<std::string> missing;  // expected artifacts that were absent
};

/// Aggregates the run's CSVs into summary.csv / summary.md and draws the
/// SVG plots. Throws, listing the expected files, when none exist.
ReportSummary cmd_report(const std::filesystem::path& run_dir);

// ------------------------------------------------------------ plotting

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Static SVG line chart with axes, ticks and a legend.
std::string render_line_plot(const std::string& title, const std::string& x_label,
                             const std::string& y_label, const std::vector<Series>& series);

}  // namespace netecho::harness
