// Iterative refinement: rewrite prompts along the semantic gradient, probe
// the simulated application, accept improving pairs into the query
// database, and regenerate the response from the refreshed references.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "netecho/classify.hpp"
#include "netecho/corpus.hpp"
#include "netecho/retrieval.hpp"
#include "netecho/seeker.hpp"
#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace netecho::refine {

// ---------------------------------------------------------------- rewriting

class Rewriter {
 public:
  virtual ~Rewriter() = default;
  /// `gradv` holds the reference conversations ordered from least to most
  /// similar, so its last entry is top_1. Returns exactly `g` prompts.
  virtual std::vector<std::string> rewrite(const std::vector<corpus::Conversation>& gradv,
                                           std::string_view recovered_response, std::size_t g,
                                           std::uint64_t seed) const = 0;
};

/// Candidate j (0-based) starts from top_1's prompt, swaps in top_2's
/// wording at j seeded sites where the two prompts differ (a quarter of the
/// words at most), then applies the phrase changes that turn top_1's
/// response into `recovered_response` wherever top_1's prompt contains the
/// old phrase, changing up to 20% of the words. Throws when |gradv| < 2.
std::vector<std::string> default_rewrite(const std::vector<corpus::Conversation>& gradv,
                                         std::string_view recovered_response, std::size_t g,
                                         std::uint64_t seed);

class CrossoverRewriter : public Rewriter {
 public:
  std::vector<std::string> rewrite(const std::vector<corpus::Conversation>& gradv,
                                   std::string_view recovered_response, std::size_t g,
                                   std::uint64_t seed) const override {
    return default_rewrite(gradv, recovered_response, g, seed);
  }
};

/// Lower-cased alphabetic words of at least three letters that are not
/// function words, by descending frequency (ties by first occurrence).
std::vector<std::string> content_words(std::string_view text);

/// A maximal run where two word sequences differ under a longest common
/// subsequence alignment.
struct WordEdit {
  std::vector<std::string> from;
  std::vector<std::string> to;
  bool operator==(const WordEdit&) const = default;
};

/// Edits turning `from` into `to`, in order. Ties in the alignment prefer
/// deleting from `from` first.
std::vector<WordEdit> word_diff(const std::vector<std::string>& from,
                                const std::vector<std::string>& to);

// ---------------------------------------------------------------- probing

using Responder = std::function<std::string(std::string_view prompt)>;

/// The observable application: a responder behind a streaming transport,
/// a defense, and the attacker's trace extractor.
struct ProbeApp {
  Responder responder;
  const corpus::Vocab* vocab = nullptr;
  sim::ScenarioConfig scenario;
  sim::DefenseConfig defense;
  traceex::ExtractionConfig extraction;
  std::uint64_t seed = 0;
};

/// Streams `conv.response` through the app and records what the attacker
/// sees. Transport randomness is keyed on the conversation text, so the
/// same conversation always yields the same trace.
retrieval::QueryRecord observe(const ProbeApp& app, const corpus::Conversation& conv);

/// Sends each prompt to the responder and observes the resulting stream.
/// Record ids are `id_prefix` followed by the candidate index.
std::vector<retrieval::QueryRecord> probe(const std::vector<std::string>& prompts,
                                          const ProbeApp& app, const std::string& id_prefix,
                                          int topic, int iteration);

// ---------------------------------------------------------------- acceptance

/// Strictly closer to the victim than the worst reference.
bool accept(double new_distance, const std::vector<double>& ref_distances);
bool accept(const retrieval::DualTower& model, const traceex::SideTrace& candidate,
            const traceex::SideTrace& victim, const std::vector<const retrieval::QueryRecord*>& refs);

// ---------------------------------------------------------------- oracles

/// N-gram oracles over the probe responses of a topic set, built on demand.
class TopicOracles {
 public:
  TopicOracles(const retrieval::QueryDB& db, const corpus::Vocab& vocab, std::size_t order = 3);

  const seeker::LmOracle& for_topics(std::vector<int> topics);
  /// Oracle for `topic` trained without the record at `skip` (a DB index).
  seeker::NGramOracle leave_one_out(int topic, std::size_t skip) const;

 private:
  const retrieval::QueryDB* db_;
  const corpus::Vocab* vocab_;
  std::size_t order_;
  std::vector<corpus::TokenSeq> tokens_;  // per DB record, probe records only
  std::map<std::vector<int>, std::unique_ptr<seeker::NGramOracle>> cache_;
};

// ---------------------------------------------------------------- the loop

struct AttackConfig {
  std::size_t k = 3;  // refinement rounds
  std::size_t g = 3;  // references and rewrites per round
  seeker::BeamConfig beam;
  bool detect_misclass = true;
  std::uint64_t seed = 1;

  void validate() const;
};

struct IterationRecord {
  std::size_t iteration = 0;
  std::vector<std::string> candidate_prompts;
  std::vector<double> candidate_distances;
  std::vector<bool> accepted;
  std::vector<double> ref_distances;
  /// Best trace distance among the iteration-0 top reference and every
  /// accepted candidate so far.
  double best_distance = 0.0;
  /// Best answer so far: its prompt and the response generated right after
  /// that prompt was accepted.
  std::string prompt;
  std::string response;
  /// Generation from this iteration's references.
  std::string generation;
  double confidence = 0.0;
  bool violation = false;
};

struct AttackResult {
  std::string prompt;
  std::string response;
  double confidence = 0.0;
  std::vector<int> topics;  // topic filter used
  bool widened = false;     // misclassification detected
  std::vector<IterationRecord> history;  // history[i] holds c~(i)
  std::size_t probe_calls = 0;
  std::vector<retrieval::QueryRecord> accepted;
};

/// Everything the online attack needs besides the victim.
struct AttackContext {
  const classify::ClassifierModel* classifier = nullptr;
  const retrieval::DualTower* tower = nullptr;
  const corpus::Vocab* vocab = nullptr;
  const ProbeApp* app = nullptr;
  const Rewriter* rewriter = nullptr;
  /// Generation confidences on probe records; misclassification detection
  /// is skipped when it holds fewer than 10 values.
  std::vector<double> confidence_population;
};

/// Runs the recover-rewrite-probe-accept loop for one victim trace against
/// a private copy of `db` (accepted pairs are returned, not written back).
AttackResult run_attack(const traceex::SideTrace& victim, const std::string& victim_id,
                        const retrieval::QueryDB& db, const retrieval::DbIndex& index,
                        TopicOracles& oracles, const AttackContext& ctx, const AttackConfig& cfg);

/// Generation confidences of `n` probe records (evenly spaced through the
/// DB), each generated with its own record excluded from the references
/// and from the topic oracle.
std::vector<double> confidence_population(const retrieval::QueryDB& db,
                                          const retrieval::DbIndex& index, TopicOracles& oracles,
                                          const AttackContext& ctx, const AttackConfig& cfg,
                                          std::size_t n);

/// One JSON object per iteration. With the victim's true conversation each
/// line also carries the similarity metrics of that iteration's recovery;
/// `tower` switches the cosine metric to text-tower embeddings.
std::string transcript_jsonl(const std::string& victim_id, const AttackResult& result,
                             const corpus::Conversation* truth = nullptr,
                             const retrieval::DualTower* tower = nullptr);

}  // namespace netecho::refine
