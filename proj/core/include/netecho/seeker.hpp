// Trace-constrained response generation: next-token oracles, length
// constraints derived from a side trace, and grouped diverse beam search.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "netecho/corpus.hpp"
#include "netecho/traceex.hpp"

namespace netecho::seeker {

using corpus::TokenId;

/// Next-token scorer over a fixed vocabulary. Implementations must be safe
/// to call concurrently through a const reference.
class LmOracle {
 public:
  virtual ~LmOracle() = default;
  virtual std::size_t vocab_size() const = 0;
  /// Finite log-scores for every vocabulary token following `context`.
  virtual std::vector<double> next_scores(std::span<const TokenId> context) const = 0;
  /// Number of trailing context tokens the scores depend on; 0 means the
  /// whole context. Lets callers cache scores per context suffix.
  virtual std::size_t context_window() const { return 0; }
};

/// Stupid-backoff n-gram model. S(w | h) = c(h w) / c(h) when h w was seen,
/// otherwise 0.4 * S(w | h minus its first token); the unigram floor is
/// add-one smoothed so every score is finite. Sequences are left-padded
/// with order-1 start markers.
class NGramOracle : public LmOracle {
 public:
  static constexpr double kBackoff = 0.4;

  NGramOracle(std::size_t vocab_size, std::size_t order);

  /// Counts every n-gram of `tokens`, each occurrence weighted by `weight`.
  void add_sequence(std::span<const TokenId> tokens, double weight = 1.0);

  std::size_t order() const { return order_; }
  std::size_t vocab_size() const override { return vocab_size_; }
  std::size_t context_window() const override { return order_ - 1; }
  std::vector<double> next_scores(std::span<const TokenId> context) const override;

  /// Backoff score (not a log) of `token` after `context`.
  double score(std::span<const TokenId> context, TokenId token) const;
  double unigram(TokenId token) const;
  double num_tokens() const { return total_; }

 private:
  struct KeyHash {
    std::size_t operator()(const std::vector<TokenId>& k) const;
  };
  struct Followers {
    double total = 0.0;
    std::unordered_map<TokenId, double> counts;
  };

  std::vector<TokenId> padded_suffix(std::span<const TokenId> context, std::size_t len) const;

  std::size_t vocab_size_;
  std::size_t order_;
  std::vector<double> unigram_counts_;
  double total_ = 0.0;
  // contexts_[k - 1] maps a length-k history to the counts that follow it.
  std::vector<std::unordered_map<std::vector<TokenId>, Followers, KeyHash>> contexts_;
};

/// Tokenizes `texts` with `vocab` and counts every n-gram up to `order`.
/// Throws on an empty corpus.
NGramOracle train_ngram(const std::vector<std::string>& texts, const corpus::Vocab& vocab,
                        std::size_t order = 3);

// ------------------------------------------------------------ constraints

struct GroupTarget {
  std::size_t count = 1;
  std::size_t char_sum = 1;
  bool operator==(const GroupTarget&) const = default;
};

struct ConstraintSpec {
  enum class Mode { kPerToken, kGroup };
  Mode mode = Mode::kPerToken;
  std::vector<std::size_t> lengths;  // per-token mode
  std::vector<GroupTarget> groups;   // group mode
  std::size_t max_token_len = 16;

  std::size_t num_tokens() const;
  /// Per-token lengths >= 1, group sums >= counts, max_token_len >= 1.
  void validate() const;
};

/// Per-token targets when every group carries its token lengths, group
/// targets otherwise. Lengths below 1 (noise, dummies) are lifted to 1.
ConstraintSpec constraint_from_trace(const traceex::SideTrace& st, std::size_t max_token_len);

/// Position of a partial generation within a ConstraintSpec.
struct GenState {
  std::size_t position = 0;     // tokens emitted so far
  std::size_t group = 0;        // group mode: current group
  std::size_t in_group = 0;     // tokens already in the current group
  std::size_t partial_sum = 0;  // chars already in the current group

  bool done(const ConstraintSpec& spec) const;
  GenState advance(const ConstraintSpec& spec, std::size_t token_len) const;
};

/// Inclusive range of token lengths that keep the spec satisfiable at
/// `state`; lo > hi when nothing does.
std::pair<std::size_t, std::size_t> allowed_lengths(const GenState& state,
                                                    const ConstraintSpec& spec);

/// Copies `scores` and sets every token outside allowed_lengths to -inf.
std::vector<double> constrain_scores(std::vector<double> scores, const GenState& state,
                                     const ConstraintSpec& spec, const corpus::Vocab& vocab);

/// True when `tokens` meet the spec exactly, checked from token lengths.
bool satisfies(const ConstraintSpec& spec, const corpus::Vocab& vocab,
               const std::vector<TokenId>& tokens);

// ------------------------------------------------------------ generation

struct BeamConfig {
  std::size_t width = 30;
  std::size_t groups = 5;
  /// Subtracted once per earlier group that already opened with the same
  /// first token.
  double diversity_penalty = 0.5;
  bool allow_relaxation = true;
  double relaxation_penalty = 10.0;
  /// Mixture weight of the reference n-gram against the oracle.
  double reference_weight = 0.5;
  std::size_t reference_order = 3;

  void validate() const;
};

struct GenResult {
  corpus::TokenSeq tokens;
  std::string text;
  double total_logprob = 0.0;
  double mean_token_logprob = 0.0;
  bool violation_flag = false;
  /// Positions emitted through nearest-length relaxation.
  std::vector<std::size_t> relaxed_positions;
};

/// Grouped diverse beam search under `spec`. Each step's log-probability is
/// the oracle score renormalized over the tokens the constraint admits.
/// `references` prime generation through a mixture with an n-gram over
/// their token sequences, optionally weighted per reference. Results are
/// distinct token sequences, sorted by total_logprob descending and then by
/// token ids ascending.
std::vector<GenResult> generate(const LmOracle& oracle, const corpus::Vocab& vocab,
                                const ConstraintSpec& spec,
                                const std::vector<corpus::TokenSeq>& references,
                                const BeamConfig& beam = {},
                                const std::vector<double>& reference_weights = {});

/// Mean per-token log-probability. Throws on an empty result.
double confidence(const GenResult& result);

/// conf < mean(population) - stddev(population). Needs >= 10 samples.
bool detect_misclass(double conf, const std::vector<double>& population);

}  // namespace netecho::seeker
