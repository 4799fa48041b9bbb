// Tokenization, synthetic topic corpora and JSONL corpus ingestion.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace netecho::corpus {

using TokenId = std::uint32_t;

/// Token vocabulary. Ids are contiguous from 0 and token strings are
/// unique. Lengths are counted in Unicode scalar values.
class Vocab {
 public:
  Vocab() = default;
  /// Throws on duplicate or empty token strings.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::u32string& token_chars(TokenId id) const { return chars_.at(id); }
  std::size_t char_len(TokenId id) const { return chars_.at(id).size(); }
  std::size_t max_token_len() const { return max_len_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::u32string_view s) const;
  std::optional<TokenId> find(std::string_view utf8) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::u32string> chars_;
  std::unordered_map<std::u32string, TokenId> index_;
  std::size_t max_len_ = 0;
};

struct TokenSeq {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> char_lens;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  bool operator==(const TokenSeq&) const = default;
};

/// Greedy frequency-based pair-merge vocabulary. Starts from every
/// character in `texts` and merges the most frequent adjacent symbol pair
/// (within a pre-token) until `max_vocab` entries exist or no pair occurs
/// twice. Frequency ties are ordered by a hash keyed on `seed`, so two
/// seeds give two plausible but different tokenizers.
Vocab build_vocab(const std::vector<std::string>& texts, std::size_t max_vocab,
                  std::uint64_t seed);

/// Greedy longest-match segmentation, left to right.
TokenSeq tokenize(const Vocab& vocab, std::string_view text);
std::string detokenize(const Vocab& vocab, const std::vector<TokenId>& tokens);

/// Pre-tokenizer used by build_vocab: words keep one leading space,
/// digits and letters form runs, other characters stand alone.
std::vector<std::u32string> pretokenize(std::u32string_view text);

// ------------------------------------------------------------ corpora

struct Conversation {
  std::string id;
  std::string prompt;
  std::string response;
  int topic = 0;

  bool operator==(const Conversation&) const = default;
};

struct TopicCorpus {
  std::vector<Conversation> conversations;
  std::vector<std::string> topic_names;

  std::size_t size() const { return conversations.size(); }
  bool operator==(const TopicCorpus&) const = default;
};

enum class Imbalance { kUniform, kZipf };

Imbalance parse_imbalance(std::string_view name);

/// Per-topic conversation counts for an imbalance profile. Zipf(1.0)
/// gives topic t the weight 1/(t+1), scaled to num_topics*per_topic and
/// rounded half away from zero (minimum 1).
std::vector<std::size_t> topic_counts(std::size_t num_topics, std::size_t per_topic,
                                      Imbalance profile);

/// Deterministic synthetic corpus: templated diagnostic prompts answered by
/// the SyntheticResponder. Topics have distinct keyword pools, advice
/// sentences and response-length profiles, and share a common keyword pool.
TopicCorpus synth_corpus(std::size_t num_topics, std::size_t per_topic, std::uint64_t seed,
                         Imbalance profile = Imbalance::kUniform);

/// The simulated application behind the synthetic corpus. Maps a prompt to
/// a response deterministically: the response depends only on the symptom
/// phrases, age and sex found in the prompt, plus the responder seed.
class SyntheticResponder {
 public:
  SyntheticResponder(std::size_t num_topics, std::uint64_t seed);

  std::string respond(std::string_view prompt) const;
  /// Topic the responder would diagnose, or -1 when nothing is recognised.
  int diagnose(std::string_view prompt) const;

  std::size_t num_topics() const { return num_topics_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::size_t num_topics_;
  std::uint64_t seed_;
};

/// Writes/reads the corpus JSONL format:
/// {"id": str, "topic": str, "prompt": str, "response": str} per line.
void export_corpus(const TopicCorpus& corpus, const std::filesystem::path& path);
TopicCorpus ingest_corpus(const std::filesystem::path& path);
TopicCorpus parse_corpus_jsonl(std::string_view content);

}  // namespace netecho::corpus
