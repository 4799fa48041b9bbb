#include "netecho/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <unordered_set>

#include "domain_data.hpp"
#include "netecho/common.hpp"

namespace netecho::corpus {

using json = nlohmann::json;

// ------------------------------------------------------------------ Vocab

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  chars_.reserve(tokens_.size());
  index_.reserve(tokens_.size() * 2);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto chars = utf8_decode(tokens_[i]);
    if (chars.empty()) throw Error("empty token string at id " + std::to_string(i));
    if (!index_.emplace(chars, static_cast<TokenId>(i)).second) {
      throw Error("duplicate token string '" + tokens_[i] + "'");
    }
    max_len_ = std::max(max_len_, chars.size());
    chars_.push_back(std::move(chars));
  }
}

std::optional<TokenId> Vocab::find(std::u32string_view s) const {
  auto it = index_.find(std::u32string(s));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocab::find(std::string_view utf8) const {
  return find(utf8_decode(utf8));
}

// ------------------------------------------------------------ tokenizer

namespace {

enum class CharClass { kLetter, kDigit, kSpace, kOther };

CharClass classify(char32_t c) {
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c > 0x7F) return CharClass::kLetter;
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r') return CharClass::kSpace;
  return CharClass::kOther;
}

}  // namespace

std::vector<std::u32string> pretokenize(std::u32string_view text) {
  std::vector<std::u32string> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const CharClass cls = classify(text[i]);
    std::size_t start = i;
    if (cls == CharClass::kSpace) {
      std::size_t j = i;
      while (j < n && classify(text[j]) == CharClass::kSpace) ++j;
      // A single trailing ' ' attaches to the following word.
      const bool attach = j < n && text[j - 1] == U' ';
      const std::size_t end = attach ? j - 1 : j;
      if (end > start) out.emplace_back(text.substr(start, end - start));
      if (!attach) {
        i = j;
        continue;
      }
      start = j - 1;
      i = j;
    }
    const CharClass word_cls = classify(text[i]);
    ++i;
    if (word_cls != CharClass::kOther) {
      while (i < n && classify(text[i]) == word_cls) ++i;
    }
    out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

Vocab build_vocab(const std::vector<std::string>& texts, std::size_t max_vocab,
                  std::uint64_t seed) {
  if (texts.empty()) throw Error("empty corpus");
  std::map<std::u32string, std::size_t> word_freq;
  std::set<char32_t> alphabet;
  for (const auto& text : texts) {
    const auto chars = utf8_decode(text);
    alphabet.insert(chars.begin(), chars.end());
    for (auto& piece : pretokenize(chars)) ++word_freq[piece];
  }
  if (alphabet.empty()) throw Error("empty corpus");

  std::vector<std::string> entries;
  std::unordered_set<std::u32string> present;
  for (char32_t c : alphabet) {
    entries.push_back(utf8_encode(c));
    present.insert(std::u32string(1, c));
  }

  struct WordType {
    std::vector<std::u32string> symbols;
    std::size_t freq;
  };
  std::vector<WordType> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    WordType wt{{}, f};
    for (char32_t c : w) wt.symbols.emplace_back(1, c);
    words.push_back(std::move(wt));
  }

  while (entries.size() < max_vocab) {
    std::map<std::pair<std::u32string, std::u32string>, std::size_t> pair_counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
      }
    }
    const std::pair<std::u32string, std::u32string>* best = nullptr;
    std::size_t best_count = 0;
    std::uint64_t best_key = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count < 2) continue;
      const std::uint64_t key =
          splitmix64(seed ^ fnv1a(utf8_encode(pair.first + pair.second)));
      if (count > best_count || (count == best_count && key < best_key)) {
        best = &pair;
        best_count = count;
        best_key = key;
      }
    }
    if (best == nullptr) break;
    const std::u32string left = best->first;
    const std::u32string right = best->second;
    const std::u32string merged = left + right;
    for (auto& w : words) {
      std::vector<std::u32string> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(std::move(w.symbols[i]));
        }
      }
      w.symbols = std::move(next);
    }
    if (present.insert(merged).second) entries.push_back(utf8_encode(merged));
  }
  return Vocab(std::move(entries));
}

TokenSeq tokenize(const Vocab& vocab, std::string_view text) {
  const auto chars = utf8_decode(text);
  TokenSeq out;
  std::size_t i = 0;
  const std::size_t max_len = vocab.max_token_len();
  while (i < chars.size()) {
    std::size_t len = std::min(max_len, chars.size() - i);
    std::optional<TokenId> hit;
    for (; len >= 1; --len) {
      hit = vocab.find(std::u32string_view(chars).substr(i, len));
      if (hit) break;
    }
    if (!hit) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "U+%04X", static_cast<unsigned>(chars[i]));
      throw Error("uncovered character '" + utf8_encode(chars[i]) + "' (" + buf + ")");
    }
    out.tokens.push_back(*hit);
    out.char_lens.push_back(len);
    i += len;
  }
  return out;
}

std::string detokenize(const Vocab& vocab, const std::vector<TokenId>& tokens) {
  std::string out;
  for (TokenId t : tokens) out += vocab.token(t);
  return out;
}

// ------------------------------------------------------- synthetic domain

namespace {

struct TopicSpec {
  std::string name;
  std::string specialist;
  std::vector<std::string> symptoms;
  std::vector<std::string> conditions;
  std::vector<std::string> advice;
  int min_advice = 1;
  int max_advice = 2;
};

std::string pseudo_word(Rng& rng) {
  static constexpr std::array<std::string_view, 24> kSyllables = {
      "ka", "lo", "mi", "ren", "tus", "va", "dor", "pel", "si", "bra", "ne", "quo",
      "tri", "mos", "fa", "gel", "hun", "zi", "por", "cle", "an", "ix", "um", "ost"};
  std::string w;
  const auto n = rng.uniform_int(2, 4);
  for (int i = 0; i < n; ++i) w += kSyllables[rng.index(kSyllables.size())];
  return w;
}

TopicSpec generated_topic(std::size_t t) {
  Rng rng(derive_seed(0x5EED70F1Cull, t));
  TopicSpec spec;
  spec.name = "topic " + std::to_string(t + 1);
  spec.specialist = pseudo_word(rng) + "ist";
  std::set<std::string> used;
  while (spec.symptoms.size() < 16) {
    std::string s = pseudo_word(rng);
    if (rng.bernoulli(0.4)) s += " " + pseudo_word(rng);
    if (used.insert(s).second) spec.symptoms.push_back(s);
  }
  for (int i = 0; i < 4; ++i) spec.conditions.push_back(pseudo_word(rng) + " syndrome");
  for (int i = 0; i < 6; ++i) {
    std::string sentence;
    const auto words = rng.uniform_int(7, 12);
    for (int k = 0; k < words; ++k) {
      if (k) sentence += ' ';
      sentence += pseudo_word(rng);
    }
    sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
    spec.advice.push_back(sentence + ".");
  }
  spec.min_advice = static_cast<int>(4 + t % 2);
  spec.max_advice = spec.min_advice + 1;
  return spec;
}

std::vector<TopicSpec> topic_specs(std::size_t num_topics) {
  std::vector<TopicSpec> out;
  for (std::size_t t = 0; t < num_topics; ++t) {
    if (t < domain::kTopics.size()) {
      const auto& d = domain::kTopics[t];
      TopicSpec s;
      s.name = std::string(d.name);
      s.specialist = std::string(d.specialist);
      for (auto x : d.symptoms) s.symptoms.emplace_back(x);
      for (auto x : d.conditions) s.conditions.emplace_back(x);
      for (auto x : d.advice) s.advice.emplace_back(x);
      s.min_advice = d.min_advice;
      s.max_advice = d.max_advice;
      out.push_back(std::move(s));
    } else {
      out.push_back(generated_topic(t));
    }
  }
  return out;
}

std::string fill(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      const std::string key(tmpl.substr(i + 1, close - i - 1));
      out += vars.at(key);
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

/// Phrase table: every symptom phrase with the topic owning it (-1 shared).
struct PhraseTable {
  std::vector<std::pair<std::string, int>> phrases;  // sorted longest first

  explicit PhraseTable(const std::vector<TopicSpec>& topics) {
    for (auto s : domain::kSharedSymptoms) phrases.emplace_back(std::string(s), -1);
    for (std::size_t t = 0; t < topics.size(); ++t) {
      for (const auto& s : topics[t].symptoms) phrases.emplace_back(s, static_cast<int>(t));
    }
    std::stable_sort(phrases.begin(), phrases.end(), [](const auto& a, const auto& b) {
      return a.first.size() > b.first.size();
    });
  }
};

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '-';
}

struct ParsedPrompt {
  std::vector<std::pair<std::string, int>> symptoms;  // in order of appearance
  int age = -1;
  std::string sex;
};

ParsedPrompt parse_prompt(std::string_view prompt, const PhraseTable& table) {
  const std::string lower = to_lower_ascii(prompt);
  std::vector<bool> taken(lower.size(), false);
  std::vector<std::tuple<std::size_t, std::string, int>> hits;
  for (const auto& [phrase, topic] : table.phrases) {
    std::size_t pos = 0;
    while ((pos = lower.find(phrase, pos)) != std::string::npos) {
      const std::size_t end = pos + phrase.size();
      const bool bounded = (pos == 0 || !is_word_char(lower[pos - 1])) &&
                           (end == lower.size() || !is_word_char(lower[end]));
      bool free = bounded;
      for (std::size_t k = pos; free && k < end; ++k) free = !taken[k];
      if (free) {
        for (std::size_t k = pos; k < end; ++k) taken[k] = true;
        hits.emplace_back(pos, phrase, topic);
      }
      pos = end;
    }
  }
  std::sort(hits.begin(), hits.end());
  ParsedPrompt out;
  std::set<std::string> seen;
  for (auto& [pos, phrase, topic] : hits) {
    if (seen.insert(phrase).second) out.symptoms.emplace_back(phrase, topic);
  }
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (std::isdigit(static_cast<unsigned char>(lower[i])) &&
        (i == 0 || !std::isdigit(static_cast<unsigned char>(lower[i - 1])))) {
      std::size_t j = i;
      while (j < lower.size() && std::isdigit(static_cast<unsigned char>(lower[j]))) ++j;
      if (j - i <= 3) {
        out.age = std::stoi(lower.substr(i, j - i));
        break;
      }
    }
  }
  for (const auto& w : split_whitespace(lower)) {
    std::string core;
    for (char c : w) {
      if (std::isalpha(static_cast<unsigned char>(c))) core += c;
    }
    if (core == "male" || core == "female") {
      out.sex = core;
      break;
    }
  }
  return out;
}

}  // namespace

Imbalance parse_imbalance(std::string_view name) {
  if (name == "uniform") return Imbalance::kUniform;
  if (name == "zipf") return Imbalance::kZipf;
  throw Error("unknown imbalance profile '" + std::string(name) + "'");
}

std::vector<std::size_t> topic_counts(std::size_t num_topics, std::size_t per_topic,
                                      Imbalance profile) {
  std::vector<std::size_t> counts(num_topics, per_topic);
  if (profile == Imbalance::kZipf) {
    double harmonic = 0.0;
    for (std::size_t t = 0; t < num_topics; ++t) harmonic += 1.0 / static_cast<double>(t + 1);
    const double total = static_cast<double>(num_topics * per_topic);
    for (std::size_t t = 0; t < num_topics; ++t) {
      const double w = (1.0 / static_cast<double>(t + 1)) / harmonic;
      counts[t] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(total * w)));
    }
  }
  return counts;
}

SyntheticResponder::SyntheticResponder(std::size_t num_topics, std::uint64_t seed)
    : num_topics_(num_topics), seed_(seed) {}

int SyntheticResponder::diagnose(std::string_view prompt) const {
  const auto topics = topic_specs(num_topics_);
  const PhraseTable table(topics);
  const auto parsed = parse_prompt(prompt, table);
  std::vector<int> votes(num_topics_, 0);
  bool any = false;
  for (const auto& [phrase, topic] : parsed.symptoms) {
    if (topic >= 0) {
      ++votes[static_cast<std::size_t>(topic)];
      any = true;
    }
  }
  if (!any) return -1;
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

std::string SyntheticResponder::respond(std::string_view prompt) const {
  const auto topics = topic_specs(num_topics_);
  const PhraseTable table(topics);
  const auto parsed = parse_prompt(prompt, table);
  const int topic = diagnose(prompt);
  const auto& closing_pool = domain::kClosings;
  std::uint64_t h = fnv1a(parsed.sex, seed_);
  for (const auto& [phrase, t] : parsed.symptoms) h = fnv1a(phrase + "|", h);
  h = derive_seed(h, static_cast<std::uint64_t>(parsed.age + 1));
  Rng rng(h);
  if (topic < 0 || parsed.symptoms.size() < 2) {
    return std::string(domain::kUnspecific) + " " + std::string(domain::kGenericClosing);
  }
  const auto& spec = topics[static_cast<std::size_t>(topic)];
  // The first topic-owned symptom selects the condition.
  std::string anchor;
  for (const auto& [phrase, t] : parsed.symptoms) {
    if (t == topic) {
      anchor = phrase;
      break;
    }
  }
  const std::string condition = spec.conditions[fnv1a(anchor) % spec.conditions.size()];
  const auto& sy = parsed.symptoms;
  std::map<std::string, std::string> vars{
      {"s1", sy[0].first},
      {"s2", sy[1].first},
      {"c", condition},
      {"age", parsed.age >= 0 ? std::to_string(parsed.age) : "adult"},
      {"sex", parsed.sex.empty() ? "patient" : parsed.sex},
      {"field", spec.name},
      {"specialist", spec.specialist}};
  std::vector<std::string> sentences;
  sentences.push_back(fill(domain::kOpenings[rng.index(domain::kOpenings.size())], vars));
  if (sy.size() >= 3) {
    vars["s3"] = sy[2].first;
    vars["S3"] = capitalize(sy[2].first);
    std::string second = fill(domain::kSecondSentences[rng.index(domain::kSecondSentences.size())], vars);
    if (parsed.age < 0) {
      // Without an age the demographic clause reads "a adult-year-old"; drop it.
      second = capitalize(sy[2].first) + " is a common early sign of " + condition + ".";
    }
    sentences.push_back(second);
  }
  if (sy.size() >= 4) {
    vars["s4"] = sy[3].first;
    sentences.push_back(fill(domain::kThirdSentences[rng.index(domain::kThirdSentences.size())], vars));
  }
  const auto n_advice = rng.uniform_int(spec.min_advice, spec.max_advice);
  std::vector<std::size_t> order(spec.advice.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  order.resize(static_cast<std::size_t>(n_advice));
  std::sort(order.begin(), order.end());
  for (auto i : order) sentences.push_back(spec.advice[i]);
  sentences.push_back(fill(closing_pool[rng.index(closing_pool.size())], vars));
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

TopicCorpus synth_corpus(std::size_t num_topics, std::size_t per_topic, std::uint64_t seed,
                         Imbalance profile) {
  if (num_topics < 2) throw Error("synth_corpus needs at least 2 topics");
  const auto topics = topic_specs(num_topics);
  const auto counts = topic_counts(num_topics, per_topic, profile);
  const SyntheticResponder responder(num_topics, derive_seed(seed, "responder"));
  Rng rng(derive_seed(seed, "prompts"));

  TopicCorpus corpus;
  for (const auto& t : topics) corpus.topic_names.push_back(t.name);
  std::unordered_set<std::string> seen_prompts;
  std::size_t next_id = 0;
  for (std::size_t t = 0; t < num_topics; ++t) {
    const auto& spec = topics[t];
    std::size_t made = 0;
    std::size_t attempts = 0;
    while (made < counts[t]) {
      if (++attempts > counts[t] * 1000 + 1000) {
        throw Error("synth_corpus could not generate enough distinct prompts for topic " +
                    spec.name);
      }
      std::vector<std::size_t> idx(spec.symptoms.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      rng.shuffle(idx);
      std::vector<std::string> chosen = {spec.symptoms[idx[0]], spec.symptoms[idx[1]],
                                         spec.symptoms[idx[2]]};
      if (rng.bernoulli(0.5)) {
        chosen.emplace_back(domain::kSharedSymptoms[rng.index(domain::kSharedSymptoms.size())]);
      } else {
        chosen.push_back(spec.symptoms[idx[3]]);
      }
      rng.shuffle(chosen);
      // The responder keys its diagnosis on the first topic-owned symptom.
      if (std::find(domain::kSharedSymptoms.begin(), domain::kSharedSymptoms.end(),
                    chosen[0]) != domain::kSharedSymptoms.end()) {
        std::swap(chosen[0], chosen[1]);
      }
      const std::map<std::string, std::string> vars{
          {"age", std::to_string(rng.uniform_int(18, 85))},
          {"sex", rng.bernoulli(0.5) ? "male" : "female"},
          {"s1", chosen[0]},
          {"s2", chosen[1]},
          {"s3", chosen[2]},
          {"s4", chosen[3]}};
      const auto tmpl = domain::kPromptTemplates[rng.index(domain::kPromptTemplates.size())];
      std::string prompt = fill(tmpl, vars);
      if (!seen_prompts.insert(prompt).second) continue;
      Conversation c;
      char id[32];
      std::snprintf(id, sizeof id, "c%05zu", next_id++);
      c.id = id;
      c.prompt = std::move(prompt);
      c.response = responder.respond(c.prompt);
      c.topic = static_cast<int>(t);
      corpus.conversations.push_back(std::move(c));
      ++made;
    }
  }
  return corpus;
}

// ------------------------------------------------------------------ JSONL

void export_corpus(const TopicCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus file " + path.string());
  for (const auto& c : corpus.conversations) {
    json j = {{"id", c.id},
              {"topic", corpus.topic_names.at(static_cast<std::size_t>(c.topic))},
              {"prompt", c.prompt},
              {"response", c.response}};
    out << j.dump() << '\n';
  }
}

TopicCorpus parse_corpus_jsonl(std::string_view content) {
  TopicCorpus corpus;
  std::map<std::string, int> topic_index;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    std::string_view line = content.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "corpus line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(where + "malformed JSON");
    }
    if (!j.is_object()) throw Error(where + "record is not an object");
    for (const char* field : {"id", "topic", "prompt", "response"}) {
      if (!j.contains(field)) throw Error(where + "missing field \"" + field + "\"");
      if (!j[field].is_string()) {
        if (std::string(field) == "topic") throw Error(where + "bad label (not a string)");
        throw Error(where + "field \"" + field + "\" is not a string");
      }
    }
    const auto topic = j["topic"].get<std::string>();
    if (topic.empty()) throw Error(where + "bad label (empty)");
    auto [it, inserted] = topic_index.emplace(topic, static_cast<int>(corpus.topic_names.size()));
    if (inserted) corpus.topic_names.push_back(topic);
    Conversation c;
    c.id = j["id"].get<std::string>();
    c.prompt = j["prompt"].get<std::string>();
    c.response = j["response"].get<std::string>();
    c.topic = it->second;
    corpus.conversations.push_back(std::move(c));
  }
  return corpus;
}

TopicCorpus ingest_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read corpus file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_corpus_jsonl(ss.str());
}

}  // namespace netecho::corpus
