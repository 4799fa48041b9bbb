#include "netecho/refine.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "netecho/common.hpp"
#include "netecho/metrics.hpp"

namespace netecho::refine {

using retrieval::QueryRecord;
using traceex::SideTrace;

// ---------------------------------------------------------------- rewriting

namespace {

const std::unordered_set<std::string>& function_words() {
  static const std::unordered_set<std::string> words = {
      "the",   "and",   "for",    "with",  "from",  "this",   "that",  "these", "those",
      "are",   "was",   "were",   "been",  "being", "have",   "has",   "had",   "not",
      "but",   "can",   "could",  "should", "would", "will",  "may",   "might", "must",
      "shall", "its",   "his",    "her",   "their", "our",    "your",  "you",   "they",
      "them",  "she",   "him",    "who",   "whom",  "which",  "what",  "when",  "where",
      "why",   "how",   "all",    "any",   "each",  "every",  "both",  "few",   "more",
      "most",  "other", "some",   "such",  "only",  "own",    "same",  "than",  "too",
      "very",  "just",  "also",   "into",  "onto",  "over",   "under", "about", "after",
      "before", "again", "then",  "there", "here",  "once",   "out",   "off",   "does",
      "did",   "doing", "because", "while", "until", "during", "through", "above", "below",
      "between", "against", "further", "nor", "yet", "per",   "off",   "upon",  "whether"};
  return words;
}

// Word with surrounding punctuation split off.
struct WordParts {
  std::string lead, core, trail;
};

WordParts split_word(const std::string& w) {
  std::size_t a = 0, b = w.size();
  while (a < b && !std::isalnum(static_cast<unsigned char>(w[a]))) ++a;
  while (b > a && !std::isalnum(static_cast<unsigned char>(w[b - 1]))) --b;
  return {w.substr(0, a), w.substr(a, b - a), w.substr(b)};
}

bool is_content(const std::string& core_lower) {
  if (core_lower.size() < 3) return false;
  if (!std::all_of(core_lower.begin(), core_lower.end(),
                   [](char c) { return c >= 'a' && c <= 'z'; })) {
    return false;
  }
  return function_words().count(core_lower) == 0;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

std::vector<std::string> content_words(std::string_view text) {
  std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> stats;  // count, first
  std::size_t pos = 0;
  for (const auto& w : split_whitespace(text)) {
    const auto core = to_lower_ascii(split_word(w).core);
    if (!is_content(core)) continue;
    auto [it, inserted] = stats.emplace(core, std::make_pair(std::size_t{0}, pos++));
    ++it->second.first;
  }
  std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> v(stats.begin(), stats.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });
  std::vector<std::string> out;
  for (auto& [w, s] : v) out.push_back(w);
  return out;
}

std::vector<WordEdit> word_diff(const std::vector<std::string>& from,
                                const std::vector<std::string>& to) {
  const std::size_t n = from.size(), m = to.size();
  // lcs[i][j]: LCS length of from[i..] and to[j..].
  std::vector<std::vector<std::uint32_t>> lcs(n + 1, std::vector<std::uint32_t>(m + 1, 0));
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t j = m; j-- > 0;) {
      lcs[i][j] = from[i] == to[j] ? lcs[i + 1][j + 1] + 1 : std::max(lcs[i + 1][j], lcs[i][j + 1]);
    }
  }
  std::vector<WordEdit> edits;
  WordEdit cur;
  auto flush = [&] {
    if (!cur.from.empty() || !cur.to.empty()) edits.push_back(std::move(cur));
    cur = {};
  };
  std::size_t i = 0, j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && from[i] == to[j]) {
      flush();
      ++i;
      ++j;
    } else if (j == m || (i < n && lcs[i + 1][j] >= lcs[i][j + 1])) {
      cur.from.push_back(from[i++]);
    } else {
      cur.to.push_back(to[j++]);
    }
  }
  flush();
  return edits;
}

namespace {

std::vector<std::string> cores(const std::vector<std::string>& words) {
  std::vector<std::string> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(to_lower_ascii(split_word(w).core));
  return out;
}

std::size_t find_run(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return hay.size();
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) return i;
  }
  return hay.size();
}

std::string digits_of(const std::string& w) {
  std::string d;
  for (char c : w) {
    if (std::isdigit(static_cast<unsigned char>(c))) d += c;
  }
  return d;
}

// Replaces child[at, at + len) by `repl`, keeping the leading punctuation
// and capitalisation of the first word and the trailing punctuation of the
// last.
void splice(std::vector<std::string>& child, std::size_t at, std::size_t len,
            std::vector<std::string> repl) {
  const auto first = split_word(child[at]);
  const auto last = split_word(child[at + len - 1]);
  if (!first.core.empty() && std::isupper(static_cast<unsigned char>(first.core[0])) &&
      !repl.front().empty()) {
    repl.front()[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(repl.front()[0])));
  }
  repl.front() = first.lead + repl.front();
  repl.back() += last.trail;
  child.erase(child.begin() + static_cast<std::ptrdiff_t>(at),
              child.begin() + static_cast<std::ptrdiff_t>(at + len));
  child.insert(child.begin() + static_cast<std::ptrdiff_t>(at), repl.begin(), repl.end());
}

constexpr std::size_t kMaxSpan = 3;

}  // namespace

std::vector<std::string> default_rewrite(const std::vector<corpus::Conversation>& gradv,
                                         std::string_view recovered_response, std::size_t g,
                                         std::uint64_t seed) {
  if (gradv.size() < 2) throw Error("rewriting needs at least two gradient conversations");
  const auto& top1 = gradv[gradv.size() - 1];
  const auto& top2 = gradv[gradv.size() - 2];
  const auto p1 = split_whitespace(top1.prompt);
  const auto p2 = split_whitespace(top2.prompt);
  if (p1.empty()) throw Error("rewriting needs a non-empty top prompt");
  const std::size_t n = p1.size();

  // Crossover sites: short gaps where top_2's prompt differs from top_1's.
  std::vector<WordEdit> sites;
  {
    for (auto& e : word_diff(p1, p2)) {
      if (!e.from.empty() && !e.to.empty() && e.from.size() <= kMaxSpan && e.to.size() <= kMaxSpan) {
        sites.push_back(std::move(e));
      }
    }
  }
  // Substitutions: how the recovered response departs from top_1's own
  // response, restricted to phrases that top_1's prompt contains.
  std::vector<WordEdit> subs;
  for (auto& e : word_diff(cores(split_whitespace(top1.response)),
                           cores(split_whitespace(recovered_response)))) {
    if (e.from.empty() || e.to.empty() || e.from.size() > kMaxSpan || e.to.size() > kMaxSpan) continue;
    // Both sides must carry meaning; swapping function words only garbles.
    const auto meaningful = [](const std::vector<std::string>& ws) {
      return std::any_of(ws.begin(), ws.end(),
                         [](const std::string& w) { return is_content(w) || !digits_of(w).empty(); });
    };
    if (!meaningful(e.from) || !meaningful(e.to)) continue;
    subs.push_back(std::move(e));
  }

  const std::size_t budget = std::max<std::size_t>(1, n / 5);
  std::vector<std::string> out;
  for (std::size_t j = 0; j < g; ++j) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(j)));
    std::vector<std::string> child = p1;

    // Crossover at j seeded sites, at most a quarter of the words.
    auto order = sites;
    rng.shuffle(order);
    std::size_t crossed = 0;
    for (std::size_t s = 0; s < order.size() && s < j; ++s) {
      const auto& e = order[s];
      if (crossed + std::max(e.from.size(), e.to.size()) > n / 4) continue;
      const auto at = find_run(child, e.from);
      if (at == child.size()) continue;
      child.erase(child.begin() + static_cast<std::ptrdiff_t>(at),
                  child.begin() + static_cast<std::ptrdiff_t>(at + e.from.size()));
      child.insert(child.begin() + static_cast<std::ptrdiff_t>(at), e.to.begin(), e.to.end());
      crossed += std::max(e.from.size(), e.to.size());
    }

    // Substitution, first candidate in response order, the rest shuffled.
    auto edits = subs;
    if (j > 0) rng.shuffle(edits);
    std::size_t changed = 0;
    for (const auto& e : edits) {
      const auto words = cores(child);
      std::size_t at = find_run(words, e.from);
      std::vector<std::string> repl = e.to;
      std::size_t len = e.from.size();
      if (at == words.size() && e.from.size() == 1 && e.to.size() == 1) {
        // Numbers embedded in longer words ("37-year-old") map onto the bare
        // number in the prompt.
        const auto from_d = digits_of(e.from[0]), to_d = digits_of(e.to[0]);
        if (from_d.empty() || to_d.empty() || from_d == to_d) continue;
        at = find_run(words, {from_d});
        repl = {to_d};
      }
      if (at == words.size()) continue;
      const std::size_t cost = std::max(len, repl.size());
      if (changed + cost > budget) continue;
      splice(child, at, len, std::move(repl));
      changed += cost;
    }
    out.push_back(join(child));
  }
  return out;
}

// ---------------------------------------------------------------- probing

QueryRecord observe(const ProbeApp& app, const corpus::Conversation& conv) {
  if (app.vocab == nullptr) throw Error("probe app has no vocabulary");
  const auto key = derive_seed(app.seed, fnv1a(conv.prompt + '\x1f' + conv.response));
  QueryRecord r;
  r.conversation = conv;
  r.topic = conv.topic;
  const auto ts = corpus::tokenize(*app.vocab, conv.response);
  const auto raw = sim::emit_packets(app.scenario, ts, key);
  r.packet_trace = app.defense.is_identity()
                       ? raw
                       : sim::apply_defense(app.defense, raw, derive_seed(key, "defense"));
  r.side_trace = traceex::extract_trace(app.extraction, r.packet_trace);
  return r;
}

std::vector<QueryRecord> probe(const std::vector<std::string>& prompts, const ProbeApp& app,
                               const std::string& id_prefix, int topic, int iteration) {
  if (!app.responder) throw Error("probe app has no responder");
  std::vector<QueryRecord> out;
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    corpus::Conversation c;
    c.id = id_prefix + std::to_string(j);
    c.prompt = prompts[j];
    c.response = app.responder(prompts[j]);
    c.topic = topic;
    auto r = observe(app, c);
    r.origin.iteration = iteration;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- acceptance

bool accept(double new_distance, const std::vector<double>& ref_distances) {
  if (ref_distances.empty()) throw Error("acceptance needs at least one reference");
  return new_distance < *std::max_element(ref_distances.begin(), ref_distances.end());
}

bool accept(const retrieval::DualTower& model, const SideTrace& candidate, const SideTrace& victim,
            const std::vector<const QueryRecord*>& refs) {
  std::vector<double> d;
  for (const auto* r : refs) d.push_back(retrieval::trace_distance(model, r->side_trace, victim));
  return accept(retrieval::trace_distance(model, candidate, victim), d);
}

// ---------------------------------------------------------------- oracles

TopicOracles::TopicOracles(const retrieval::QueryDB& db, const corpus::Vocab& vocab,
                           std::size_t order)
    : db_(&db), vocab_(&vocab), order_(order) {
  tokens_.reserve(db.size());
  for (const auto& r : db.records) {
    tokens_.push_back(r.origin.is_probe() ? corpus::tokenize(vocab, r.conversation.response)
                                          : corpus::TokenSeq{});
  }
}

const seeker::LmOracle& TopicOracles::for_topics(std::vector<int> topics) {
  std::sort(topics.begin(), topics.end());
  topics.erase(std::unique(topics.begin(), topics.end()), topics.end());
  auto it = cache_.find(topics);
  if (it != cache_.end()) return *it->second;
  auto lm = std::make_unique<seeker::NGramOracle>(vocab_->size(), order_);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const int t = db_->records[i].topic;
    if (!tokens_[i].empty() && std::binary_search(topics.begin(), topics.end(), t)) {
      lm->add_sequence(tokens_[i].tokens);
    }
  }
  if (lm->num_tokens() <= 0) throw Error("no probe responses for the requested topics");
  return *cache_.emplace(topics, std::move(lm)).first->second;
}

seeker::NGramOracle TopicOracles::leave_one_out(int topic, std::size_t skip) const {
  seeker::NGramOracle lm(vocab_->size(), order_);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i != skip && !tokens_[i].empty() && db_->records[i].topic == topic) {
      lm.add_sequence(tokens_[i].tokens);
    }
  }
  if (lm.num_tokens() <= 0) throw Error("no probe responses for the requested topic");
  return lm;
}

// ---------------------------------------------------------------- the loop

void AttackConfig::validate() const {
  if (g < 2) throw Error("refinement needs g >= 2 references");
  beam.validate();
}

namespace {

// References weighted by trace similarity, sharper than the raw cosine so
// an exact match dominates the priming n-gram.
constexpr double kReferenceTemperature = 0.05;

struct Recovery {
  std::vector<retrieval::Hit> hits;
  std::vector<const QueryRecord*> refs;
  std::vector<double> distances;
  seeker::GenResult top;
};

Recovery recover(const SideTrace& victim, const retrieval::QueryDB& db,
                 const retrieval::DbIndex& index, const seeker::LmOracle& oracle,
                 const std::vector<int>& topics, const AttackContext& ctx, const AttackConfig& cfg,
                 std::optional<std::size_t> exclude = std::nullopt) {
  Recovery r;
  auto hits = retrieval::retrieve(index, db, victim, std::min(db.size(), cfg.g + (exclude ? 1 : 0)),
                                  topics);
  for (const auto& h : hits) {
    if (exclude && h.index == *exclude) continue;
    if (r.hits.size() == cfg.g) break;
    r.hits.push_back(h);
  }
  if (r.hits.empty()) throw Error("no references retrieved for the victim");
  std::vector<corpus::TokenSeq> ref_tokens;
  std::vector<double> weights;
  for (const auto& h : r.hits) {
    const auto& rec = db.records[h.index];
    r.refs.push_back(&rec);
    r.distances.push_back(1.0 - h.similarity);
    ref_tokens.push_back(corpus::tokenize(*ctx.vocab, rec.conversation.response));
    weights.push_back(std::exp((h.similarity - r.hits.front().similarity) / kReferenceTemperature));
  }
  const auto spec = seeker::constraint_from_trace(victim, ctx.vocab->max_token_len());
  auto gens = seeker::generate(oracle, *ctx.vocab, spec, ref_tokens, cfg.beam, weights);
  r.top = std::move(gens.front());
  return r;
}

double safe_confidence(const seeker::GenResult& g) {
  return g.tokens.empty() ? 0.0 : seeker::confidence(g);
}

}  // namespace

AttackResult run_attack(const SideTrace& victim, const std::string& victim_id,
                        const retrieval::QueryDB& db, const retrieval::DbIndex& index,
                        TopicOracles& oracles, const AttackContext& ctx, const AttackConfig& cfg) {
  cfg.validate();
  if (!ctx.classifier || !ctx.tower || !ctx.vocab || !ctx.app || !ctx.rewriter) {
    throw Error("attack context is incomplete");
  }
  if (db.empty()) throw Error("attack needs a non-empty query db");
  retrieval::QueryDB local = db;
  retrieval::DbIndex idx = index;
  const auto victim_vec = ctx.tower->embed_trace(victim);
  std::unordered_set<std::string> known;
  for (const auto& r : local.records) known.insert(r.conversation.prompt);

  AttackResult result;
  result.topics = retrieval::topic_filter(*ctx.classifier, victim, false);
  Recovery rec = recover(victim, local, idx, oracles.for_topics(result.topics), result.topics, ctx, cfg);
  if (cfg.detect_misclass && ctx.confidence_population.size() >= 10 &&
      seeker::detect_misclass(safe_confidence(rec.top), ctx.confidence_population)) {
    result.widened = true;
    result.topics = retrieval::topic_filter(*ctx.classifier, victim, true);
    rec = recover(victim, local, idx, oracles.for_topics(result.topics), result.topics, ctx, cfg);
  }

  struct Best {
    std::string prompt;
    double distance;
    double confidence;
    std::string response;
    double response_confidence;
  } best{rec.refs.front()->conversation.prompt, rec.distances.front(), safe_confidence(rec.top),
         rec.top.text, safe_confidence(rec.top)};

  IterationRecord it0;
  it0.ref_distances = rec.distances;
  it0.best_distance = best.distance;
  it0.prompt = best.prompt;
  it0.response = rec.top.text;
  it0.generation = rec.top.text;
  it0.confidence = safe_confidence(rec.top);
  it0.violation = rec.top.violation_flag;
  result.history.push_back(std::move(it0));

  for (std::size_t i = 1; i <= cfg.k; ++i) {
    if (rec.refs.size() < 2) break;
    std::vector<corpus::Conversation> gradv;
    for (const auto* r : retrieval::rank_gradient(*ctx.tower, victim, rec.refs)) {
      gradv.push_back(r->conversation);
    }
    const double gen_conf = safe_confidence(rec.top);
    // Re-probing a known prompt only duplicates its record.
    std::vector<std::string> prompts;
    for (auto& q : ctx.rewriter->rewrite(gradv, rec.top.text, cfg.g,
                                         derive_seed(cfg.seed, victim_id + "#" + std::to_string(i)))) {
      if (known.insert(q).second) prompts.push_back(std::move(q));
    }
    if (prompts.empty()) break;
    const int label = rec.refs.front()->topic;
    auto probed = probe(prompts, *ctx.app, victim_id + "-r" + std::to_string(i) + "-", label,
                        static_cast<int>(i));
    result.probe_calls += probed.size();

    IterationRecord step;
    step.iteration = i;
    step.candidate_prompts = prompts;
    std::vector<std::string> new_ids;
    bool improved = false;
    for (auto& p : probed) {
      const double d = 1.0 - retrieval::cosine(ctx.tower->embed_trace(p.side_trace), victim_vec);
      const bool ok = accept(d, rec.distances);
      step.candidate_distances.push_back(d);
      step.accepted.push_back(ok);
      if (!ok) continue;
      if (d < best.distance || (d == best.distance && gen_conf > best.confidence)) {
        best.prompt = p.conversation.prompt;
        best.distance = d;
        best.confidence = gen_conf;
        improved = true;
      }
      new_ids.push_back(p.id());
      idx.add(p);
      local.records.push_back(p);
      result.accepted.push_back(std::move(p));
    }
    if (!new_ids.empty()) ++local.version;

    rec = recover(victim, local, idx, oracles.for_topics(result.topics), result.topics, ctx, cfg);
    step.ref_distances = rec.distances;
    step.best_distance = best.distance;
    // The answer's response is the generation that first saw its prompt.
    if (improved) {
      best.response = rec.top.text;
      best.response_confidence = safe_confidence(rec.top);
    }
    step.prompt = best.prompt;
    step.response = best.response;
    step.generation = rec.top.text;
    step.confidence = best.response_confidence;
    step.violation = rec.top.violation_flag;
    result.history.push_back(std::move(step));

    const bool retrieved = std::any_of(rec.refs.begin(), rec.refs.end(), [&](const QueryRecord* r) {
      return std::find(new_ids.begin(), new_ids.end(), r->id()) != new_ids.end();
    });
    if (!retrieved) break;
  }

  result.prompt = result.history.back().prompt;
  result.response = result.history.back().response;
  result.confidence = result.history.back().confidence;
  return result;
}

std::vector<double> confidence_population(const retrieval::QueryDB& db,
                                          const retrieval::DbIndex& index, TopicOracles& oracles,
                                          const AttackContext& ctx, const AttackConfig& cfg,
                                          std::size_t n) {
  if (db.empty() || n == 0) return {};
  std::vector<double> out;
  const std::size_t count = std::min(n, db.size());
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t i = s * db.size() / count;
    const auto& r = db.records[i];
    const auto lm = oracles.leave_one_out(r.topic, i);
    const auto rec = recover(r.side_trace, db, index, lm, {r.topic}, ctx, cfg, i);
    out.push_back(safe_confidence(rec.top));
  }
  return out;
}

std::string transcript_jsonl(const std::string& victim_id, const AttackResult& result,
                             const corpus::Conversation* truth, const retrieval::DualTower* tower) {
  std::string out;
  for (const auto& h : result.history) {
    nlohmann::json j{{"victim", victim_id},
                     {"iteration", h.iteration},
                     {"candidate_prompts", h.candidate_prompts},
                     {"trace_distances", h.candidate_distances},
                     {"accepted", h.accepted},
                     {"ref_distances", h.ref_distances},
                     {"best_distance", h.best_distance},
                     {"prompt", h.prompt},
                     {"response", h.response},
                     {"generation", h.generation},
                     {"confidence", h.confidence},
                     {"violation", h.violation}};
    if (truth != nullptr) {
      const auto m = metrics::compare(truth->prompt, truth->response, h.prompt, h.response, tower);
      j["metrics"] = {{"prompt_ned", m.prompt_ned},         {"prompt_rouge1", m.prompt_rouge1},
                      {"prompt_cos", m.prompt_cos},         {"response_ned", m.response_ned},
                      {"response_rouge1", m.response_rouge1}, {"response_cos", m.response_cos},
                      {"success", m.success()}};
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace netecho::refine
