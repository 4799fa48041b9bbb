// End-to-end acceptance run on the synthetic benchmark. Prints one
// PASS/FAIL line per criterion and exits non-zero when any fails.
//
//   acceptance_test --config configs/benchmark.json --work-dir /tmp/accept

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "netecho/classify.hpp"
#include "netecho/common.hpp"
#include "netecho/corpus.hpp"
#include "netecho/harness.hpp"
#include "netecho/metrics.hpp"
#include "netecho/refine.hpp"
#include "netecho/retrieval.hpp"
#include "netecho/seeker.hpp"
#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace fs = std::filesystem;
namespace nh = netecho::harness;
namespace nc = netecho::classify;
namespace nr = netecho::retrieval;
namespace nt = netecho::traceex;
namespace ns = netecho::sim;
namespace sk = netecho::seeker;
namespace nm = netecho::metrics;
namespace corpus = netecho::corpus;
using netecho::derive_seed;
using netecho::Rng;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(prec);
  o << v;
  return o.str();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  // Records a failed check; the first few reasons are kept.
  void require(bool ok, const std::string& why) {
    if (ok) return;
    if (pass || detail.size() < 400) detail += (detail.empty() ? "" : "; ") + why;
    pass = false;
  }
  void note(const std::string& s) {
    if (pass) detail += (detail.empty() ? "" : "; ") + s;
  }
};

// ------------------------------------------------------------ shared state

struct Pipeline {
  nh::ExperimentConfig cfg;
  nh::TrainSummary train;
  nh::AttackSummary attack;
  std::vector<nh::SweepRow> sweep;
  double probe_seconds = 0, train_seconds = 0, attack_seconds = 0, sweep_seconds = 0,
         report_seconds = 0;

  double total_seconds() const {
    return probe_seconds + train_seconds + attack_seconds + sweep_seconds + report_seconds;
  }
};

class Context {
 public:
  explicit Context(nh::ExperimentConfig cfg) : cfg_(std::move(cfg)) {}

  const nh::ExperimentConfig& config() const { return cfg_; }

  // Runs probe, train, attack, defense-sweep and report once.
  const Pipeline& pipeline() {
    if (pipeline_) return *pipeline_;
    Pipeline p;
    p.cfg = cfg_;
    auto t0 = Clock::now();
    nh::cmd_probe(p.cfg);
    p.probe_seconds = since(t0);
    t0 = Clock::now();
    p.train = nh::cmd_train(p.cfg);
    p.train_seconds = since(t0);
    t0 = Clock::now();
    p.attack = nh::cmd_attack(p.cfg);
    p.attack_seconds = since(t0);
    t0 = Clock::now();
    p.sweep = nh::cmd_defense_sweep(p.cfg);
    p.sweep_seconds = since(t0);
    t0 = Clock::now();
    nh::cmd_report(p.cfg.output_dir);
    p.report_seconds = since(t0);
    pipeline_ = std::move(p);
    return *pipeline_;
  }

  const nh::Benchmark& benchmark() {
    if (!bench_) bench_ = nh::make_benchmark(cfg_);
    return *bench_;
  }

 private:
  nh::ExperimentConfig cfg_;
  std::optional<Pipeline> pipeline_;
  std::optional<nh::Benchmark> bench_;
};

// ------------------------------------------------------------ 1

Outcome round_trip(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto& b = ctx.benchmark();
  const std::size_t n = std::min<std::size_t>(1000, b.corpus.size());
  std::size_t traces = 0, exact = 0;
  for (char id : std::string("ABFG")) {
    const auto sc = ns::preset_scenario(id);
    const auto ex = nt::extraction_for(sc);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ts = corpus::tokenize(*b.vocab, b.corpus.conversations[i].response);
      const auto em = ns::emit_with_groups(sc, ts, derive_seed(7, std::string(1, id) + std::to_string(i)));
      const auto st = nt::extract_trace(ex, em.trace);
      bool ok = st.trace_a() == em.group_sizes;
      std::size_t pos = 0;
      for (const auto& g : st.groups) {
        if (!ok) break;
        std::int64_t sum = 0;
        for (std::size_t k = 0; k < g.count; ++k) {
          const auto len = static_cast<std::int64_t>(ts.char_lens[pos + k]);
          sum += len;
          if (g.char_lens && (*g.char_lens)[k] != len) ok = false;
        }
        if (g.char_sum != sum) ok = false;
        pos += g.count;
      }
      ok = ok && pos == ts.size();
      ++traces;
      exact += ok ? 1 : 0;
      bad += ok ? 0 : 1;
    }
    o.require(bad == 0, std::string("scenario ") + id + ": " + std::to_string(bad) + " inexact");
  }
  const double secs = since(t0);
  o.require(secs < 30.0, "runtime " + fmt(secs, 1) + " s >= 30 s");
  o.note(std::to_string(exact) + "/" + std::to_string(traces) + " traces exact over " +
         std::to_string(n) + " conversations x A,B,F,G in " + fmt(secs, 1) + " s");
  return o;
}

// ------------------------------------------------------------ 2

ns::PacketTrace bursts(const std::vector<std::size_t>& sizes, std::int64_t len) {
  ns::PacketTrace pt;
  std::int64_t t = 0;
  for (auto s : sizes) {
    for (std::size_t i = 0; i < s; ++i) {
      pt.packets.push_back({t, len});
      t += 2000;
    }
    t += 120000;
  }
  return pt;
}

Outcome worked_examples(Context&) {
  Outcome o;
  nt::ExtractionConfig api;
  api.mode = nt::CountMode::kLengthMultiple;
  api.per_token_overhead = 264;
  api.length_multiple_base = 266;
  const auto st = nt::extract_trace(api, ns::PacketTrace{{{0, 804}}});
  o.require(st.size() == 1 && st.groups[0].count == 3 && st.groups[0].char_sum == 12,
            "804-byte packet did not give (3, 12)");

  // The same packet from the emitting side: three 4-character tokens,
  // 3 * 264 + 12 = 804 bytes.
  auto b = ns::preset_scenario('B');
  b.tokens_per_packet.kind = ns::TokensPerPacket::Kind::kFixed;
  b.tokens_per_packet.fixed_k = 3;
  corpus::TokenSeq three;
  three.tokens = {0, 1, 2};
  three.char_lens = {4, 4, 4};
  const auto pt = ns::emit_packets(b, three, 1);
  o.require(pt.size() == 1 && pt.packets[0].len == 804, "emitting 3 x 4 chars did not give 804 bytes");

  nt::ExtractionConfig chat;
  const auto a = nt::extract_trace(chat, bursts({1, 3, 2, 1}, 107)).trace_a();
  o.require(a == std::vector<std::size_t>({1, 3, 2, 1}), "chatbot bursts did not give [1,3,2,1]");

  const auto capped = nt::extract_trace(chat, bursts({9, 2}, 107));
  o.require(capped.trace_a() == std::vector<std::size_t>({6, 2}), "9-packet burst not capped at 6");
  for (const auto& g : capped.groups) o.require(g.count <= 6, "group above 6 tokens");
  o.note("804 -> (3, 12); bursts -> [1,3,2,1]; 9-packet burst -> 6");
  return o;
}

// ------------------------------------------------------------ 3

Outcome classifier_quality(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto& base = ctx.benchmark();
  std::string table;
  for (char id : std::string("ABCDEFG")) {
    auto cfg = ctx.config();
    cfg.scenario = std::string(1, id);
    cfg.defense = ns::preset_defense(id);
    const auto b = nh::make_benchmark(cfg, base.corpus);
    std::vector<nc::LabeledTrace> all;
    for (const auto& c : b.corpus.conversations) {
      const auto r = netecho::refine::observe(b.app, c);
      all.push_back({r.id(), r.side_trace, r.topic});
    }
    const auto train_seed = cfg.seed_for("train");
    const auto split = nc::split_dataset(all, derive_seed(train_seed, "split"));
    auto tc = cfg.classifier;
    tc.seed = derive_seed(train_seed, "classifier");
    const auto topics = b.corpus.topic_names.size();
    const auto ab = nc::evaluate(
        nc::train_classifier(split.train, split.val, tc, nt::FeatureMode::kAB, topics), split.test);
    const auto a = nc::evaluate(
        nc::train_classifier(split.train, split.val, tc, nt::FeatureMode::kA, topics), split.test);
    table += std::string(table.empty() ? "" : " ") + id + ":" + fmt(ab.top1, 2) + "/" + fmt(a.top1, 2);
    o.require(ab.top1 >= a.top1, std::string("scenario ") + id + ": AB top-1 " + fmt(ab.top1) +
                                     " < A " + fmt(a.top1));
    if (id == 'A') {
      o.require(ab.top1 >= 0.90, "scenario A AB top-1 " + fmt(ab.top1) + " < 0.90");
      o.require(ab.top3 >= 0.97, "scenario A AB top-3 " + fmt(ab.top3) + " < 0.97");
      o.note("scenario A AB top-1 " + fmt(ab.top1, 3) + ", top-3 " + fmt(ab.top3, 3));
    }
  }
  const double secs = since(t0);
  o.require(secs < 300.0, "runtime " + fmt(secs, 1) + " s >= 300 s");
  o.note("top-1 AB/A " + table + " in " + fmt(secs, 1) + " s");
  return o;
}

// ------------------------------------------------------------ 4

nt::SideTrace crop(const nt::SideTrace& st, std::size_t n) {
  nt::SideTrace out;
  out.groups.assign(st.groups.begin(), st.groups.begin() + std::min(n, st.groups.size()));
  return out;
}

Outcome gradient_checks(Context& ctx) {
  Outcome o;
  const auto& b = ctx.benchmark();
  const auto& convs = b.corpus.conversations;
  Rng rng(404);
  double worst_cls = 0.0;
  for (auto mode : {nt::FeatureMode::kA, nt::FeatureMode::kAB}) {
    for (int s = 0; s < 10; ++s) {
      const auto& c = convs[rng.index(convs.size())];
      const auto r = netecho::refine::observe(b.app, c);
      nc::ClassifierModel m(mode, b.corpus.topic_names.size(), 12, 100 + static_cast<std::uint64_t>(s));
      const double err = nc::grad_check(m, {r.id(), r.side_trace, r.topic});
      worst_cls = std::max(worst_cls, err);
    }
  }
  o.require(worst_cls < 1e-4, "classifier max relative error " + std::to_string(worst_cls));

  double worst_dual = 0.0;
  const nc::ClassifierModel base(nt::FeatureMode::kAB, b.corpus.topic_names.size(), 12, 3);
  const nr::DualTower tower(base, 9);
  for (int s = 0; s < 10; ++s) {
    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 4));
    std::vector<nt::SideTrace> traces;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = convs[rng.index(convs.size())];
      traces.push_back(crop(netecho::refine::observe(b.app, c).side_trace,
                            static_cast<std::size_t>(rng.uniform_int(2, 5))));
      texts.push_back(c.prompt);
    }
    std::vector<const nt::SideTrace*> tp;
    std::vector<std::string_view> tv;
    for (std::size_t i = 0; i < n; ++i) {
      tp.push_back(&traces[i]);
      tv.push_back(texts[i]);
    }
    worst_dual = std::max(worst_dual, nr::dual_grad_check(tower, tp, tv));
  }
  o.require(worst_dual < 1e-4, "dual tower max relative error " + std::to_string(worst_dual));
  std::ostringstream d;
  d << "max relative error: classifier " << std::scientific << std::setprecision(2) << worst_cls
    << " (10 samples x A, AB), dual tower " << worst_dual << " (10 batches)";
  o.note(d.str());
  return o;
}

// ------------------------------------------------------------ 5

Outcome retrieval_quality(Context& ctx) {
  Outcome o;
  const auto& p = ctx.pipeline();
  const auto& dir = p.cfg.output_dir;
  o.require(p.train.recall_at_1 >= 0.80, "recall@1 " + fmt(p.train.recall_at_1) + " < 0.80");

  const auto tower = nr::load_dual_tower(dir / nh::files::kDualTower);
  const auto all = nr::read_query_db(dir / nh::files::kQueryDb);
  const nr::DbIndex index(tower, all);
  std::vector<nr::Vec> emb;
  for (const auto& r : all.records) emb.push_back(tower.embed_trace(r.side_trace));
  std::size_t queries = 0, mismatched = 0;
  for (std::size_t q = 0; q < all.size(); q += 10) {
    const auto& st = all.records[q].side_trace;
    const auto hits = nr::retrieve(index, all, st, all.size());
    const auto qv = tower.embed_trace(st);
    std::vector<std::pair<double, std::string>> brute;
    for (std::size_t i = 0; i < all.size(); ++i) brute.emplace_back(-nr::cosine(qv, emb[i]), all.records[i].id());
    std::sort(brute.begin(), brute.end());
    bool same = hits.size() == brute.size();
    for (std::size_t i = 0; same && i < hits.size(); ++i) {
      same = all.records[hits[i].index].id() == brute[i].second;
    }
    ++queries;
    mismatched += same ? 0 : 1;
  }
  o.require(mismatched == 0, std::to_string(mismatched) + " retrieve orders differ from brute force");
  o.note("recall@1 " + fmt(p.train.recall_at_1, 3) + "; retrieve == brute-force sort on " +
         std::to_string(queries) + " full rankings");
  return o;
}

// ------------------------------------------------------------ 6

corpus::Vocab random_vocab(Rng& rng, std::size_t n) {
  std::set<std::string> seen;
  std::vector<std::string> toks;
  while (toks.size() < n) {
    const auto len = static_cast<std::size_t>(rng.uniform_int(1, 5));
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.uniform_int(0, 5)));
    if (seen.insert(s).second) toks.push_back(s);
  }
  return corpus::Vocab(toks);
}

sk::NGramOracle random_ngram(Rng& rng, std::size_t vocab_size) {
  sk::NGramOracle lm(vocab_size, 3);
  for (int s = 0; s < 40; ++s) {
    std::vector<sk::TokenId> seq;
    const auto len = rng.uniform_int(2, 8);
    for (int i = 0; i < len; ++i) seq.push_back(static_cast<sk::TokenId>(rng.index(vocab_size)));
    lm.add_sequence(seq);
  }
  return lm;
}

double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Exhaustive argmax under the same renormalized scoring; ties go to the
// smaller token-id sequence.
std::pair<std::vector<sk::TokenId>, double> exhaustive_best(const sk::LmOracle& lm,
                                                            const corpus::Vocab& vocab,
                                                            const sk::ConstraintSpec& spec) {
  std::vector<sk::TokenId> best, cur;
  double best_lp = -std::numeric_limits<double>::infinity();
  std::function<void(sk::GenState, double)> rec = [&](sk::GenState st, double lp) {
    if (st.done(spec)) {
      if (lp > best_lp || (lp == best_lp && cur < best)) {
        best_lp = lp;
        best = cur;
      }
      return;
    }
    const auto scores = lm.next_scores(cur);
    const auto [lo, hi] = sk::allowed_lengths(st, spec);
    std::vector<sk::TokenId> allowed;
    std::vector<double> masked;
    for (sk::TokenId w = 0; w < vocab.size(); ++w) {
      const auto l = vocab.char_len(w);
      if (l >= lo && l <= hi) {
        allowed.push_back(w);
        masked.push_back(scores[w]);
      }
    }
    if (allowed.empty()) return;
    const double z = log_sum_exp(masked);
    for (std::size_t i = 0; i < allowed.size(); ++i) {
      cur.push_back(allowed[i]);
      rec(st.advance(spec, vocab.char_len(allowed[i])), lp + masked[i] - z);
      cur.pop_back();
    }
  };
  rec({}, 0.0);
  return {best, best_lp};
}

// Re-derives the token lengths of a result and checks them against its spec.
bool retokenized_ok(const sk::ConstraintSpec& spec, const corpus::Vocab& vocab, const sk::GenResult& r) {
  if (r.text != corpus::detokenize(vocab, r.tokens.tokens)) return false;
  for (std::size_t i = 0; i < r.tokens.size(); ++i) {
    if (r.tokens.char_lens[i] != vocab.char_len(r.tokens.tokens[i])) return false;
  }
  return sk::satisfies(spec, vocab, r.tokens.tokens);
}

Outcome constrained_generation(Context& ctx) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto& b = ctx.benchmark();
  const auto& cfg = ctx.config();
  std::size_t results = 0, unflagged = 0, bad = 0;

  // Benchmark traces under two scenarios: per-token (A) and grouped (B).
  std::vector<std::string> responses;
  for (const auto& c : b.corpus.conversations) responses.push_back(c.response);
  const auto lm = sk::train_ngram(responses, *b.vocab, cfg.ngram_order);
  for (char id : std::string("AB")) {
    auto c2 = cfg;
    c2.scenario = std::string(1, id);
    c2.defense = ns::preset_defense(id);
    const auto bench = nh::make_benchmark(c2, b.corpus);
    for (std::size_t i = 0; i < 15; ++i) {
      const auto& conv = b.corpus.conversations[i * 61 % b.corpus.size()];
      const auto r = netecho::refine::observe(bench.app, conv);
      const auto spec = sk::constraint_from_trace(r.side_trace, b.vocab->max_token_len());
      for (const auto& g : sk::generate(lm, *b.vocab, spec, {}, cfg.attack.beam)) {
        ++results;
        if (g.violation_flag) continue;
        ++unflagged;
        if (!retokenized_ok(spec, *b.vocab, g)) ++bad;
      }
    }
  }
  // Random toy specs, per-token and grouped.
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const auto v = random_vocab(rng, 40);
    const auto toy = random_ngram(rng, v.size());
    sk::ConstraintSpec spec;
    spec.max_token_len = v.max_token_len();
    if (trial % 2 == 0) {
      for (int i = 0; i < 6; ++i) spec.lengths.push_back(v.char_len(static_cast<sk::TokenId>(rng.index(v.size()))));
    } else {
      spec.mode = sk::ConstraintSpec::Mode::kGroup;
      for (int g = 0; g < 3; ++g) {
        const auto k = static_cast<std::size_t>(rng.uniform_int(1, 3));
        std::size_t sum = 0;
        for (std::size_t i = 0; i < k; ++i) sum += v.char_len(static_cast<sk::TokenId>(rng.index(v.size())));
        spec.groups.push_back({k, sum});
      }
    }
    for (const auto& g : sk::generate(toy, v, spec, {})) {
      ++results;
      if (g.violation_flag) continue;
      ++unflagged;
      if (!retokenized_ok(spec, v, g)) ++bad;
    }
  }
  o.require(bad == 0, std::to_string(bad) + "/" + std::to_string(unflagged) + " unflagged results violate their spec");

  Rng toy_rng(2024);
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = random_vocab(toy_rng, static_cast<std::size_t>(toy_rng.uniform_int(10, 50)));
    const auto toy = random_ngram(toy_rng, v.size());
    sk::ConstraintSpec spec;
    spec.max_token_len = v.max_token_len();
    const auto n = toy_rng.uniform_int(1, 4);
    for (int i = 0; i < n; ++i) spec.lengths.push_back(v.char_len(static_cast<sk::TokenId>(toy_rng.index(v.size()))));
    const auto res = sk::generate(toy, v, spec, {});
    const auto [best, best_lp] = exhaustive_best(toy, v, spec);
    if (res.front().tokens.tokens == best && std::abs(res.front().total_logprob - best_lp) < 1e-9) ++agree;
  }
  o.require(agree >= 99, "top beam matched exhaustive search on " + std::to_string(agree) + "/100");
  const double secs = since(t0);
  o.require(secs < 60.0, "runtime " + fmt(secs, 1) + " s >= 60 s");
  o.note(std::to_string(unflagged - bad) + "/" + std::to_string(unflagged) + " unflagged results exact (" +
         std::to_string(results) + " total); top beam == exhaustive on " + std::to_string(agree) +
         "/100 toy specs; " + fmt(secs, 1) + " s");
  return o;
}

// ------------------------------------------------------------ 7

Outcome refinement_direction(Context& ctx) {
  Outcome o;
  const auto& p = ctx.pipeline();
  const auto& f = p.attack.final_mean;
  const auto& z = p.attack.iter0_mean;
  const std::vector<std::tuple<std::string, double, double>> rows{
      {"prompt NED", z.prompt_ned, f.prompt_ned},
      {"prompt ROUGE-1", z.prompt_rouge1, f.prompt_rouge1},
      {"response NED", z.response_ned, f.response_ned},
      {"response ROUGE-1", z.response_rouge1, f.response_rouge1}};
  std::string gains;
  for (const auto& [name, before, after] : rows) {
    o.require(after > before, name + " " + fmt(before, 5) + " -> " + fmt(after, 5) + " did not improve");
    gains += (gains.empty() ? "" : ", ") + name + " " + (after >= before ? "+" : "") + fmt(after - before, 5);
  }
  o.require(p.cfg.attack.k == 3, "benchmark config does not run 3 refinement rounds");

  std::ifstream in(p.cfg.output_dir / nh::files::kTranscripts);
  std::map<std::string, std::vector<double>> best;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    best[j.at("victim").get<std::string>()].push_back(j.at("best_distance").get<double>());
  }
  std::size_t monotone = 0;
  for (const auto& [victim, d] : best) monotone += std::is_sorted(d.rbegin(), d.rend()) ? 1 : 0;
  o.require(!best.empty() && monotone == best.size(),
            "best distance increased in " + std::to_string(best.size() - monotone) + " transcripts");
  o.note(gains + "; best distance non-increasing in " + std::to_string(monotone) + "/" +
         std::to_string(best.size()) + " transcripts");
  return o;
}

// ------------------------------------------------------------ 8

// Wagner-Fischer over Unicode scalars.
std::size_t dp_edit_distance(const std::u32string& a, const std::u32string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    }
  }
  return d[a.size()][b.size()];
}

Outcome metric_oracles(Context&) {
  Outcome o;
  // Alphabet with two multi-byte characters.
  const std::vector<std::pair<std::string, char32_t>> alphabet{
      {"a", U'a'}, {"b", U'b'}, {"c", U'c'}, {" ", U' '}, {"\xc3\xa9", U'é'}, {"\xe2\x82\xac", U'€'}};
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string a8, b8;
    std::u32string a32, b32;
    auto fill = [&](std::string& s8, std::u32string& s32) {
      const auto n = rng.uniform_int(0, 30);
      for (int k = 0; k < n; ++k) {
        const auto& [s, c] = alphabet[rng.index(alphabet.size())];
        s8 += s;
        s32.push_back(c);
      }
    };
    fill(a8, a32);
    fill(b8, b32);
    const auto d = dp_edit_distance(a32, b32);
    const double expected =
        a32.empty() && b32.empty() ? 1.0
                                   : 1.0 - static_cast<double>(d) / static_cast<double>(std::max(a32.size(), b32.size()));
    if (nm::levenshtein(a8, b8) != d || nm::ned(a8, b8) != expected) ++mismatches;
  }
  o.require(mismatches == 0, std::to_string(mismatches) + "/1000 ned values differ from the DP oracle");

  // Hand-computed fixtures.
  struct Fixture {
    const char* name;
    double got, want;
  };
  const std::vector<Fixture> fx{
      {"rouge identical", nm::rouge1_f1("the cat sat", "the cat sat"), 1.0},
      {"rouge disjoint", nm::rouge1_f1("alpha beta", "gamma delta"), 0.0},
      {"rouge one miss", nm::rouge1_f1("a b c", "a b d"), 2.0 / 3.0},
      // overlap min(3,1) + min(1,1) = 2, p = 2/4, r = 2/2
      {"rouge clipped", nm::rouge1_f1("a a a B", "A b"), 2.0 * 0.5 * 1.0 / 1.5},
      {"rouge empty", nm::rouge1_f1("", ""), 1.0},
      // (2*1 + 1*2) / (sqrt(5) * sqrt(5))
      {"tf a a b", nm::tf_cosine("a a b", "a b b"), 0.8},
      {"tf overlap c", nm::tf_cosine("a b c", "c d"), 1.0 / std::sqrt(6.0)},
      {"tf disjoint", nm::tf_cosine("one", "two"), 0.0},
      {"tf identical", nm::tf_cosine("one two", "one two"), 1.0},
  };
  std::size_t ok = 0;
  for (const auto& f : fx) {
    const bool good = std::abs(f.got - f.want) <= 1e-9;
    ok += good ? 1 : 0;
    o.require(good, std::string(f.name) + " gave " + fmt(f.got, 12));
  }
  o.note("ned == DP oracle on 1000/1000 pairs; " + std::to_string(ok) + "/" + std::to_string(fx.size()) +
         " rouge/TF fixtures within 1e-9");
  return o;
}

// ------------------------------------------------------------ 9

Outcome defense_directions(Context& ctx) {
  Outcome o;
  const auto& rows = ctx.pipeline().sweep;
  std::optional<double> clean;
  std::optional<double> pad_a, pad_ab;
  for (const auto& r : rows) {
    if (r.kind == "none" && r.mode == nt::FeatureMode::kAB) clean = r.accuracy.top1;
    if (r.kind == "padding") (r.mode == nt::FeatureMode::kA ? pad_a : pad_ab) = r.accuracy.top1;
  }
  o.require(clean.has_value(), "no clean AB row");
  o.require(pad_a && pad_ab, "no padding rows");
  if (!o.pass) return o;
  double worst_drop = 0.0, worst_ln = 1.0;
  std::size_t dummy_rows = 0, ln_rows = 0;
  for (const auto& r : rows) {
    if (r.kind == "dummy" && r.rate <= 0.20 + 1e-12) {
      ++dummy_rows;
      const double drop = *clean - r.accuracy.top1;
      worst_drop = std::max(worst_drop, drop);
      o.require(drop <= 0.05 + 1e-12, r.experiment() + " drops top-1 by " + fmt(100 * drop, 1) + " points");
    }
    if ((r.kind == "loss" || r.kind == "noise" || r.kind == "loss+noise") && r.rate <= 0.10 + 1e-12) {
      ++ln_rows;
      worst_ln = std::min(worst_ln, r.accuracy.top1);
      o.require(r.accuracy.top1 >= 0.80, r.experiment() + " top-1 " + fmt(r.accuracy.top1) + " < 0.80");
    }
  }
  o.require(dummy_rows > 0 && ln_rows > 0, "sweep has no dummy or loss/noise rows at the tested rates");
  const double gap = std::abs(*pad_ab - *pad_a);
  o.require(gap <= 0.03 + 1e-12, "padded AB " + fmt(*pad_ab) + " vs A " + fmt(*pad_a));
  o.note("worst dummy<=20% drop " + fmt(100 * worst_drop, 1) + " pts over " + std::to_string(dummy_rows) +
         " rates; padded AB " + fmt(*pad_ab, 2) + " vs A " + fmt(*pad_a, 2) + "; worst loss/noise top-1 " +
         fmt(worst_ln, 2) + " over " + std::to_string(ln_rows) + " rows");
  return o;
}

// ------------------------------------------------------------ 10

Outcome end_to_end(Context& ctx) {
  Outcome o;
  const auto& p = ctx.pipeline();
  o.require(p.attack.success_rate >= 0.90, "success rate " + fmt(p.attack.success_rate) + " < 0.90");
  const double secs = p.total_seconds();
  o.require(secs < 900.0, "pipeline took " + fmt(secs, 1) + " s >= 900 s");
  o.note("success rate " + fmt(p.attack.success_rate, 3) + " on " + std::to_string(p.attack.victims) +
         " test-split victims; pipeline " + fmt(secs, 1) + " s (probe " + fmt(p.probe_seconds, 1) + ", train " +
         fmt(p.train_seconds, 1) + ", attack " + fmt(p.attack_seconds, 1) + ", sweep " +
         fmt(p.sweep_seconds, 1) + ", report " + fmt(p.report_seconds, 1) + ")");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Benchmark acceptance run"};
  std::string config_path = NETECHO_BENCHMARK_CONFIG;
  std::string work_dir = (fs::temp_directory_path() / "netecho_acceptance").string();
  std::vector<int> only;
  app.add_option("-c,--config", config_path, "Benchmark config");
  app.add_option("-w,--work-dir", work_dir, "Run directory for the pipeline artifacts");
  app.add_option("--only", only, "Run only these criteria (1-10)");
  CLI11_PARSE(app, argc, argv);

  nh::ExperimentConfig cfg;
  try {
    cfg = nh::load_config(config_path);
    cfg.output_dir = work_dir;
    fs::remove_all(cfg.output_dir);
    fs::create_directories(cfg.output_dir);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << std::endl;
    return 2;
  }
  Context ctx(cfg);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"round-trip exactness", round_trip},
      {"worked examples", worked_examples},
      {"classifier quality", classifier_quality},
      {"gradient checks", gradient_checks},
      {"retrieval", retrieval_quality},
      {"constrained generation", constrained_generation},
      {"refinement direction", refinement_direction},
      {"metric oracles", metric_oracles},
      {"defense directions", defense_directions},
      {"end-to-end success", end_to_end},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
    Outcome out;
    try {
      out = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("error: ") + e.what();
    }
    failed += out.pass ? 0 : 1;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  " << number << ". " << criteria[i].first << ": "
              << out.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
