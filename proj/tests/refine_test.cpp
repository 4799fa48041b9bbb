#include "netecho/refine.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include <nlohmann/json.hpp>

#include "netecho/common.hpp"
#include "netecho/metrics.hpp"

namespace nf = netecho::refine;
namespace nr = netecho::retrieval;
namespace nc = netecho::classify;
namespace nt = netecho::traceex;
namespace ns = netecho::sim;
namespace corpus = netecho::corpus;
using netecho::split_whitespace;

namespace {

corpus::Conversation conv(std::string prompt, std::string response) {
  corpus::Conversation c;
  c.prompt = std::move(prompt);
  c.response = std::move(response);
  return c;
}

// A small benchmark: three topics; every 22nd conversation is held out as a
// victim and the rest form the query DB.
struct World {
  corpus::TopicCorpus corpus;
  corpus::Vocab vocab;
  std::unique_ptr<corpus::SyntheticResponder> responder;
  nf::ProbeApp app;
  nr::QueryDB db;
  std::vector<nr::QueryRecord> victims;
  std::unique_ptr<nc::ClassifierModel> classifier;
  std::unique_ptr<nr::DualTower> tower;
  std::unique_ptr<nr::DbIndex> index;
  nf::CrossoverRewriter rewriter;
};

World& world() {
  static World* w = [] {
    auto* out = new World;
    out->corpus = corpus::synth_corpus(3, 30, 21);
    std::vector<std::string> texts;
    for (const auto& x : out->corpus.conversations) texts.push_back(x.prompt + " " + x.response);
    out->vocab = corpus::build_vocab(texts, 800, 1);
    out->responder = std::make_unique<corpus::SyntheticResponder>(
        3, netecho::derive_seed(21, "responder"));
    out->app.responder = [r = out->responder.get()](std::string_view p) { return r->respond(p); };
    out->app.vocab = &out->vocab;
    out->app.scenario = ns::preset_scenario('A');
    out->app.extraction = nt::extraction_for(out->app.scenario);
    out->app.seed = 4;
    out->db.topic_names = out->corpus.topic_names;
    const auto& cs = out->corpus.conversations;
    for (std::size_t i = 0; i < cs.size(); ++i) {
      auto r = nf::observe(out->app, cs[i]);
      (i % 22 == 21 ? out->victims : out->db.records).push_back(std::move(r));
    }
    std::vector<nc::LabeledTrace> train;
    for (const auto& r : out->db.records) train.push_back({r.id(), r.side_trace, r.topic});
    nc::TrainConfig tc;
    tc.epochs = 6;
    tc.lr = 0.1;
    out->classifier = std::make_unique<nc::ClassifierModel>(
        nc::train_classifier(train, {}, tc, nt::FeatureMode::kAB, 3));
    nr::DualTrainConfig dc;
    dc.epochs = 6;
    out->tower = std::make_unique<nr::DualTower>(nr::train_dual_tower(out->db, *out->classifier, dc));
    out->index = std::make_unique<nr::DbIndex>(*out->tower, out->db);
    return out;
  }();
  return *w;
}

nf::AttackContext context(World& w) {
  nf::AttackContext ctx;
  ctx.classifier = w.classifier.get();
  ctx.tower = w.tower.get();
  ctx.vocab = &w.vocab;
  ctx.app = &w.app;
  ctx.rewriter = &w.rewriter;
  return ctx;
}

nf::AttackConfig small_config(std::size_t k) {
  nf::AttackConfig cfg;
  cfg.k = k;
  cfg.beam.width = 8;
  cfg.beam.groups = 2;
  return cfg;
}

double token_overlap(const std::string& candidate, const std::string& base) {
  const auto a = split_whitespace(candidate);
  auto b = split_whitespace(base);
  std::size_t shared = 0;
  for (const auto& w : a) {
    auto it = std::find(b.begin(), b.end(), w);
    if (it != b.end()) {
      ++shared;
      b.erase(it);
    }
  }
  return a.empty() ? 0.0 : static_cast<double>(shared) / static_cast<double>(a.size());
}

}  // namespace

TEST(WordDiff, IdenticalHasNoEdits) {
  EXPECT_TRUE(nf::word_diff({"a", "b"}, {"a", "b"}).empty());
}

TEST(WordDiff, ReportsReplacementsAndInsertions) {
  const auto e = nf::word_diff({"heel", "pain", "and", "chills"}, {"joint", "pain", "and", "chills", "today"});
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[0], (nf::WordEdit{{"heel"}, {"joint"}}));
  EXPECT_EQ(e[1], (nf::WordEdit{{}, {"today"}}));
}

TEST(ContentWords, FrequencyThenFirstSeen) {
  const auto w = nf::content_words("Knee pain and the knee swelling, with pain. Is 42 ok?");
  ASSERT_GE(w.size(), 3u);
  EXPECT_EQ(w[0], "knee");
  EXPECT_EQ(w[1], "pain");
  EXPECT_EQ(w[2], "swelling");
}

TEST(DefaultRewrite, IdenticalParentsGiveThatPrompt) {
  const auto c = conv("Patient reports heel pain and chills.", "Heel pain points to gout.");
  const auto out = nf::default_rewrite({c, c}, c.response, 3, 9);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& p : out) EXPECT_EQ(p, c.prompt);
}

TEST(DefaultRewrite, FollowsTheResponseDiff) {
  const auto top2 = conv("Patient reports neck pain and chills.", "Neck pain points to strain.");
  const auto top1 = conv("Patient reports heel pain and chills.", "Heel pain points to gout.");
  const auto out = nf::default_rewrite({top2, top1}, "Joint pain points to gout.", 3, 9);
  EXPECT_EQ(out[0], "Patient reports joint pain and chills.");
}

TEST(DefaultRewrite, ExactlyGNonEmptyCandidates) {
  auto& w = world();
  const auto& a = w.db.records[0].conversation;
  const auto& b = w.db.records[1].conversation;
  for (std::size_t g : {1u, 3u, 5u}) {
    const auto out = nf::default_rewrite({a, b}, w.db.records[2].conversation.response, g, 1);
    ASSERT_EQ(out.size(), g);
    for (const auto& p : out) EXPECT_FALSE(p.empty());
  }
}

TEST(DefaultRewrite, KeepsHalfOfTopOneTokens) {
  auto& w = world();
  const auto& recs = w.db.records;
  for (std::size_t t = 0; t + 2 < recs.size(); ++t) {
    const auto& top1 = recs[t + 1].conversation;
    const auto out = nf::default_rewrite({recs[t].conversation, top1},
                                         recs[t + 2].conversation.response, 3, t);
    for (const auto& p : out) EXPECT_GE(token_overlap(p, top1.prompt), 0.5) << p;
  }
}

TEST(DefaultRewrite, DeterministicPerSeed) {
  auto& w = world();
  const std::vector<corpus::Conversation> gradv{w.db.records[3].conversation,
                                                w.db.records[4].conversation};
  const auto& resp = w.db.records[5].conversation.response;
  EXPECT_EQ(nf::default_rewrite(gradv, resp, 3, 77), nf::default_rewrite(gradv, resp, 3, 77));
}

TEST(DefaultRewrite, NeedsTwoReferences) {
  EXPECT_THROW(nf::default_rewrite({conv("a b", "c")}, "c", 3, 1), netecho::Error);
}

TEST(Probe, TruePromptHasZeroDistance) {
  auto& w = world();
  const auto& v = w.victims[0];
  const auto probed = nf::probe({v.conversation.prompt}, w.app, "p-", v.topic, 1);
  ASSERT_EQ(probed.size(), 1u);
  EXPECT_EQ(probed[0].conversation.response, v.conversation.response);
  EXPECT_NEAR(nr::trace_distance(*w.tower, probed[0].side_trace, v.side_trace), 0.0, 1e-12);
  EXPECT_EQ(probed[0].id(), "p-0");
  EXPECT_EQ(probed[0].origin.iteration, 1);
}

TEST(Probe, EmptyAndReproducible) {
  auto& w = world();
  EXPECT_TRUE(nf::probe({}, w.app, "p-", 0, 1).empty());
  const std::vector<std::string> prompts{w.db.records[0].conversation.prompt, "hello there"};
  const auto a = nf::probe(prompts, w.app, "p-", 0, 1);
  const auto b = nf::probe(prompts, w.app, "p-", 0, 1);
  ASSERT_EQ(a.size(), 2u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].packet_trace, b[i].packet_trace);
    EXPECT_EQ(a[i].side_trace, b[i].side_trace);
  }
}

TEST(Accept, StrictAgainstWorstReference) {
  EXPECT_TRUE(nf::accept(0.3, {0.4, 0.5}));
  EXPECT_FALSE(nf::accept(0.5, {0.4, 0.5}));
  EXPECT_TRUE(nf::accept(0.45, {0.4, 0.5}));
  EXPECT_THROW(nf::accept(0.1, {}), netecho::Error);
}

TEST(Accept, MatchesBruteForceDistances) {
  auto& w = world();
  const auto& victim = w.victims[1].side_trace;
  std::vector<const nr::QueryRecord*> refs{&w.db.records[0], &w.db.records[5], &w.db.records[9]};
  double worst = 0.0;
  for (const auto* r : refs) worst = std::max(worst, nr::trace_distance(*w.tower, r->side_trace, victim));
  for (const auto& cand : w.db.records) {
    const bool expected = nr::trace_distance(*w.tower, cand.side_trace, victim) < worst;
    EXPECT_EQ(nf::accept(*w.tower, cand.side_trace, victim, refs), expected);
  }
}

TEST(TopicOracles, CachedAndLeaveOneOut) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto& a = oracles.for_topics({1, 0});
  const auto& b = oracles.for_topics({0, 1});
  EXPECT_EQ(&a, &b);
  const auto& full = oracles.for_topics({0});
  const auto loo = oracles.leave_one_out(0, 0);
  EXPECT_LT(loo.num_tokens(), dynamic_cast<const netecho::seeker::NGramOracle&>(full).num_tokens());
}

TEST(RunAttack, ZeroRoundsIsIterationZero) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto ctx = context(w);
  const auto& v = w.victims[0];
  const auto r = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, oracles, ctx, small_config(0));
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.prompt, r.history[0].prompt);
  EXPECT_EQ(r.response, r.history[0].response);
  EXPECT_EQ(r.probe_calls, 0u);
  EXPECT_TRUE(r.accepted.empty());
}

TEST(RunAttack, VictimInDbIsRecoveredExactly) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto ctx = context(w);
  const auto& v = w.db.records[7];
  const auto r = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, oracles, ctx, small_config(3));
  EXPECT_DOUBLE_EQ(netecho::metrics::ned(r.response, v.conversation.response), 1.0);
}

TEST(RunAttack, BestDistanceNeverIncreases) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto ctx = context(w);
  const auto cfg = small_config(3);
  for (const auto& v : w.victims) {
    const auto r = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, oracles, ctx, cfg);
    ASSERT_GE(r.history.size(), 1u);
    EXPECT_LE(r.history.size(), cfg.k + 1);
    EXPECT_LE(r.probe_calls, cfg.k * cfg.g);
    for (std::size_t i = 1; i < r.history.size(); ++i) {
      EXPECT_LE(r.history[i].best_distance, r.history[i - 1].best_distance);
      // Prompts already in the DB are not probed again.
      EXPECT_GE(r.history[i].candidate_prompts.size(), 1u);
      EXPECT_LE(r.history[i].candidate_prompts.size(), cfg.g);
    }
    for (const auto& rec : r.accepted) EXPECT_GE(rec.origin.iteration, 1);
  }
}

TEST(RunAttack, DeterministicAndLeavesDbUntouched) {
  auto& w = world();
  const auto before = w.db.size();
  const auto ctx = context(w);
  const auto& v = w.victims[2];
  nf::TopicOracles o1(w.db, w.vocab), o2(w.db, w.vocab);
  const auto a = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, o1, ctx, small_config(3));
  const auto b = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, o2, ctx, small_config(3));
  EXPECT_EQ(a.prompt, b.prompt);
  EXPECT_EQ(a.response, b.response);
  EXPECT_EQ(w.db.size(), before);
}

TEST(RunAttack, TranscriptHasOneLinePerIteration) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto ctx = context(w);
  const auto& v = w.victims[3];
  const auto r = nf::run_attack(v.side_trace, v.id(), w.db, *w.index, oracles, ctx, small_config(2));
  const auto text = nf::transcript_jsonl(v.id(), r);
  std::size_t lines = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    const auto j = nlohmann::json::parse(text.substr(start, end - start));
    EXPECT_EQ(j.at("iteration").get<std::size_t>(), lines);
    EXPECT_EQ(j.at("victim").get<std::string>(), v.id());
    ++lines;
    start = end + 1;
  }
  EXPECT_EQ(lines, r.history.size());
}

TEST(RunAttack, RejectsIncompleteContext) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  nf::AttackContext ctx;
  EXPECT_THROW(nf::run_attack(w.victims[0].side_trace, "v", w.db, *w.index, oracles, ctx, small_config(1)),
               netecho::Error);
}

TEST(ConfidencePopulation, OneValuePerSample) {
  auto& w = world();
  nf::TopicOracles oracles(w.db, w.vocab);
  const auto ctx = context(w);
  const auto pop = nf::confidence_population(w.db, *w.index, oracles, ctx, small_config(3), 12);
  ASSERT_EQ(pop.size(), 12u);
  for (double c : pop) EXPECT_LE(c, 0.0);
}
