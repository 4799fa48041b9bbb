#include "netecho/retrieval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "netecho/common.hpp"

namespace nr = netecho::retrieval;
namespace nc = netecho::classify;
namespace nt = netecho::traceex;
namespace ns = netecho::sim;
namespace corpus = netecho::corpus;
using netecho::Rng;

namespace {

struct Fixture {
  nr::QueryDB db;
  nc::ClassifierModel base;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    const auto c = corpus::synth_corpus(3, 12, 5);
    std::vector<std::string> texts;
    for (const auto& x : c.conversations) texts.push_back(x.prompt + " " + x.response);
    const auto vocab = corpus::build_vocab(texts, 400, 1);
    const auto cfg = ns::preset_scenario('A');
    const auto ex = nt::extraction_for(cfg);
    out.db.topic_names = c.topic_names;
    for (const auto& x : c.conversations) {
      nr::QueryRecord r;
      r.conversation = x;
      r.topic = x.topic;
      r.packet_trace = ns::emit_packets(cfg, corpus::tokenize(vocab, x.response),
                                        netecho::fnv1a(x.id));
      r.side_trace = nt::extract_trace(ex, r.packet_trace);
      out.db.records.push_back(std::move(r));
    }
    out.base = nc::ClassifierModel(nt::FeatureMode::kAB, 3, 64, 11);
    std::vector<const nt::SideTrace*> traces;
    for (const auto& r : out.db.records) traces.push_back(&r.side_trace);
    out.base.fit_input_code(traces);
    return out;
  }();
  return f;
}

nr::DualTower tower() { return nr::DualTower(fixture().base, 3); }

nt::SideTrace small_trace(Rng& rng, std::size_t len) {
  nt::SideTrace st;
  for (std::size_t i = 0; i < len; ++i) {
    nt::TraceGroup g;
    g.count = 1;
    const auto l = rng.uniform_int(1, 12);
    g.char_lens = std::vector<std::int64_t>{l};
    g.char_sum = l;
    st.groups.push_back(g);
  }
  return st;
}

}  // namespace

TEST(InfoNce, SingleCandidateIsZero) {
  nr::Mat s(1, 1);
  s << 0.3;
  EXPECT_NEAR(nr::infonce_loss(s, 0.07), 0.0, 1e-12);
}

TEST(InfoNce, IdentityAtUnitTemperature) {
  const nr::Mat s = nr::Mat::Identity(2, 2);
  EXPECT_NEAR(nr::infonce_loss(s, 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
  EXPECT_NEAR(nr::infonce_loss(s, 1.0), 0.3133, 1e-4);
}

TEST(InfoNce, LargerDiagonalLowersLoss) {
  nr::Mat a(2, 2), b(2, 2);
  a << 0.5, 0.1, 0.1, 0.5;
  b << 0.9, 0.1, 0.1, 0.9;
  EXPECT_LT(nr::infonce_loss(b, 0.5), nr::infonce_loss(a, 0.5));
}

TEST(InfoNce, GradientMatchesFiniteDifference) {
  nr::Mat s(3, 3);
  s << 0.2, -0.1, 0.4, 0.3, 0.7, -0.5, 0.0, 0.1, 0.6;
  nr::Mat d;
  nr::infonce_loss(s, 0.5, &d);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    nr::Mat up = s, down = s;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    const double fd = (nr::infonce_loss(up, 0.5) - nr::infonce_loss(down, 0.5)) / 2e-6;
    EXPECT_NEAR(d.data()[i], fd, 1e-6);
  }
}

TEST(InfoNce, RejectsNonPositiveTemperature) {
  const nr::Mat s = nr::Mat::Identity(2, 2);
  EXPECT_THROW(nr::infonce_loss(s, 0.0), netecho::Error);
}

TEST(TextTower, UnitNormAndEmptyText) {
  const auto m = tower();
  EXPECT_NEAR(m.embed_text("chest pain and fever").norm(), 1.0, 1e-12);
  EXPECT_NEAR(m.embed_text("").norm(), 1.0, 1e-12);
}

TEST(TextTower, WordOrderDoesNotMatter) {
  const auto m = tower();
  const auto a = m.embed_text("fever with chest pain");
  const auto b = m.embed_text("pain chest with fever");
  EXPECT_NEAR((a - b).norm(), 0.0, 1e-12);
}

TEST(TextTower, DisjointTextsAreLessSimilarThanSelf) {
  const auto m = tower();
  const auto a = m.embed_text("persistent cough and wheezing");
  const auto b = m.embed_text("itchy rash on dry skin");
  EXPECT_LT(nr::cosine(a, b), nr::cosine(a, a));
  EXPECT_NEAR(nr::cosine(a, a), 1.0, 1e-12);
}

TEST(TraceTower, UnitNormAndDeterministic) {
  const auto m = tower();
  const auto& st = fixture().db.records[0].side_trace;
  const auto a = m.embed_trace(st);
  EXPECT_NEAR(a.norm(), 1.0, 1e-12);
  EXPECT_EQ(a, m.embed_trace(st));
  EXPECT_NEAR(nr::cosine(a, a), 1.0, 1e-12);
}

TEST(TraceTower, BatchMatchesSingle) {
  const auto m = tower();
  const auto& db = fixture().db;
  const auto batch = m.embed_traces({&db.records[0].side_trace, &db.records[1].side_trace});
  EXPECT_NEAR((batch[1] - m.embed_trace(db.records[1].side_trace)).norm(), 0.0, 1e-12);
}

TEST(DualTower, GradientCheckOnTenBatches) {
  const auto m = tower();
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = static_cast<std::size_t>(rng.uniform_int(2, 4));
    std::vector<nt::SideTrace> traces;
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < b; ++i) {
      traces.push_back(small_trace(rng, static_cast<std::size_t>(rng.uniform_int(2, 5))));
      const auto& rec = fixture().db.records[rng.index(fixture().db.size())];
      texts.push_back(rec.conversation.prompt);
    }
    std::vector<const nt::SideTrace*> tp;
    std::vector<std::string_view> tv;
    for (std::size_t i = 0; i < b; ++i) {
      tp.push_back(&traces[i]);
      tv.push_back(texts[i]);
    }
    EXPECT_LT(nr::dual_grad_check(m, tp, tv), 1e-4) << "trial " << trial;
  }
}

TEST(DualTower, TrainingLowersLossAndIsDeterministic) {
  nr::DualTrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 12;
  nr::DualTrainReport r1, r2;
  const auto a = nr::train_dual_tower(fixture().db, fixture().base, cfg, &r1);
  const auto b = nr::train_dual_tower(fixture().db, fixture().base, cfg, &r2);
  ASSERT_EQ(r1.epoch_loss.size(), 6u);
  EXPECT_LT(r1.epoch_loss.back(), r1.epoch_loss.front());
  EXPECT_EQ(r1.epoch_loss, r2.epoch_loss);
  EXPECT_EQ(a.table, b.table);
}

TEST(DualTower, TrainingNeedsTwoRecords) {
  nr::QueryDB one;
  one.records.push_back(fixture().db.records[0]);
  EXPECT_THROW(nr::train_dual_tower(one, fixture().base, {}), netecho::Error);
}

TEST(DualTower, SaveLoadRoundTrip) {
  const auto m = tower();
  const auto path = std::filesystem::temp_directory_path() / "netecho_dual_test.bin";
  nr::save_dual_tower(m, path);
  const auto back = nr::load_dual_tower(path);
  const auto& st = fixture().db.records[2].side_trace;
  EXPECT_NEAR((m.embed_trace(st) - back.embed_trace(st)).norm(), 0.0, 1e-12);
  EXPECT_NEAR((m.embed_text("fever") - back.embed_text("fever")).norm(), 0.0, 1e-12);
  std::filesystem::remove(path);
}

TEST(Retrieve, MatchesBruteForceCosineSort) {
  const auto m = tower();
  const auto& db = fixture().db;
  const nr::DbIndex index(m, db);
  for (std::size_t q = 0; q < db.size(); q += 5) {
    const auto& st = db.records[q].side_trace;
    const auto hits = nr::retrieve(index, db, st, db.size());
    std::vector<std::pair<double, std::string>> brute;
    const auto qv = m.embed_trace(st);
    for (const auto& r : db.records) brute.emplace_back(-nr::cosine(qv, m.embed_trace(r.side_trace)), r.id());
    std::sort(brute.begin(), brute.end());
    ASSERT_EQ(hits.size(), brute.size());
    for (std::size_t i = 0; i < hits.size(); ++i) {
      EXPECT_EQ(db.records[hits[i].index].id(), brute[i].second);
    }
    EXPECT_EQ(hits.front().index, q);
  }
}

TEST(Retrieve, TopicFilterAndErrors) {
  const auto m = tower();
  const auto& db = fixture().db;
  const auto hits = nr::retrieve(m, db, db.records[0].side_trace, 5, std::vector<int>{1});
  ASSERT_EQ(hits.size(), 5u);
  for (const auto& h : hits) EXPECT_EQ(db.records[h.index].topic, 1);
  EXPECT_THROW(nr::retrieve(m, nr::QueryDB{}, db.records[0].side_trace, 1), netecho::Error);
  EXPECT_THROW(nr::retrieve(m, db, db.records[0].side_trace, db.size() + 1), netecho::Error);
}

TEST(Retrieve, IndexTracksAddedRecords) {
  const auto m = tower();
  auto db = fixture().db;
  nr::DbIndex index(m, db);
  auto rec = db.records[4];
  rec.conversation.id = "zz-new";
  rec.origin.iteration = 1;
  db.records.push_back(rec);
  EXPECT_THROW(nr::retrieve(index, db, rec.side_trace, 1), netecho::Error);
  index.add(rec);
  const auto hits = nr::retrieve(index, db, rec.side_trace, 2);
  // The copy and the original tie; the lower id wins.
  EXPECT_EQ(db.records[hits[0].index].id(), db.records[4].id());
  EXPECT_EQ(db.records[hits[1].index].id(), "zz-new");
}

TEST(RankGradient, ConsistentWithRetrieveAndOrderFree) {
  const auto m = tower();
  const auto& db = fixture().db;
  std::vector<const nr::QueryRecord*> cands;
  for (const auto& r : db.records) cands.push_back(&r);
  const auto& st = db.records[7].side_trace;
  const auto grad = nr::rank_gradient(m, st, cands);
  EXPECT_EQ(grad.back(), &db.records[7]);
  const auto qv = m.embed_trace(st);
  for (std::size_t i = 1; i < grad.size(); ++i) {
    EXPECT_LE(nr::cosine(qv, m.embed_trace(grad[i - 1]->side_trace)),
              nr::cosine(qv, m.embed_trace(grad[i]->side_trace)));
  }
  auto reversed = cands;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(nr::rank_gradient(m, st, reversed), grad);

  const auto hits = nr::retrieve(m, db, st, 4);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    EXPECT_EQ(&db.records[hits[i].index], grad[grad.size() - 1 - i]);
  }
}

TEST(Ood, ScoreAndBoundary) {
  const auto m = tower();
  std::vector<std::string> train;
  for (const auto& r : fixture().db.records) train.push_back(r.conversation.response);
  EXPECT_NEAR(nr::ood_score(train[3], train, m), 0.0, 1e-12);
  const std::string victim = "completely unrelated words about trains and weather";
  double best = -1.0;
  for (const auto& t : train) best = std::max(best, nr::cosine(m.embed_text(victim), m.embed_text(t)));
  EXPECT_NEAR(nr::ood_score(victim, train, m), std::clamp(1.0 - best, 0.0, 1.0), 1e-12);
  EXPECT_DOUBLE_EQ(nr::kOodBoundary, 0.38);
  EXPECT_TRUE(nr::is_ood(0.39));
  EXPECT_FALSE(nr::is_ood(0.38));
  EXPECT_THROW(nr::ood_score(victim, {}, m), netecho::Error);
}

TEST(QueryDb, JsonlRoundTrip) {
  auto db = fixture().db;
  db.version = 2;
  db.records[1].origin.iteration = 2;
  const auto path = std::filesystem::temp_directory_path() / "netecho_qdb_test.jsonl";
  nr::write_query_db(db, path);
  const auto back = nr::read_query_db(path);
  EXPECT_EQ(back.version, 2);
  EXPECT_EQ(back.topic_names, db.topic_names);
  ASSERT_EQ(back.size(), db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    EXPECT_EQ(back.records[i].conversation, db.records[i].conversation);
    EXPECT_EQ(back.records[i].packet_trace, db.records[i].packet_trace);
    EXPECT_EQ(back.records[i].side_trace, db.records[i].side_trace);
    EXPECT_EQ(back.records[i].origin, db.records[i].origin);
  }
  std::filesystem::remove(path);
}

TEST(QueryDb, RejectsMissingHeader) {
  const auto path = std::filesystem::temp_directory_path() / "netecho_qdb_bad.jsonl";
  {
    std::ofstream out(path);
    out << "{\"id\":\"x\"}\n";
  }
  EXPECT_THROW(nr::read_query_db(path), netecho::Error);
  std::filesystem::remove(path);
}
