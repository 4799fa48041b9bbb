#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "netecho/classify.hpp"
#include "netecho/common.hpp"
#include "netecho/corpus.hpp"
#include "netecho/metrics.hpp"
#include "netecho/retrieval.hpp"
#include "netecho/seeker.hpp"
#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace {

using namespace netecho;

// Shared fixture: a 300-conversation corpus observed under scenario A with
// an untrained classifier and dual tower (throughput does not depend on
// the weights).
struct Bench {
  corpus::TopicCorpus corpus;
  corpus::Vocab vocab;
  sim::ScenarioConfig scenario = sim::preset_scenario('A');
  traceex::ExtractionConfig extraction = traceex::extraction_for(sim::preset_scenario('A'));
  retrieval::QueryDB db;
  classify::ClassifierModel classifier;
  retrieval::DualTower tower;
  std::unique_ptr<retrieval::DbIndex> index;
  std::unique_ptr<seeker::NGramOracle> oracle;

  Bench() {
    corpus = corpus::synth_corpus(3, 100, 7);
    std::vector<std::string> texts;
    for (const auto& c : corpus.conversations) texts.push_back(c.prompt + " " + c.response);
    vocab = corpus::build_vocab(texts, 2000, 1);
    db.topic_names = corpus.topic_names;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      const auto& c = corpus.conversations[i];
      retrieval::QueryRecord r;
      r.conversation = c;
      r.topic = c.topic;
      r.packet_trace = sim::emit_packets(scenario, corpus::tokenize(vocab, c.response), i + 1);
      r.side_trace = traceex::extract_trace(extraction, r.packet_trace);
      db.records.push_back(std::move(r));
    }
    classifier = classify::ClassifierModel(traceex::FeatureMode::kAB, 3, 256, 3);
    tower = retrieval::DualTower(classifier, 5);
    index = std::make_unique<retrieval::DbIndex>(tower, db);
    std::vector<std::string> responses;
    for (const auto& c : corpus.conversations) responses.push_back(c.response);
    oracle = std::make_unique<seeker::NGramOracle>(seeker::train_ngram(responses, vocab, 3));
  }
};

const Bench& bench() {
  static const Bench b;
  return b;
}

void BM_EmitAndExtract(benchmark::State& state) {
  const auto& b = bench();
  const auto tokens = corpus::tokenize(b.vocab, b.corpus.conversations[0].response);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    const auto pt = sim::emit_packets(b.scenario, tokens, ++seed);
    benchmark::DoNotOptimize(traceex::extract_trace(b.extraction, pt));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens.size()));
}
BENCHMARK(BM_EmitAndExtract);

void BM_ClassifierForward(benchmark::State& state) {
  const auto& b = bench();
  const auto& st = b.db.records[0].side_trace;
  for (auto _ : state) benchmark::DoNotOptimize(b.classifier.predict_proba(st));
}
BENCHMARK(BM_ClassifierForward);

void BM_Retrieve(benchmark::State& state) {
  const auto& b = bench();
  const auto& st = b.db.records[5].side_trace;
  for (auto _ : state) benchmark::DoNotOptimize(retrieval::retrieve(*b.index, b.db, st, 3));
}
BENCHMARK(BM_Retrieve);

void BM_Generate(benchmark::State& state) {
  const auto& b = bench();
  const auto& victim = b.db.records[10];
  const auto spec = seeker::constraint_from_trace(victim.side_trace, b.vocab.max_token_len());
  std::vector<corpus::TokenSeq> refs;
  for (std::size_t i = 11; i < 14; ++i) {
    refs.push_back(corpus::tokenize(b.vocab, b.db.records[i].conversation.response));
  }
  seeker::BeamConfig beam;
  beam.width = static_cast<std::size_t>(state.range(0));
  beam.groups = std::min<std::size_t>(5, beam.width);
  for (auto _ : state) benchmark::DoNotOptimize(seeker::generate(*b.oracle, b.vocab, spec, refs, beam));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(spec.num_tokens()));
}
BENCHMARK(BM_Generate)->Arg(5)->Arg(30)->Unit(benchmark::kMillisecond);

void BM_Ned(benchmark::State& state) {
  const auto& b = bench();
  const auto& x = b.corpus.conversations[0].response;
  const auto& y = b.corpus.conversations[1].response;
  for (auto _ : state) benchmark::DoNotOptimize(metrics::ned(x, y));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(x.size() + y.size()));
}
BENCHMARK(BM_Ned);

}  // namespace

BENCHMARK_MAIN();
