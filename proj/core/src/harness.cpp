#include "netecho/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "netecho/common.hpp"
#include "netecho/metrics.hpp"

namespace netecho::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

ExperimentConfig::ExperimentConfig() {
  classifier.lr = 0.1;
  classifier.epochs = 20;
}

void ExperimentConfig::validate() const {
  if (corpus.topics < 2) throw Error("config: corpus.topics must be at least 2");
  if (corpus.per_topic < 1) throw Error("config: corpus.per_topic must be positive");
  if (corpus.vocab_size < 1) throw Error("config: corpus.vocab_size must be positive");
  scenario_config().validate();
  defense.validate();
  extraction_config().validate();
  if (classifier.augment.dummy_insert_rate > 0.05 || classifier.augment.swap_rate > 0.02) {
    throw Error("config: augmentation rates exceed 5% dummies / 2% swaps");
  }
  if (classifier.epochs < 1 || classifier.lr <= 0.0) throw Error("config: bad classifier schedule");
  retrieval.validate();
  attack.validate();
  if (ngram_order < 1) throw Error("config: ngram_order must be positive");
  for (double r : sweep.dummy_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("config: sweep dummy rates must lie in [0, 1]");
  }
  for (double r : sweep.loss_noise_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("config: sweep loss/noise rates must lie in [0, 1]");
  }
  if (sweep.pad_multiple < 0) throw Error("config: sweep.pad_multiple must be >= 0");
  if (output_dir.empty()) throw Error("config: output_dir is empty");
}

std::uint64_t ExperimentConfig::seed_for(std::string_view stage) const {
  return derive_seed(seed, stage);
}

sim::ScenarioConfig ExperimentConfig::scenario_config() const {
  return sim::preset_scenario(scenario);
}

traceex::ExtractionConfig ExperimentConfig::extraction_config() const {
  auto ex = traceex::extraction_for(scenario_config());
  const auto& o = extraction;
  if (o.per_token_overhead) ex.per_token_overhead = *o.per_token_overhead;
  if (o.per_group_overhead) ex.per_group_overhead = *o.per_group_overhead;
  if (o.burst_gap) ex.burst_gap = *o.burst_gap;
  if (o.mode) ex.mode = *o.mode;
  if (o.length_multiple_base) ex.length_multiple_base = *o.length_multiple_base;
  if (o.fixed_k) ex.fixed_k = *o.fixed_k;
  return ex;
}

namespace {

// Reads keys of one JSON object into typed fields; finish() rejects any
// key that no get() asked for.
class Reader {
 public:
  Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw Error("config: " + where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error("config: bad value for " + where_ + key);
    }
  }

  template <typename T>
  void get_opt(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    if (obj_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  bool has(const char* key) {
    seen_.insert(key);
    return obj_.contains(key);
  }
  const json& at(const char* key) const { return obj_.at(key); }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (seen_.count(k) == 0) throw Error("config: unknown key " + where_ + k);
    }
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

std::string imbalance_name(corpus::Imbalance p) {
  return p == corpus::Imbalance::kZipf ? "zipf" : "uniform";
}

template <typename T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  Reader r(root, "");
  r.get("seed", cfg.seed);
  std::string out_dir = cfg.output_dir.string();
  r.get("output_dir", out_dir);
  cfg.output_dir = out_dir;
  r.get("scenario", cfg.scenario);
  if (r.has("corpus")) {
    Reader c(r.at("corpus"), "corpus.");
    c.get("topics", cfg.corpus.topics);
    c.get("per_topic", cfg.corpus.per_topic);
    std::string imb = imbalance_name(cfg.corpus.imbalance);
    c.get("imbalance", imb);
    cfg.corpus.imbalance = corpus::parse_imbalance(imb);
    std::optional<std::string> path;
    c.get_opt("path", path);
    if (path) cfg.corpus.path = *path;
    c.get("vocab_size", cfg.corpus.vocab_size);
    c.finish();
  }
  if (cfg.scenario.size() != 1) throw Error("config: scenario must be one preset letter");
  cfg.defense = sim::preset_defense(cfg.scenario[0]);
  if (r.has("defense")) {
    Reader d(r.at("defense"), "defense.");
    d.get_opt("pad_to_multiple", cfg.defense.pad_to_multiple);
    d.get_opt("pad_random_max", cfg.defense.pad_random_max);
    d.get_opt("batch_k", cfg.defense.batch_k);
    d.get("dummy_rate", cfg.defense.dummy_rate);
    d.get("drop_rate", cfg.defense.drop_rate);
    d.get("swap_rate", cfg.defense.swap_rate);
    d.finish();
  }
  if (r.has("extraction")) {
    Reader e(r.at("extraction"), "extraction.");
    auto& o = cfg.extraction;
    e.get_opt("per_token_overhead", o.per_token_overhead);
    e.get_opt("per_group_overhead", o.per_group_overhead);
    e.get_opt("burst_gap", o.burst_gap);
    std::optional<std::string> mode;
    e.get_opt("tokens_per_packet_mode", mode);
    if (mode) o.mode = traceex::parse_count_mode(*mode);
    e.get_opt("length_multiple_base", o.length_multiple_base);
    e.get_opt("fixed_k", o.fixed_k);
    e.finish();
  }
  if (r.has("classifier")) {
    Reader c(r.at("classifier"), "classifier.");
    std::string mode(traceex::feature_mode_name(cfg.mode));
    c.get("mode", mode);
    cfg.mode = traceex::parse_feature_mode(mode);
    c.get("lr", cfg.classifier.lr);
    c.get("momentum", cfg.classifier.momentum);
    c.get("clip_norm", cfg.classifier.clip_norm);
    c.get("epochs", cfg.classifier.epochs);
    c.get("batch_size", cfg.classifier.batch_size);
    c.get("augment", cfg.classifier.use_augment);
    c.get("max_len", cfg.classifier.max_len);
    c.get("compare_modes", cfg.compare_modes);
    c.finish();
  }
  if (r.has("retrieval")) {
    Reader c(r.at("retrieval"), "retrieval.");
    c.get("lr", cfg.retrieval.lr);
    c.get("clip_norm", cfg.retrieval.clip_norm);
    c.get("epochs", cfg.retrieval.epochs);
    c.get("batch_size", cfg.retrieval.batch_size);
    c.get("temperature", cfg.retrieval.temperature);
    c.finish();
  }
  if (r.has("seeker")) {
    Reader c(r.at("seeker"), "seeker.");
    auto& b = cfg.attack.beam;
    c.get("beam_width", b.width);
    c.get("beam_groups", b.groups);
    c.get("diversity_penalty", b.diversity_penalty);
    c.get("allow_relaxation", b.allow_relaxation);
    c.get("relaxation_penalty", b.relaxation_penalty);
    c.get("reference_weight", b.reference_weight);
    c.get("ngram_order", cfg.ngram_order);
    c.finish();
  }
  if (r.has("refine")) {
    Reader c(r.at("refine"), "refine.");
    c.get("k", cfg.attack.k);
    c.get("g", cfg.attack.g);
    c.get("detect_misclass", cfg.attack.detect_misclass);
    c.get("confidence_samples", cfg.confidence_samples);
    c.get("victims", cfg.victims);
    c.finish();
  }
  if (r.has("sweep")) {
    Reader c(r.at("sweep"), "sweep.");
    c.get("dummy_rates", cfg.sweep.dummy_rates);
    c.get("loss_noise_rates", cfg.sweep.loss_noise_rates);
    c.get("pad_multiple", cfg.sweep.pad_multiple);
    c.finish();
  }
  r.finish();
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  const auto ex = cfg.extraction;
  json j{
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir.string()},
      {"scenario", cfg.scenario},
      {"corpus",
       {{"topics", cfg.corpus.topics},
        {"per_topic", cfg.corpus.per_topic},
        {"imbalance", imbalance_name(cfg.corpus.imbalance)},
        {"path", cfg.corpus.path ? json(cfg.corpus.path->string()) : json(nullptr)},
        {"vocab_size", cfg.corpus.vocab_size}}},
      {"defense",
       {{"pad_to_multiple", opt_json(cfg.defense.pad_to_multiple)},
        {"pad_random_max", opt_json(cfg.defense.pad_random_max)},
        {"batch_k", opt_json(cfg.defense.batch_k)},
        {"dummy_rate", cfg.defense.dummy_rate},
        {"drop_rate", cfg.defense.drop_rate},
        {"swap_rate", cfg.defense.swap_rate}}},
      {"extraction",
       {{"per_token_overhead", opt_json(ex.per_token_overhead)},
        {"per_group_overhead", opt_json(ex.per_group_overhead)},
        {"burst_gap", opt_json(ex.burst_gap)},
        {"tokens_per_packet_mode",
         ex.mode ? json(std::string(traceex::count_mode_name(*ex.mode))) : json(nullptr)},
        {"length_multiple_base", opt_json(ex.length_multiple_base)},
        {"fixed_k", opt_json(ex.fixed_k)}}},
      {"classifier",
       {{"mode", std::string(traceex::feature_mode_name(cfg.mode))},
        {"lr", cfg.classifier.lr},
        {"momentum", cfg.classifier.momentum},
        {"clip_norm", cfg.classifier.clip_norm},
        {"epochs", cfg.classifier.epochs},
        {"batch_size", cfg.classifier.batch_size},
        {"augment", cfg.classifier.use_augment},
        {"max_len", cfg.classifier.max_len},
        {"compare_modes", cfg.compare_modes}}},
      {"retrieval",
       {{"lr", cfg.retrieval.lr},
        {"clip_norm", cfg.retrieval.clip_norm},
        {"epochs", cfg.retrieval.epochs},
        {"batch_size", cfg.retrieval.batch_size},
        {"temperature", cfg.retrieval.temperature}}},
      {"seeker",
       {{"beam_width", cfg.attack.beam.width},
        {"beam_groups", cfg.attack.beam.groups},
        {"diversity_penalty", cfg.attack.beam.diversity_penalty},
        {"allow_relaxation", cfg.attack.beam.allow_relaxation},
        {"relaxation_penalty", cfg.attack.beam.relaxation_penalty},
        {"reference_weight", cfg.attack.beam.reference_weight},
        {"ngram_order", cfg.ngram_order}}},
      {"refine",
       {{"k", cfg.attack.k},
        {"g", cfg.attack.g},
        {"detect_misclass", cfg.attack.detect_misclass},
        {"confidence_samples", cfg.confidence_samples},
        {"victims", cfg.victims}}},
      {"sweep",
       {{"dummy_rates", cfg.sweep.dummy_rates},
        {"loss_noise_rates", cfg.sweep.loss_noise_rates},
        {"pad_multiple", cfg.sweep.pad_multiple}}}};
  return j.dump(2) + "\n";
}

void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* out = std::getenv("NETECHO_OUT"); out != nullptr && *out != '\0') {
    cfg.output_dir = out;
  }
}

// ---------------------------------------------------------------- benchmark

LookupResponder::LookupResponder(const corpus::TopicCorpus& corpus) {
  for (const auto& c : corpus.conversations) {
    prompts_.push_back(c.prompt);
    responses_.push_back(c.response);
  }
  if (prompts_.empty()) throw Error("lookup responder needs a non-empty corpus");
}

std::string LookupResponder::respond(std::string_view prompt) const {
  std::size_t best = 0;
  double best_sim = -1.0;
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    if (prompts_[i] == prompt) return responses_[i];
    const double s = metrics::tf_cosine(prompts_[i], prompt);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return responses_[best];
}

Benchmark make_benchmark(const ExperimentConfig& cfg, corpus::TopicCorpus corpus) {
  Benchmark b;
  b.corpus = std::move(corpus);
  std::vector<std::string> texts;
  texts.reserve(b.corpus.size());
  for (const auto& c : b.corpus.conversations) texts.push_back(c.prompt + " " + c.response);
  const auto corpus_seed = cfg.seed_for("corpus");
  b.vocab = std::make_shared<const corpus::Vocab>(
      corpus::build_vocab(texts, cfg.corpus.vocab_size, derive_seed(corpus_seed, "vocab")));
  b.app.vocab = b.vocab.get();
  if (cfg.corpus.path) {
    auto lookup = std::make_shared<const LookupResponder>(b.corpus);
    b.lookup = lookup;
    b.app.responder = [lookup](std::string_view p) { return lookup->respond(p); };
  } else {
    auto synth = std::make_shared<const corpus::SyntheticResponder>(
        b.corpus.topic_names.size(), derive_seed(corpus_seed, "responder"));
    b.synthetic = synth;
    b.app.responder = [synth](std::string_view p) { return synth->respond(p); };
  }
  b.app.scenario = cfg.scenario_config();
  b.app.defense = cfg.defense;
  b.app.extraction = cfg.extraction_config();
  b.app.seed = cfg.seed_for("sim");
  return b;
}

Benchmark make_benchmark(const ExperimentConfig& cfg) {
  corpus::TopicCorpus c =
      cfg.corpus.path ? corpus::ingest_corpus(*cfg.corpus.path)
                      : corpus::synth_corpus(cfg.corpus.topics, cfg.corpus.per_topic,
                                             cfg.seed_for("corpus"), cfg.corpus.imbalance);
  return make_benchmark(cfg, std::move(c));
}

// ---------------------------------------------------------------- helpers

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

fs::path require(const fs::path& dir, const char* name, const char* produced_by) {
  const auto p = dir / name;
  if (!fs::exists(p)) {
    throw Error("missing " + p.string() + " (run '" + produced_by + "' first)");
  }
  return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct SplitIds {
  std::vector<std::string> train, val, test;
};

SplitIds read_split(const fs::path& dir) {
  const auto j = read_json(require(dir, files::kSplit, "train"));
  SplitIds s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

std::vector<classify::LabeledTrace> labeled(const retrieval::QueryDB& db,
                                            const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const retrieval::QueryRecord*> by_id;
  for (const auto& r : db.records) by_id[r.id()] = &r;
  std::vector<classify::LabeledTrace> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("record " + id + " is not in the query db");
    out.push_back({id, it->second->side_trace, it->second->topic});
  }
  return out;
}

// The attacker's DB: every probe record outside the test split.
retrieval::QueryDB attacker_db(const retrieval::QueryDB& all, const SplitIds& split) {
  const std::unordered_set<std::string> test(split.test.begin(), split.test.end());
  retrieval::QueryDB db;
  db.topic_names = all.topic_names;
  db.version = all.version;
  for (const auto& r : all.records) {
    if (test.count(r.id()) == 0) db.records.push_back(r);
  }
  return db;
}

json accuracy_json(const classify::Accuracy& a) { return {{"top1", a.top1}, {"top3", a.top3}}; }

}  // namespace

// ---------------------------------------------------------------- probe

ProbeSummary cmd_probe(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto b = make_benchmark(cfg);
  fs::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / files::kConfig, config_to_json(cfg));
  corpus::export_corpus(b.corpus, cfg.output_dir / files::kCorpus);
  retrieval::QueryDB db;
  db.topic_names = b.corpus.topic_names;
  db.records.reserve(b.corpus.size());
  for (const auto& c : b.corpus.conversations) db.records.push_back(refine::observe(b.app, c));
  ProbeSummary s;
  s.records = db.size();
  s.db_path = cfg.output_dir / files::kQueryDb;
  retrieval::write_query_db(db, s.db_path);
  return s;
}

std::size_t cmd_extract(const ExperimentConfig& cfg, const fs::path& packet_log, const fs::path& out) {
  const auto pt = sim::read_packet_log(packet_log);
  const auto st = traceex::extract_trace(cfg.extraction_config(), pt);
  traceex::write_side_traces({st}, out);
  return 1;
}

// ---------------------------------------------------------------- train

TrainSummary cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& dir = cfg.output_dir;
  const auto db = retrieval::read_query_db(require(dir, files::kQueryDb, "probe"));
  const std::size_t topics = db.topic_names.size();
  std::vector<classify::LabeledTrace> all;
  for (const auto& r : db.records) all.push_back({r.id(), r.side_trace, r.topic});
  const auto train_seed = cfg.seed_for("train");
  const auto split = classify::split_dataset(all, derive_seed(train_seed, "split"));

  TrainSummary s;
  s.train = split.train.size();
  s.val_size = split.val.size();
  s.test_size = split.test.size();
  auto tc = cfg.classifier;
  tc.seed = derive_seed(train_seed, "classifier");
  auto t0 = std::chrono::steady_clock::now();
  classify::TrainReport report;
  const auto model = classify::train_classifier(split.train, split.val, tc, cfg.mode, topics, &report);
  s.classifier_seconds = seconds_since(t0);
  s.test = classify::evaluate(model, split.test);
  s.val = classify::evaluate(model, split.val);
  classify::save_classifier(model, dir / files::kClassifier);
  if (cfg.compare_modes && cfg.mode != traceex::FeatureMode::kA) {
    const auto model_a =
        classify::train_classifier(split.train, split.val, tc, traceex::FeatureMode::kA, topics);
    s.test_mode_a = classify::evaluate(model_a, split.test);
    classify::save_classifier(model_a, dir / files::kClassifierA);
  }

  SplitIds ids;
  for (const auto& r : split.train) ids.train.push_back(r.id);
  for (const auto& r : split.val) ids.val.push_back(r.id);
  for (const auto& r : split.test) ids.test.push_back(r.id);
  write_text(dir / files::kSplit,
             json{{"train", ids.train}, {"val", ids.val}, {"test", ids.test}}.dump(1) + "\n");

  auto dc = cfg.retrieval;
  dc.seed = derive_seed(train_seed, "retrieval");
  const auto adb = attacker_db(db, ids);
  t0 = std::chrono::steady_clock::now();
  retrieval::DualTrainReport dual_report;
  const auto tower = retrieval::train_dual_tower(adb, model, dc, &dual_report);
  s.retrieval_seconds = seconds_since(t0);
  s.recall_at_1 = retrieval::self_retrieval_recall(tower, adb);
  retrieval::save_dual_tower(tower, dir / files::kDualTower);

  json m{{"mode", std::string(traceex::feature_mode_name(cfg.mode))},
         {"train_size", s.train},
         {"val_size", s.val_size},
         {"test_size", s.test_size},
         {"test", accuracy_json(s.test)},
         {"val", accuracy_json(s.val)},
         {"best_epoch", report.best_epoch},
         {"train_loss", report.train_loss},
         {"val_top1", report.val_top1},
         {"recall_at_1", s.recall_at_1},
         {"dual_epoch_loss", dual_report.epoch_loss}};
  if (s.test_mode_a) m["test_mode_a"] = accuracy_json(*s.test_mode_a);
  write_text(dir / files::kTrainMetrics, m.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------- attack

namespace {

void accumulate(MeanSimilarity& m, const metrics::SimilarityReport& r) {
  m.prompt_ned += r.prompt_ned;
  m.prompt_rouge1 += r.prompt_rouge1;
  m.prompt_cos += r.prompt_cos;
  m.response_ned += r.response_ned;
  m.response_rouge1 += r.response_rouge1;
  m.response_cos += r.response_cos;
}

void divide(MeanSimilarity& m, double n) {
  m.prompt_ned /= n;
  m.prompt_rouge1 /= n;
  m.prompt_cos /= n;
  m.response_ned /= n;
  m.response_rouge1 /= n;
  m.response_cos /= n;
}

json mean_json(const MeanSimilarity& m) {
  return {{"prompt_ned", m.prompt_ned},     {"prompt_rouge1", m.prompt_rouge1},
          {"prompt_cos", m.prompt_cos},     {"response_ned", m.response_ned},
          {"response_rouge1", m.response_rouge1}, {"response_cos", m.response_cos}};
}

MeanSimilarity mean_from_json(const json& j) {
  MeanSimilarity m;
  m.prompt_ned = j.at("prompt_ned").get<double>();
  m.prompt_rouge1 = j.at("prompt_rouge1").get<double>();
  m.prompt_cos = j.at("prompt_cos").get<double>();
  m.response_ned = j.at("response_ned").get<double>();
  m.response_rouge1 = j.at("response_rouge1").get<double>();
  m.response_cos = j.at("response_cos").get<double>();
  return m;
}

}  // namespace

AttackSummary cmd_attack(const ExperimentConfig& cfg, const std::vector<std::string>& victim_ids) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto& dir = cfg.output_dir;
  const auto all = retrieval::read_query_db(require(dir, files::kQueryDb, "probe"));
  const auto split = read_split(dir);
  const auto classifier = classify::load_classifier(require(dir, files::kClassifier, "train"));
  const auto tower = retrieval::load_dual_tower(require(dir, files::kDualTower, "train"));
  auto bench = make_benchmark(cfg, corpus::ingest_corpus(require(dir, files::kCorpus, "probe")));

  const auto db = attacker_db(all, split);
  const retrieval::DbIndex index(tower, db);
  refine::TopicOracles oracles(db, *bench.vocab, cfg.ngram_order);
  refine::CrossoverRewriter rewriter;
  refine::AttackContext ctx;
  ctx.classifier = &classifier;
  ctx.tower = &tower;
  ctx.vocab = bench.vocab.get();
  ctx.app = &bench.app;
  ctx.rewriter = &rewriter;
  auto acfg = cfg.attack;
  acfg.seed = cfg.seed_for("attack");
  if (acfg.detect_misclass && cfg.confidence_samples > 0) {
    ctx.confidence_population =
        refine::confidence_population(db, index, oracles, ctx, acfg, cfg.confidence_samples);
  }

  std::vector<std::string> ids = victim_ids;
  if (ids.empty()) {
    const auto& test = split.test;
    const std::size_t n = cfg.victims == 0 ? test.size() : std::min(cfg.victims, test.size());
    for (std::size_t i = 0; i < n; ++i) ids.push_back(test[i * test.size() / n]);
  }
  if (ids.empty()) throw Error("attack: no victims");
  std::unordered_map<std::string, const retrieval::QueryRecord*> by_id;
  for (const auto& r : all.records) by_id[r.id()] = &r;

  AttackSummary s;
  std::vector<metrics::ReportRow> rows, rows0;
  std::string transcripts;
  std::ostringstream victims_csv;
  victims_csv << "trial,victim_id,topic,predicted_topic,widened,iterations,probe_calls,"
                 "response_tokens,best_distance\n";
  victims_csv << std::setprecision(17);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto it = by_id.find(ids[t]);
    if (it == by_id.end()) throw Error("attack: unknown victim id " + ids[t]);
    const auto& v = *it->second;
    const auto res = refine::run_attack(v.side_trace, v.id(), db, index, oracles, ctx, acfg);
    const auto& truth = v.conversation;
    const auto fin = metrics::compare(truth.prompt, truth.response, res.prompt, res.response, &tower);
    const auto& h0 = res.history.front();
    const auto first = metrics::compare(truth.prompt, truth.response, h0.prompt, h0.response, &tower);
    rows.push_back({v.id(), fin});
    rows0.push_back({v.id(), first});
    accumulate(s.final_mean, fin);
    accumulate(s.iter0_mean, first);
    s.success_rate += fin.success() ? 1.0 : 0.0;
    s.success_rate_iter0 += first.success() ? 1.0 : 0.0;
    s.widened += res.widened ? 1 : 0;
    s.probe_calls += res.probe_calls;
    transcripts += refine::transcript_jsonl(v.id(), res, &truth, &tower);
    victims_csv << t << ',' << v.id() << ',' << v.topic << ',' << res.topics.front() << ','
                << (res.widened ? 1 : 0) << ',' << res.history.size() - 1 << ',' << res.probe_calls
                << ',' << corpus::tokenize(*bench.vocab, truth.response).size() << ','
                << res.history.back().best_distance << '\n';
  }
  s.victims = ids.size();
  const double n = static_cast<double>(s.victims);
  s.success_rate /= n;
  s.success_rate_iter0 /= n;
  divide(s.final_mean, n);
  divide(s.iter0_mean, n);
  s.seconds = seconds_since(t0);

  metrics::write_report_csv(rows, dir / files::kAttackReport);
  metrics::write_report_csv(rows0, dir / files::kAttackReportIter0);
  write_text(dir / files::kTranscripts, transcripts);
  write_text(dir / files::kAttackVictims, victims_csv.str());
  const json summary{{"victims", s.victims},
                     {"success_rate", s.success_rate},
                     {"success_rate_iter0", s.success_rate_iter0},
                     {"final", mean_json(s.final_mean)},
                     {"iter0", mean_json(s.iter0_mean)},
                     {"widened", s.widened},
                     {"probe_calls", s.probe_calls}};
  write_text(dir / files::kAttackSummary, summary.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------- sweep

std::string SweepRow::experiment() const {
  std::ostringstream o;
  o << kind;
  if (kind != "none") o << '@' << rate;
  o << ':' << traceex::feature_mode_name(mode);
  return o.str();
}

namespace {

const char* kSweepHeader = "kind,rate,mode,top1,top3";

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path) {
  std::ostringstream o;
  o << kSweepHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    o << r.kind << ',' << r.rate << ',' << traceex::feature_mode_name(r.mode) << ','
      << r.accuracy.top1 << ',' << r.accuracy.top3 << '\n';
  }
  write_text(path, o.str());
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const fs::path& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("bad number '" + s + "' in " + where.string());
  }
}

}  // namespace

std::vector<SweepRow> read_sweep_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kSweepHeader) {
    throw Error("unexpected header in " + path.string());
  }
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw Error("bad row in " + path.string());
    SweepRow r;
    r.kind = f[0];
    r.rate = to_double(f[1], path);
    r.mode = traceex::parse_feature_mode(f[2]);
    r.accuracy.top1 = to_double(f[3], path);
    r.accuracy.top3 = to_double(f[4], path);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<SweepRow> cmd_defense_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& dir = cfg.output_dir;
  const auto all = retrieval::read_query_db(require(dir, files::kQueryDb, "probe"));
  const auto split = read_split(dir);
  const auto model = classify::load_classifier(require(dir, files::kClassifier, "train"));
  const auto ex = cfg.extraction_config();
  const auto sim_seed = cfg.seed_for("sim");

  std::unordered_map<std::string, const retrieval::QueryRecord*> by_id;
  for (const auto& r : all.records) by_id[r.id()] = &r;
  auto perturbed = [&](const std::vector<std::string>& ids, const sim::DefenseConfig& d,
                       const std::string& tag) {
    std::vector<classify::LabeledTrace> out;
    for (const auto& id : ids) {
      const auto& r = *by_id.at(id);
      const auto pt = d.is_identity()
                          ? r.packet_trace
                          : sim::apply_defense(d, r.packet_trace,
                                               derive_seed(sim_seed, "sweep/" + tag + "/" + id));
      out.push_back({id, traceex::extract_trace(ex, pt), r.topic});
    }
    return out;
  };

  std::vector<SweepRow> rows;
  auto eval = [&](const std::string& kind, double rate, const sim::DefenseConfig& d) {
    SweepRow r{kind, rate, model.mode(), {}};
    r.accuracy = classify::evaluate(model, perturbed(split.test, d, r.experiment()));
    rows.push_back(std::move(r));
  };
  eval("none", 0.0, {});
  if (fs::exists(dir / files::kClassifierA)) {
    const auto model_a = classify::load_classifier(dir / files::kClassifierA);
    rows.push_back({"none", 0.0, model_a.mode(), classify::evaluate(model_a, labeled(all, split.test))});
  }
  for (double r : cfg.sweep.dummy_rates) {
    sim::DefenseConfig d;
    d.dummy_rate = r;
    eval("dummy", r, d);
  }
  for (double r : cfg.sweep.loss_noise_rates) {
    sim::DefenseConfig loss, noise, both;
    loss.drop_rate = r;
    noise.swap_rate = r;
    both.drop_rate = r;
    both.swap_rate = r;
    eval("loss", r, loss);
    eval("noise", r, noise);
    eval("loss+noise", r, both);
  }
  if (cfg.sweep.pad_multiple > 0) {
    sim::DefenseConfig pad;
    pad.pad_to_multiple = cfg.sweep.pad_multiple;
    const auto tag = "padding@" + std::to_string(cfg.sweep.pad_multiple);
    const auto train = perturbed(split.train, pad, tag);
    const auto val = perturbed(split.val, pad, tag);
    const auto test = perturbed(split.test, pad, tag);
    auto tc = cfg.classifier;
    tc.seed = derive_seed(cfg.seed_for("train"), "classifier");
    for (auto mode : {traceex::FeatureMode::kA, traceex::FeatureMode::kAB}) {
      const auto m = classify::train_classifier(train, val, tc, mode, all.topic_names.size());
      rows.push_back({"padding", static_cast<double>(cfg.sweep.pad_multiple), mode,
                      classify::evaluate(m, test)});
    }
  }
  write_sweep_csv(rows, dir / files::kDefenseSweep);
  return rows;
}

// ---------------------------------------------------------------- report

std::vector<LengthBin> similarity_by_length(const fs::path& run_dir, std::size_t width) {
  if (width == 0) throw Error("bin width must be positive");
  const auto rows = metrics::read_report_csv(require(run_dir, files::kAttackReport, "attack"));
  const auto victims_path = require(run_dir, files::kAttackVictims, "attack");
  std::istringstream in(read_text(victims_path));
  std::string line;
  std::getline(in, line);
  std::unordered_map<std::string, std::size_t> tokens_of;  // victim id -> response tokens
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw Error("bad row in " + victims_path.string());
    tokens_of[f[1]] = static_cast<std::size_t>(to_double(f[7], victims_path));
  }
  std::map<std::size_t, LengthBin> bins;
  for (const auto& r : rows) {
    auto it = tokens_of.find(r.trial);
    if (it == tokens_of.end()) throw Error("attack report trial without victim row");
    const std::size_t lo = it->second / width * width;
    auto& b = bins[lo];
    b.lo = lo;
    b.hi = lo + width;
    ++b.count;
    b.response_ned += r.report.response_ned;
    b.response_rouge1 += r.report.response_rouge1;
    b.response_cos += r.report.response_cos;
  }
  std::vector<LengthBin> out;
  for (auto& [lo, b] : bins) {
    const double n = static_cast<double>(b.count);
    b.response_ned /= n;
    b.response_rouge1 /= n;
    b.response_cos /= n;
    out.push_back(b);
  }
  return out;
}

ReportSummary cmd_report(const fs::path& dir) {
  const std::vector<const char*> expected{files::kTrainMetrics, files::kDefenseSweep,
                                          files::kAttackSummary, files::kAttackReport,
                                          files::kAttackVictims};
  ReportSummary s;
  for (const auto* f : expected) {
    if (!fs::exists(dir / f)) s.missing.push_back(f);
  }
  if (s.missing.size() == expected.size()) {
    std::string list;
    for (const auto& m : s.missing) list += (list.empty() ? "" : ", ") + m;
    throw Error("report: no run artifacts in " + dir.string() + " (missing " + list + ")");
  }

  std::ostringstream csv, md;
  csv << "experiment,top1,top3,success_rate,prompt_ned,prompt_rouge1,response_ned,response_rouge1\n";
  csv << std::setprecision(6);
  md << std::setprecision(4) << std::fixed;
  md << "# Run summary\n\n";

  if (fs::exists(dir / files::kTrainMetrics)) {
    const auto j = read_json(dir / files::kTrainMetrics);
    md << "## Topic classification (test split)\n\n| mode | top-1 | top-3 |\n|---|---|---|\n";
    const auto mode = j.at("mode").get<std::string>();
    const double t1 = j.at("test").at("top1"), t3 = j.at("test").at("top3");
    csv << "train:" << mode << ',' << t1 << ',' << t3 << ",,,,,\n";
    md << "| " << mode << " | " << t1 << " | " << t3 << " |\n";
    ++s.experiments;
    if (j.contains("test_mode_a")) {
      const double a1 = j["test_mode_a"].at("top1"), a3 = j["test_mode_a"].at("top3");
      csv << "train:A," << a1 << ',' << a3 << ",,,,,\n";
      md << "| A | " << a1 << " | " << a3 << " |\n";
      ++s.experiments;
    }
    md << "\nSelf-retrieval recall@1: " << j.at("recall_at_1").get<double>() << "\n\n";
  }

  if (fs::exists(dir / files::kDefenseSweep)) {
    const auto rows = read_sweep_csv(dir / files::kDefenseSweep);
    md << "## Defense sweep\n\n| kind | rate | mode | top-1 | top-3 |\n|---|---|---|---|---|\n";
    std::map<std::string, Series> curves;
    double clean = -1.0;
    for (const auto& r : rows) {
      csv << r.experiment() << ',' << r.accuracy.top1 << ',' << r.accuracy.top3 << ",,,,,\n";
      md << "| " << r.kind << " | " << r.rate << " | " << traceex::feature_mode_name(r.mode) << " | "
         << r.accuracy.top1 << " | " << r.accuracy.top3 << " |\n";
      ++s.experiments;
      if (r.kind == "none" && clean < 0.0) clean = r.accuracy.top1;
      if (r.kind == "dummy" || r.kind == "loss" || r.kind == "noise" || r.kind == "loss+noise") {
        auto& c = curves[r.kind];
        c.name = r.kind;
        c.points.emplace_back(100.0 * r.rate, r.accuracy.top1);
      }
    }
    md << "\n";
    std::vector<Series> series;
    for (auto& [k, c] : curves) {
      if (clean >= 0.0) c.points.insert(c.points.begin(), {0.0, clean});
      std::sort(c.points.begin(), c.points.end());
      series.push_back(c);
    }
    write_text(dir / files::kAccuracyPlot,
               render_line_plot("Topic top-1 under traffic perturbation", "rate (%)",
                                "top-1 accuracy", series));
  }

  if (fs::exists(dir / files::kAttackSummary)) {
    const auto j = read_json(dir / files::kAttackSummary);
    const auto fin = mean_from_json(j.at("final"));
    const auto first = mean_from_json(j.at("iter0"));
    md << "## Conversation recovery (" << j.at("victims").get<std::size_t>() << " victims)\n\n"
       << "| stage | success | prompt NED | prompt ROUGE-1 | prompt cos | response NED | "
          "response ROUGE-1 | response cos |\n|---|---|---|---|---|---|---|---|\n";
    const auto row = [&](const char* name, double succ, const MeanSimilarity& m) {
      md << "| " << name << " | " << succ << " | " << m.prompt_ned << " | " << m.prompt_rouge1 << " | "
         << m.prompt_cos << " | " << m.response_ned << " | " << m.response_rouge1 << " | "
         << m.response_cos << " |\n";
      csv << "attack:" << name << ",,," << succ << ',' << m.prompt_ned << ',' << m.prompt_rouge1 << ','
          << m.response_ned << ',' << m.response_rouge1 << '\n';
      ++s.experiments;
    };
    row("iter0", j.at("success_rate_iter0").get<double>(), first);
    row("final", j.at("success_rate").get<double>(), fin);
    md << "\n";
  }

  if (fs::exists(dir / files::kAttackReport) && fs::exists(dir / files::kAttackVictims)) {
    const auto bins = similarity_by_length(dir);
    std::ostringstream bcsv;
    bcsv << "bin_lo,bin_hi,count,response_ned,response_rouge1,response_cos\n"
         << std::setprecision(17);
    Series ned{"NED", {}}, rouge{"ROUGE-1", {}}, cos{"cosine", {}};
    md << "## Response similarity by length\n\n| tokens | n | NED | ROUGE-1 | cos |\n|---|---|---|---|---|\n";
    for (const auto& b : bins) {
      bcsv << b.lo << ',' << b.hi << ',' << b.count << ',' << b.response_ned << ','
           << b.response_rouge1 << ',' << b.response_cos << '\n';
      md << "| " << b.lo << "-" << b.hi - 1 << " | " << b.count << " | " << b.response_ned << " | "
         << b.response_rouge1 << " | " << b.response_cos << " |\n";
      const double mid = 0.5 * static_cast<double>(b.lo + b.hi);
      ned.points.emplace_back(mid, b.response_ned);
      rouge.points.emplace_back(mid, b.response_rouge1);
      cos.points.emplace_back(mid, b.response_cos);
    }
    md << "\n";
    write_text(dir / files::kSimilarityByLength, bcsv.str());
    write_text(dir / files::kSimilarityPlot,
               render_line_plot("Recovered response similarity by length", "response tokens",
                                "similarity", {ned, rouge, cos}));
  }

  if (!s.missing.empty()) {
    md << "Missing artifacts:";
    for (const auto& m : s.missing) md << ' ' << m;
    md << "\n";
  }
  write_text(dir / files::kSummaryCsv, csv.str());
  write_text(dir / files::kSummaryMd, md.str());
  return s;
}

// ---------------------------------------------------------------- plotting

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Round step (1, 2 or 5 times a power of ten) giving about five ticks.
double nice_step(double span) {
  if (span <= 0.0) return 1.0;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double r = raw / mag;
  return (r < 1.5 ? 1.0 : r < 3.5 ? 2.0 : r < 7.5 ? 5.0 : 10.0) * mag;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(4) << v;
  return o.str();
}

}  // namespace

std::string render_line_plot(const std::string& title, const std::string& x_label,
                             const std::string& y_label, const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 55;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!any) {
        x0 = x1 = x;
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  y0 = std::min(y0, 0.0);
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  const double xs = nice_step(x1 - x0), ys = nice_step(y1 - y0);
  x0 = std::floor(x0 / xs) * xs;
  x1 = std::ceil(x1 / xs) * xs;
  y1 = std::ceil(y1 / ys) * ys;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream o;
  o << std::fixed << std::setprecision(1);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(title) << "</text>\n";
  for (double x = x0; x <= x1 + xs * 1e-9; x += xs) {
    o << "<line x1=\"" << px(x) << "\" y1=\"" << T << "\" x2=\"" << px(x) << "\" y2=\"" << H - B
      << "\" stroke=\"#e5e5e5\"/>\n";
    o << "<text x=\"" << px(x) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(x)
      << "</text>\n";
  }
  for (double y = y0; y <= y1 + ys * 1e-9; y += ys) {
    o << "<line x1=\"" << L << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y)
      << "\" stroke=\"#e5e5e5\"/>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y)
      << "</text>\n";
  }
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 14 << "\" text-anchor=\"middle\">"
    << xml_escape(x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (T + H - B) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = colors[i % 6];
    if (!s.points.empty()) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : s.points) o << px(x) << ',' << py(y) << ' ';
      o << "\"/>\n";
      for (const auto& [x, y] : s.points) {
        o << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
      }
    }
    const double ly = T + 10 + 20.0 * static_cast<double>(i);
    o << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 40 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 46 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace netecho::harness
