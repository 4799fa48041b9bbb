// netecho: run the side-channel benchmark pipeline from the command line.
//
//   netecho probe --config bench.json
//   netecho train --config bench.json
//   netecho attack --config bench.json --victims 20
//   netecho defense-sweep --config bench.json
//   netecho report --run-dir runs/bench
//
// Success prints one JSON object on stdout. Failure prints
// {"error": ..., "command": ...} on stderr and exits with status 1 (2 for
// usage errors).

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "netecho/common.hpp"
#include "netecho/harness.hpp"

namespace nh = netecho::harness;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string scenario;
};

struct Overrides {
  std::optional<std::size_t> topics, per_topic, victims, k, g;
  std::optional<int> epochs;
  std::string corpus, mode;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON experiment config (defaults apply when omitted)");
  cmd->add_option("-o,--out", c.out, "Run directory (overrides config and NETECHO_OUT)");
  cmd->add_option("--seed", c.seed, "Experiment seed");
  cmd->add_option("--scenario", c.scenario, "Deployment scenario preset A-G");
}

nh::ExperimentConfig resolve(const Common& c, const Overrides& o) {
  nh::ExperimentConfig cfg = c.config.empty() ? nh::parse_config("{}") : nh::load_config(c.config);
  nh::apply_env_overrides(cfg);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.scenario.empty()) {
    cfg.scenario = c.scenario;
    if (cfg.scenario.size() == 1) cfg.defense = netecho::sim::preset_defense(cfg.scenario[0]);
  }
  if (o.topics) cfg.corpus.topics = *o.topics;
  if (o.per_topic) cfg.corpus.per_topic = *o.per_topic;
  if (!o.corpus.empty()) cfg.corpus.path = o.corpus;
  if (!o.mode.empty()) cfg.mode = netecho::traceex::parse_feature_mode(o.mode);
  if (o.epochs) cfg.classifier.epochs = *o.epochs;
  if (o.victims) cfg.victims = *o.victims;
  if (o.k) cfg.attack.k = *o.k;
  if (o.g) cfg.attack.g = *o.g;
  cfg.validate();
  return cfg;
}

json accuracy(const netecho::classify::Accuracy& a) { return {{"top1", a.top1}, {"top3", a.top3}}; }

json similarity(const nh::MeanSimilarity& m) {
  return {{"prompt_ned", m.prompt_ned},         {"prompt_rouge1", m.prompt_rouge1},
          {"prompt_cos", m.prompt_cos},         {"response_ned", m.response_ned},
          {"response_rouge1", m.response_rouge1}, {"response_cos", m.response_cos}};
}

void fail(const std::string& command, const std::string& message) {
  std::cerr << json{{"error", message}, {"command", command}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Side-channel conversation recovery benchmark"};
  app.require_subcommand(1);
  Common common;
  Overrides over;

  auto* probe = app.add_subcommand("probe", "Generate or ingest the corpus and record its traffic");
  add_common(probe, common);
  probe->add_option("--topics", over.topics, "Synthetic topics");
  probe->add_option("--per-topic", over.per_topic, "Synthetic conversations per topic");
  probe->add_option("--corpus", over.corpus, "Ingest this JSONL corpus instead");

  std::string packets, traces_out;
  auto* extract = app.add_subcommand("extract", "Extract a side trace from a packet log");
  add_common(extract, common);
  extract->add_option("--packets", packets, "Packet log (#netecho-pkt v1, t_us<TAB>len per line)")->required();
  extract->add_option("--output", traces_out, "Side-trace JSONL to write")->required();

  auto* train = app.add_subcommand("train", "Train the topic classifier and the dual tower");
  add_common(train, common);
  train->add_option("--mode", over.mode, "Feature mode A or AB");
  train->add_option("--epochs", over.epochs, "Classifier epochs");

  std::vector<std::string> victim_ids;
  auto* attack = app.add_subcommand("attack", "Recover test-split conversations from their traces");
  add_common(attack, common);
  attack->add_option("--victims", over.victims, "Number of test-split victims (0 = all)");
  attack->add_option("--victim-id", victim_ids, "Attack these record ids instead");
  attack->add_option("-k,--rounds", over.k, "Refinement rounds");
  attack->add_option("-g,--rewrites", over.g, "References and rewrites per round");

  auto* sweep = app.add_subcommand("defense-sweep", "Classifier accuracy under traffic defenses");
  add_common(sweep, common);

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Summary tables and plots for a run directory");
  add_common(report, common);
  report->add_option("--run-dir", run_dir, "Run directory (defaults to the config's output dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("parse", e.what());
    return 2;
  }

  const auto* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  try {
    json out{{"command", name}};
    if (cmd == report) {
      std::string dir = run_dir;
      if (dir.empty()) dir = resolve(common, over).output_dir.string();
      const auto s = nh::cmd_report(dir);
      out["run_dir"] = dir;
      out["experiments"] = s.experiments;
      out["missing"] = s.missing;
    } else {
      const auto cfg = resolve(common, over);
      out["run_dir"] = cfg.output_dir.string();
      if (cmd == probe) {
        const auto s = nh::cmd_probe(cfg);
        out["records"] = s.records;
        out["db"] = s.db_path.string();
      } else if (cmd == extract) {
        out["traces"] = nh::cmd_extract(cfg, packets, traces_out);
        out["output"] = traces_out;
      } else if (cmd == train) {
        const auto s = nh::cmd_train(cfg);
        out["test"] = accuracy(s.test);
        out["val"] = accuracy(s.val);
        if (s.test_mode_a) out["test_mode_a"] = accuracy(*s.test_mode_a);
        out["recall_at_1"] = s.recall_at_1;
        out["classifier_seconds"] = s.classifier_seconds;
        out["retrieval_seconds"] = s.retrieval_seconds;
      } else if (cmd == attack) {
        const auto s = nh::cmd_attack(cfg, victim_ids);
        out["victims"] = s.victims;
        out["success_rate"] = s.success_rate;
        out["success_rate_iter0"] = s.success_rate_iter0;
        out["final"] = similarity(s.final_mean);
        out["iter0"] = similarity(s.iter0_mean);
        out["seconds"] = s.seconds;
      } else if (cmd == sweep) {
        json rows = json::array();
        for (const auto& r : nh::cmd_defense_sweep(cfg)) {
          rows.push_back({{"experiment", r.experiment()}, {"top1", r.accuracy.top1},
                          {"top3", r.accuracy.top3}});
        }
        out["rows"] = rows;
      }
    }
    std::cout << out.dump() << std::endl;
  } catch (const std::exception& e) {
    fail(name, e.what());
    return 1;
  }
  return 0;
}
