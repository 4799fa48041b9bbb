// Trace/text dual-tower retrieval over the probe database, semantic-gradient
// ranking and out-of-distribution scoring.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "netecho/classify.hpp"
#include "netecho/corpus.hpp"
#include "netecho/streamsim.hpp"
#include "netecho/traceex.hpp"

namespace netecho::retrieval {

using nn::Mat;
using nn::Vec;

// ---------------------------------------------------------------- QueryDB

struct Origin {
  /// 0 for probe records, otherwise the refinement iteration that added it.
  int iteration = 0;
  bool is_probe() const { return iteration == 0; }
  bool operator==(const Origin&) const = default;
};

struct QueryRecord {
  corpus::Conversation conversation;
  sim::PacketTrace packet_trace;
  traceex::SideTrace side_trace;
  int topic = 0;
  Origin origin;

  const std::string& id() const { return conversation.id; }
};

struct QueryDB {
  std::vector<QueryRecord> records;
  std::vector<std::string> topic_names;
  int version = 0;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

/// JSONL: a header line {"netecho_querydb":1,"version":N,"topic_names":[...]}
/// followed by one record per line.
void write_query_db(const QueryDB& db, const std::filesystem::path& path);
QueryDB read_query_db(const std::filesystem::path& path);

// --------------------------------------------------------------- towers

inline constexpr std::size_t kEmbedDim = 64;
inline constexpr std::size_t kHashBuckets = std::size_t{1} << 16;
inline constexpr double kOodBoundary = 0.38;

/// Lower-cased alphanumeric words of `text`, hashed into the embedding table.
std::vector<std::uint32_t> text_buckets(std::string_view text);

class DualTower {
 public:
  DualTower() = default;
  /// Trace tower starts from the classifier's encoder and input code.
  DualTower(const classify::ClassifierModel& pretrained, std::uint64_t seed,
            double temperature = 0.07);

  double temperature() const { return temperature_; }
  traceex::FeatureMode mode() const { return trace_base.mode(); }

  Vec embed_trace(const traceex::SideTrace& st) const;
  std::vector<Vec> embed_traces(const std::vector<const traceex::SideTrace*>& traces) const;
  Vec embed_text(std::string_view text) const;

  /// Symmetric InfoNCE of matched pairs; accumulates gradients into `grad`
  /// when set.
  double loss_and_grad(const std::vector<const traceex::SideTrace*>& traces,
                       const std::vector<std::string_view>& texts, DualTower* grad) const;

  DualTower zeros_like() const;
  std::vector<nn::ParamRef> params();

  // Trace tower: encoder of `trace_base` (its output layer is unused), then
  // an affine projection.
  classify::ClassifierModel trace_base;
  Mat trace_proj, trace_bias;  // D x H, D x 1
  // Text tower: hashed word table (D x buckets), mean-pooled, then
  // tanh(W1 m + b1), then W2 . + b2.
  Mat table;
  Mat w1, b1, w2, b2;

 private:
  Mat trace_raw(const nn::SeqBatch& batch, nn::GruCache* cache, Mat* pooled) const;
  Mat text_raw(const std::vector<std::string_view>& texts, Mat* mean, Mat* hidden) const;

  double temperature_ = 0.07;

  friend void save_dual_tower(const DualTower&, const std::filesystem::path&);
  friend DualTower load_dual_tower(const std::filesystem::path&);
};

/// L = -(1/B) sum_i log softmax_j(s_ij / T)[i], averaged over the row and
/// column directions. `sim` holds cosine similarities of matched pairs on
/// the diagonal. Writes dL/dsim into `d_sim` when set.
double infonce_loss(const Mat& sim, double temperature, Mat* d_sim = nullptr);

struct DualTrainConfig {
  /// Adam step size.
  double lr = 0.003;
  double clip_norm = 5.0;
  int epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  double temperature = 0.07;

  void validate() const;
};

struct DualTrainReport {
  /// Mean loss over the database before training (index 0) and after each
  /// epoch.
  std::vector<double> epoch_loss;
};

DualTower train_dual_tower(const QueryDB& db, const classify::ClassifierModel& pretrained,
                           const DualTrainConfig& cfg, DualTrainReport* report = nullptr);

/// Fraction of records whose trace embedding is closest (cosine) to the
/// text embedding of their own response among all records of `db`.
double self_retrieval_recall(const DualTower& model, const QueryDB& db);

/// Max relative error between analytic and central-difference gradients on a
/// batch of matched pairs. Dense parameters are checked entry by entry; for
/// the hashed table only the columns the batch touches can influence the
/// loss, so only those are checked.
double dual_grad_check(const DualTower& model, const std::vector<const traceex::SideTrace*>& traces,
                       const std::vector<std::string_view>& texts);

void save_dual_tower(const DualTower& model, const std::filesystem::path& path);
DualTower load_dual_tower(const std::filesystem::path& path);

// ------------------------------------------------------------ retrieval

double cosine(const Vec& a, const Vec& b);

/// Trace-embedding distance d = 1 - cosine used by the refinement loop.
double trace_distance(const DualTower& model, const traceex::SideTrace& a,
                      const traceex::SideTrace& b);

/// Trace embeddings of a QueryDB, kept in step with it as records are added.
class DbIndex {
 public:
  DbIndex(const DualTower& model, const QueryDB& db);
  void add(const QueryRecord& rec);
  std::size_t size() const { return vecs_.size(); }
  const Vec& vec(std::size_t i) const { return vecs_[i]; }
  const DualTower& model() const { return *model_; }

 private:
  const DualTower* model_;
  std::vector<Vec> vecs_;
};

struct Hit {
  std::size_t index = 0;  // into QueryDB::records
  double similarity = 0.0;
};

/// Restricts candidates to records whose topic is listed; nullopt keeps all.
using TopicFilter = std::optional<std::vector<int>>;

/// The g records most similar to `st` by trace-embedding cosine, best first,
/// ties broken by ascending record id. Returns fewer when the filter leaves
/// fewer than g.
std::vector<Hit> retrieve(const DbIndex& index, const QueryDB& db, const traceex::SideTrace& st,
                          std::size_t g, const TopicFilter& filter = std::nullopt);
std::vector<Hit> retrieve(const DualTower& model, const QueryDB& db, const traceex::SideTrace& st,
                          std::size_t g, const TopicFilter& filter = std::nullopt);

/// Topics predicted for `st`: the top-1 label, or the top-3 when `widen`.
std::vector<int> topic_filter(const classify::ClassifierModel& classifier,
                              const traceex::SideTrace& st, bool widen);

/// Candidates sorted by ascending similarity to `st` (ties by descending
/// id), so the last element is top_1.
std::vector<const QueryRecord*> rank_gradient(const DualTower& model, const traceex::SideTrace& st,
                                              const std::vector<const QueryRecord*>& candidates);

/// 1 - max cosine between the text embeddings of `victim_text` and the
/// training texts, clamped to [0, 1].
double ood_score(std::string_view victim_text, const std::vector<std::string>& train_texts,
                 const DualTower& model);
inline bool is_ood(double score) { return score > kOodBoundary; }

}  // namespace netecho::retrieval
