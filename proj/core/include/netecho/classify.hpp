// Topic classifier over side-trace features (the semantic router).
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "netecho/nn.hpp"
#include "netecho/traceex.hpp"

namespace netecho::classify {

struct LabeledTrace {
  std::string id;
  traceex::SideTrace trace;
  int label = 0;
};

struct Split {
  std::vector<LabeledTrace> train, val, test;
};

/// Seeded, label-stratified 8:1:1 split. Each label contributes
/// round(0.1 n) records to val and to test, and the global totals are then
/// balanced to within one record of the 8:1:1 targets.
Split split_dataset(const std::vector<LabeledTrace>& records, std::uint64_t seed);

/// Nearest-rank 95th percentile: the ceil(0.95 n)-th smallest value.
std::size_t p95_length(std::vector<std::size_t> lengths);
std::size_t p95_truncation_length(const std::vector<LabeledTrace>& train);

struct AugmentConfig {
  double dummy_insert_rate = 0.05;  // <= 0.05
  double swap_rate = 0.02;          // <= 0.02
  double len_jitter_prob = 0.1;
};

/// Trace-plausible perturbation used during training: copies of existing
/// groups inserted at random positions, adjacent swaps, and +-1 character
/// jitter. Never touches the label.
traceex::SideTrace augment(const traceex::SideTrace& st, const AugmentConfig& cfg, Rng& rng);

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double clip_norm = 5.0;
  int epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  bool use_augment = true;
  AugmentConfig augment;
  /// Sequence cap; 0 means the p95 length of the training set.
  std::size_t max_len = 0;

  void validate() const;
};

/// Grid sizes of the fixed input code. Each scalar feature is spread over
/// integer levels with a hat function (v = 2.25 puts 0.75 on level 2 and
/// 0.25 on level 3); values past the last level clamp to it.
inline constexpr std::size_t kCountLevels = 8;
inline constexpr std::size_t kLengthLevels = 32;

/// Which coded input columns carried any variation on the training steps.
/// Columns that never varied are fed as 0. The mask column is always on.
struct InputCode {
  std::vector<int> active;
};

/// Expands one featurized step into the coded input columns.
void encode_step(const traceex::FeatureSeq& f, std::size_t t, double* out);

class ClassifierModel {
 public:
  ClassifierModel() = default;
  ClassifierModel(traceex::FeatureMode mode, std::size_t num_topics, std::size_t max_len,
                  std::uint64_t seed);

  traceex::FeatureMode mode() const { return mode_; }
  std::size_t num_topics() const { return num_topics_; }
  std::size_t max_len() const { return max_len_; }

  /// Builds a padded, normalized batch from side traces. `cap` bounds the
  /// number of steps per trace; 0 keeps every group. Training batches use
  /// max_len(), inference reads whole traces.
  nn::SeqBatch make_batch(const std::vector<const traceex::SideTrace*>& traces,
                          std::size_t cap) const;

  nn::Mat logits(const nn::SeqBatch& batch) const;
  std::vector<double> predict_proba(const traceex::SideTrace& st) const;
  std::vector<std::vector<double>> predict_proba(const std::vector<traceex::SideTrace>& traces) const;
  /// Labels by descending probability; ties go to the lower label id.
  std::vector<int> predict_topk(const traceex::SideTrace& st, std::size_t k) const;

  /// Mean cross-entropy of a batch; accumulates gradients when `grad` is set.
  double loss_and_grad(const nn::SeqBatch& batch, const std::vector<int>& labels,
                       ClassifierModel* grad) const;

  ClassifierModel zeros_like() const;
  std::vector<nn::ParamRef> params();

  void fit_input_code(const std::vector<const traceex::SideTrace*>& traces);
  const InputCode& input_code() const { return code_; }
  void set_input_code(InputCode code);

  nn::GruEncoder encoder;
  nn::Mat w_out, b_out;

 private:
  traceex::FeatureMode mode_ = traceex::FeatureMode::kAB;
  std::size_t num_topics_ = 0;
  std::size_t max_len_ = 0;
  InputCode code_;

  friend void save_classifier(const ClassifierModel&, const std::filesystem::path&);
  friend ClassifierModel load_classifier(const std::filesystem::path&);
};

/// Names of the coded input columns, e.g. "count=2", "avg_len=5", "mask".
std::vector<std::string> feature_roles(traceex::FeatureMode mode);

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_top1;
  int best_epoch = -1;
  double best_val_top1 = 0.0;
};

/// Mini-batch momentum SGD on cross-entropy; returns the parameters with the
/// best validation top-1 (epoch 0 is the initialization). Deterministic.
ClassifierModel train_classifier(const std::vector<LabeledTrace>& train,
                                 const std::vector<LabeledTrace>& val, const TrainConfig& cfg,
                                 traceex::FeatureMode mode, std::size_t num_topics,
                                 TrainReport* report = nullptr);

struct Accuracy {
  double top1 = 0.0;
  double top3 = 0.0;
};

Accuracy evaluate(const ClassifierModel& model, const std::vector<LabeledTrace>& set);

/// Max relative error between analytic and central-difference gradients
/// (h = 1e-4) over every parameter, for the loss on a single sample.
double grad_check(const ClassifierModel& model, const LabeledTrace& sample);

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_classifier(const std::filesystem::path& path);

}  // namespace netecho::classify
