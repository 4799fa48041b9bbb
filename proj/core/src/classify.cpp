#include "netecho/classify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

namespace netecho::classify {

using json = nlohmann::json;
using nn::Mat;
using traceex::FeatureMode;
using traceex::SideTrace;

// ------------------------------------------------------------------ split

Split split_dataset(const std::vector<LabeledTrace>& records, std::uint64_t seed) {
  if (records.size() < 10) throw Error("split_dataset needs at least 10 records");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < records.size(); ++i) by_label[records[i].label].push_back(i);
  for (const auto& [label, idx] : by_label) {
    if (idx.size() < 3) {
      throw Error("label " + std::to_string(label) + " has fewer than 3 records");
    }
  }
  const auto total = static_cast<double>(records.size());
  const auto target = static_cast<std::size_t>(std::llround(0.1 * total));

  // Largest-remainder apportionment of the val/test quota across labels.
  struct Quota {
    int label;
    std::size_t base;
    double frac;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [label, idx] : by_label) {
    const double exact = 0.1 * static_cast<double>(idx.size());
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quotas.push_back({label, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].frac > quotas[b].frac; });
  std::map<int, std::size_t> held;
  for (const auto& q : quotas) held[q.label] = q.base;
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k, ++assigned) {
    ++held[quotas[order[k]].label];
  }

  Split out;
  for (auto& [label, idx] : by_label) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label) + 1));
    rng.shuffle(idx);
    const std::size_t h = std::min(held[label], idx.size() / 3);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto& rec = records[idx[i]];
      if (i < h) {
        out.val.push_back(rec);
      } else if (i < 2 * h) {
        out.test.push_back(rec);
      } else {
        out.train.push_back(rec);
      }
    }
  }
  // Interleave labels so the order does not follow the label sort.
  Rng mix(derive_seed(seed, "split/order"));
  mix.shuffle(out.train);
  mix.shuffle(out.val);
  mix.shuffle(out.test);
  return out;
}

std::size_t p95_length(std::vector<std::size_t> lengths) {
  if (lengths.empty()) throw Error("p95 of an empty set");
  std::sort(lengths.begin(), lengths.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(lengths.size())));
  return lengths[std::max<std::size_t>(rank, 1) - 1];
}

std::size_t p95_truncation_length(const std::vector<LabeledTrace>& train) {
  std::vector<std::size_t> lens;
  lens.reserve(train.size());
  for (const auto& r : train) lens.push_back(r.trace.size());
  return p95_length(std::move(lens));
}

// ---------------------------------------------------------- augmentation

SideTrace augment(const SideTrace& st, const AugmentConfig& cfg, Rng& rng) {
  SideTrace out;
  const auto& g = st.groups;
  out.groups.reserve(g.size() + g.size() / 8 + 1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (rng.bernoulli(cfg.dummy_insert_rate)) out.groups.push_back(g[rng.index(g.size())]);
    out.groups.push_back(g[i]);
  }
  for (std::size_t i = 0; i + 1 < out.groups.size(); ++i) {
    if (rng.bernoulli(cfg.swap_rate)) std::swap(out.groups[i], out.groups[i + 1]);
  }
  for (auto& grp : out.groups) {
    if (!rng.bernoulli(cfg.len_jitter_prob)) continue;
    const std::int64_t delta = rng.bernoulli(0.5) ? 1 : -1;
    if (grp.char_lens && !grp.char_lens->empty()) {
      auto& first = grp.char_lens->front();
      if (first + delta < 0) continue;
      first += delta;
    } else if (grp.char_sum + delta < 0) {
      continue;
    }
    grp.char_sum += delta;
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw Error("learning rate must be > 0");
  if (epochs < 0) throw Error("epochs must be >= 0");
  if (batch_size == 0) throw Error("batch size must be >= 1");
  if (augment.dummy_insert_rate < 0 || augment.dummy_insert_rate > 0.05) {
    throw Error("augment dummy_insert_rate must be in [0, 0.05]");
  }
  if (augment.swap_rate < 0 || augment.swap_rate > 0.02) {
    throw Error("augment swap_rate must be in [0, 0.02]");
  }
  if (augment.len_jitter_prob < 0 || augment.len_jitter_prob > 1) {
    throw Error("augment len_jitter_prob must be in [0, 1]");
  }
}

// ------------------------------------------------------------------ model

std::vector<std::string> feature_roles(FeatureMode mode) {
  std::vector<std::string> roles;
  for (std::size_t i = 0; i < kCountLevels; ++i) roles.push_back("count=" + std::to_string(i));
  if (mode == FeatureMode::kAB) {
    for (std::size_t i = 0; i < kLengthLevels; ++i) roles.push_back("avg_len=" + std::to_string(i));
  }
  roles.push_back("mask");
  return roles;
}

namespace {

void hat(double v, std::size_t levels, double* out) {
  const double top = static_cast<double>(levels - 1);
  v = std::clamp(v, 0.0, top);
  const double lo = std::floor(v);
  const double frac = v - lo;
  const auto i = static_cast<std::size_t>(lo);
  out[i] += 1.0 - frac;
  if (frac > 0.0) out[i + 1] += frac;
}

std::size_t coded_dim(FeatureMode mode) {
  return kCountLevels + (mode == FeatureMode::kAB ? kLengthLevels : 0) + 1;
}

}  // namespace

void encode_step(const traceex::FeatureSeq& f, std::size_t t, double* out) {
  const bool ab = f.dim == traceex::feature_dim(FeatureMode::kAB);
  const std::size_t dim = kCountLevels + (ab ? kLengthLevels : 0) + 1;
  std::fill(out, out + dim, 0.0);
  hat(f.at(t, 0), kCountLevels, out);
  if (ab) hat(f.at(t, 1), kLengthLevels, out + kCountLevels);
  out[dim - 1] = f.at(t, f.dim - 1);
}

ClassifierModel::ClassifierModel(FeatureMode mode, std::size_t num_topics, std::size_t max_len,
                                 std::uint64_t seed)
    : encoder(feature_roles(mode), derive_seed(seed, "encoder")),
      mode_(mode),
      num_topics_(num_topics),
      max_len_(max_len) {
  if (num_topics < 2) throw Error("classifier needs at least 2 topics");
  if (max_len == 0) throw Error("classifier max_len must be >= 1");
  const auto t = static_cast<Eigen::Index>(num_topics);
  w_out = nn::uniform_init(t, nn::GruEncoder::kHidden,
                           std::sqrt(6.0 / (nn::GruEncoder::kHidden + 10.0)),
                           derive_seed(seed, "classifier/w_out"));
  b_out = Mat::Zero(t, 1);
  code_.active.assign(coded_dim(mode), 1);
}

void ClassifierModel::fit_input_code(const std::vector<const SideTrace*>& traces) {
  const auto dim = coded_dim(mode_);
  std::vector<double> lo(dim, 0.0), hi(dim, 0.0), row(dim);
  bool first = true;
  for (const auto* st : traces) {
    const auto f = traceex::featurize(*st, mode_, max_len_);
    for (std::size_t t = 0; t < f.length; ++t) {
      encode_step(f, t, row.data());
      for (std::size_t c = 0; c < dim; ++c) {
        lo[c] = first ? row[c] : std::min(lo[c], row[c]);
        hi[c] = first ? row[c] : std::max(hi[c], row[c]);
      }
      first = false;
    }
  }
  code_.active.assign(dim, 0);
  for (std::size_t c = 0; c + 1 < dim; ++c) code_.active[c] = hi[c] - lo[c] > 1e-12 ? 1 : 0;
  code_.active[dim - 1] = 1;
}

void ClassifierModel::set_input_code(InputCode code) {
  if (code.active.size() != coded_dim(mode_)) {
    throw Error("classifier input code does not match the encoder width");
  }
  code_ = std::move(code);
}

nn::SeqBatch ClassifierModel::make_batch(const std::vector<const SideTrace*>& traces,
                                         std::size_t cap) const {
  nn::SeqBatch b;
  b.dim = coded_dim(mode_);
  b.batch = traces.size();
  const auto bsz = static_cast<Eigen::Index>(traces.size());
  b.lengths = Eigen::RowVectorXd::Zero(bsz);
  std::vector<traceex::FeatureSeq> feats;
  feats.reserve(traces.size());
  std::size_t steps = 0;
  for (const auto* st : traces) {
    feats.push_back(traceex::featurize(*st, mode_, cap ? cap : st->groups.size()));
    steps = std::max(steps, feats.back().length);
  }
  b.x.assign(steps, Mat::Zero(static_cast<Eigen::Index>(b.dim), bsz));
  b.mask.assign(steps, Eigen::RowVectorXd::Zero(bsz));
  std::vector<double> row(b.dim);
  for (Eigen::Index j = 0; j < bsz; ++j) {
    const auto& f = feats[static_cast<std::size_t>(j)];
    b.lengths(j) = static_cast<double>(f.length);
    for (std::size_t t = 0; t < f.length; ++t) {
      encode_step(f, t, row.data());
      for (std::size_t c = 0; c < b.dim; ++c) {
        if (code_.active[c]) b.x[t](static_cast<Eigen::Index>(c), j) = row[c];
      }
      b.mask[t](j) = 1.0;
    }
  }
  return b;
}

Mat ClassifierModel::logits(const nn::SeqBatch& batch) const {
  Mat out = w_out * encoder.forward(batch, nullptr);
  out.colwise() += b_out.col(0);
  return out;
}

namespace {

Mat softmax_cols(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    const double mx = p.col(j).maxCoeff();
    p.col(j) = (p.col(j).array() - mx).exp();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

}  // namespace

std::vector<double> ClassifierModel::predict_proba(const SideTrace& st) const {
  return predict_proba(std::vector<SideTrace>{st}).front();
}

std::vector<std::vector<double>> ClassifierModel::predict_proba(
    const std::vector<SideTrace>& traces) const {
  std::vector<std::vector<double>> out;
  out.reserve(traces.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < traces.size(); s += kChunk) {
    std::vector<const SideTrace*> ptrs;
    for (std::size_t i = s; i < std::min(traces.size(), s + kChunk); ++i) ptrs.push_back(&traces[i]);
    const Mat p = softmax_cols(logits(make_batch(ptrs, 0)));
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      out.emplace_back(p.col(j).data(), p.col(j).data() + p.rows());
    }
  }
  return out;
}

namespace {

std::vector<int> topk_of(const std::vector<double>& p, std::size_t k) {
  std::vector<int> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[a] > p[b]; });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

}  // namespace

std::vector<int> ClassifierModel::predict_topk(const SideTrace& st, std::size_t k) const {
  if (k > num_topics_) throw Error("predict_topk: k exceeds the number of topics");
  return topk_of(predict_proba(st), k);
}

double ClassifierModel::loss_and_grad(const nn::SeqBatch& batch, const std::vector<int>& labels,
                                      ClassifierModel* grad) const {
  nn::GruCache cache;
  const Mat pooled = encoder.forward(batch, grad ? &cache : nullptr);
  Mat lg = w_out * pooled;
  lg.colwise() += b_out.col(0);
  const Mat p = softmax_cols(lg);
  const auto bsz = static_cast<double>(batch.batch);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    loss -= std::log(std::max(p(labels[static_cast<std::size_t>(j)], j), 1e-300));
  }
  loss /= bsz;
  if (grad) {
    Mat dlogits = p;
    for (Eigen::Index j = 0; j < p.cols(); ++j) dlogits(labels[static_cast<std::size_t>(j)], j) -= 1.0;
    dlogits /= bsz;
    grad->w_out.noalias() += dlogits * pooled.transpose();
    grad->b_out += dlogits.rowwise().sum();
    const Mat d_pooled = w_out.transpose() * dlogits;
    encoder.backward(batch, cache, d_pooled, grad->encoder);
  }
  return loss;
}

ClassifierModel ClassifierModel::zeros_like() const {
  ClassifierModel g;
  g.encoder = encoder.zeros_like();
  g.w_out = Mat::Zero(w_out.rows(), w_out.cols());
  g.b_out = Mat::Zero(b_out.rows(), b_out.cols());
  g.mode_ = mode_;
  g.num_topics_ = num_topics_;
  g.max_len_ = max_len_;
  g.code_ = code_;
  return g;
}

std::vector<nn::ParamRef> ClassifierModel::params() {
  auto p = encoder.params("encoder.");
  p.push_back({"classifier.w_out", &w_out});
  p.push_back({"classifier.b_out", &b_out});
  return p;
}

// --------------------------------------------------------------- training

Accuracy evaluate(const ClassifierModel& model, const std::vector<LabeledTrace>& set) {
  if (set.empty()) return {};
  std::vector<SideTrace> traces;
  traces.reserve(set.size());
  for (const auto& r : set) traces.push_back(r.trace);
  const auto probs = model.predict_proba(traces);
  double top1 = 0, top3 = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto top = topk_of(probs[i], 3);
    if (top[0] == set[i].label) ++top1;
    if (std::find(top.begin(), top.end(), set[i].label) != top.end()) ++top3;
  }
  const auto n = static_cast<double>(set.size());
  return {top1 / n, top3 / n};
}

ClassifierModel train_classifier(const std::vector<LabeledTrace>& train,
                                 const std::vector<LabeledTrace>& val, const TrainConfig& cfg,
                                 FeatureMode mode, std::size_t num_topics, TrainReport* report) {
  cfg.validate();
  if (train.empty()) throw Error("empty training set");
  for (const auto& r : train) {
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= num_topics) {
      throw Error("training label out of range");
    }
  }
  const std::size_t max_len = cfg.max_len ? cfg.max_len : std::max<std::size_t>(1, p95_truncation_length(train));
  ClassifierModel model(mode, num_topics, max_len, cfg.seed);
  {
    std::vector<const SideTrace*> ptrs;
    for (const auto& r : train) ptrs.push_back(&r.trace);
    model.fit_input_code(ptrs);
  }
  TrainReport local;
  TrainReport& rep = report ? *report : local;
  rep = TrainReport{};
  const auto& eval_set = val.empty() ? train : val;
  ClassifierModel best = model;
  rep.best_val_top1 = evaluate(model, eval_set).top1;
  rep.best_epoch = 0;

  nn::MomentumSgd opt(cfg.lr, cfg.momentum, cfg.clip_norm);
  Rng order_rng(derive_seed(cfg.seed, "train/order"));
  Rng aug_rng(derive_seed(cfg.seed, "train/augment"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<SideTrace> storage;
      std::vector<const SideTrace*> ptrs;
      std::vector<int> labels;
      const std::size_t end = std::min(order.size(), s + cfg.batch_size);
      storage.reserve(end - s);
      for (std::size_t i = s; i < end; ++i) {
        const auto& rec = train[order[i]];
        if (cfg.use_augment) {
          storage.push_back(augment(rec.trace, cfg.augment, aug_rng));
          ptrs.push_back(&storage.back());
        } else {
          ptrs.push_back(&rec.trace);
        }
        labels.push_back(rec.label);
      }
      const auto batch = model.make_batch(ptrs, model.max_len());
      ClassifierModel grad = model.zeros_like();
      const double loss = model.loss_and_grad(batch, labels, &grad);
      if (!std::isfinite(loss)) {
        throw Error("classifier training diverged (NaN loss) at epoch " + std::to_string(epoch));
      }
      opt.step(model.params(), grad.params());
      total += loss;
      ++batches;
    }
    rep.train_loss.push_back(total / static_cast<double>(std::max<std::size_t>(1, batches)));
    const double acc = evaluate(model, eval_set).top1;
    rep.val_top1.push_back(acc);
    if (acc > rep.best_val_top1) {
      rep.best_val_top1 = acc;
      rep.best_epoch = epoch;
      best = model;
    }
  }
  return best;
}

double grad_check(const ClassifierModel& model, const LabeledTrace& sample) {
  ClassifierModel m = model;
  const auto batch = m.make_batch({&sample.trace}, m.max_len());
  const std::vector<int> labels{sample.label};
  ClassifierModel grad = m.zeros_like();
  m.loss_and_grad(batch, labels, &grad);
  auto params = m.params();
  auto grads = grad.params();
  constexpr double h = 1e-4;
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat& v = *params[p].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + h;
      const double up = m.loss_and_grad(batch, labels, nullptr);
      v.data()[i] = orig - h;
      const double down = m.loss_and_grad(batch, labels, nullptr);
      v.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, nn::relative_error(grads[p].value->data()[i], numeric));
    }
  }
  return worst;
}

// ------------------------------------------------------------ checkpoint

void save_classifier(const ClassifierModel& model, const std::filesystem::path& path) {
  nn::ParamFile f;
  f.kind = "classifier";
  json meta;
  meta["mode"] = std::string(traceex::feature_mode_name(model.mode_));
  meta["num_topics"] = model.num_topics_;
  meta["max_len"] = model.max_len_;
  meta["active_inputs"] = model.code_.active;
  f.meta_json = meta.dump();
  auto& mm = const_cast<ClassifierModel&>(model);
  for (const auto& p : mm.params()) f.tensors.emplace_back(p.name, *p.value);
  nn::write_param_file(f, path);
}

ClassifierModel load_classifier(const std::filesystem::path& path) {
  const auto f = nn::read_param_file(path);
  if (f.kind != "classifier") throw Error("parameter file is not a classifier: " + path.string());
  const auto meta = json::parse(f.meta_json);
  ClassifierModel m(traceex::parse_feature_mode(meta.at("mode").get<std::string>()),
                    meta.at("num_topics").get<std::size_t>(), meta.at("max_len").get<std::size_t>(), 0);
  m.set_input_code({meta.at("active_inputs").get<std::vector<int>>()});
  for (auto& p : m.params()) {
    const auto& t = f.get(p.name);
    if (t.rows() != p.value->rows() || t.cols() != p.value->cols()) {
      throw Error("shape mismatch for tensor " + p.name);
    }
    *p.value = t;
  }
  return m;
}

}  // namespace netecho::classify
