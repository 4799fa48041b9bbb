#include "netecho/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cctype>
#include <numeric>

#include "json_io.hpp"
#include "netecho/common.hpp"

namespace netecho::retrieval {

using json = nlohmann::json;
using traceex::SideTrace;

// ---------------------------------------------------------------- QueryDB

namespace {

json record_to_json(const QueryRecord& r) {
  return json{{"id", r.conversation.id},
              {"prompt", r.conversation.prompt},
              {"response", r.conversation.response},
              {"topic", r.topic},
              {"origin", r.origin.is_probe() ? json("probe")
                                             : json("refined:" + std::to_string(r.origin.iteration))},
              {"packet_trace", jsonio::to_json(r.packet_trace)},
              {"side_trace", jsonio::to_json(r.side_trace)}};
}

Origin parse_origin(const std::string& s) {
  if (s == "probe") return {};
  constexpr std::string_view kPrefix = "refined:";
  if (s.rfind(kPrefix, 0) == 0) {
    try {
      const int it = std::stoi(s.substr(kPrefix.size()));
      if (it >= 1) return {it};
    } catch (const std::exception&) {
    }
  }
  throw Error("bad origin \"" + s + "\"");
}

QueryRecord record_from_json(const json& j) {
  for (const char* key : {"id", "prompt", "response", "topic", "origin", "packet_trace", "side_trace"}) {
    if (!j.contains(key)) throw Error(std::string("missing field \"") + key + "\"");
  }
  QueryRecord r;
  r.conversation.id = j["id"].get<std::string>();
  r.conversation.prompt = j["prompt"].get<std::string>();
  r.conversation.response = j["response"].get<std::string>();
  r.topic = j["topic"].get<int>();
  r.conversation.topic = r.topic;
  r.origin = parse_origin(j["origin"].get<std::string>());
  r.packet_trace = jsonio::packet_trace_from(j["packet_trace"]);
  r.side_trace = jsonio::side_trace_from(j["side_trace"]);
  return r;
}

}  // namespace

void write_query_db(const QueryDB& db, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write query db " + path.string());
  out << json{{"netecho_querydb", 1}, {"version", db.version}, {"topic_names", db.topic_names}}.dump()
      << '\n';
  for (const auto& r : db.records) out << record_to_json(r).dump() << '\n';
  if (!out) throw Error("failed writing query db " + path.string());
}

QueryDB read_query_db(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read query db " + path.string());
  QueryDB db;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "query db line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      throw Error(where + "malformed JSON");
    }
    try {
      if (!header) {
        if (!j.contains("netecho_querydb") || j["netecho_querydb"] != 1) {
          throw Error("not a query db header");
        }
        db.version = j.value("version", 0);
        db.topic_names = j.value("topic_names", std::vector<std::string>{});
        header = true;
        continue;
      }
      db.records.push_back(record_from_json(j));
    } catch (const Error& e) {
      throw Error(where + e.what());
    } catch (const json::exception& e) {
      throw Error(where + e.what());
    }
  }
  if (!header) throw Error("query db " + path.string() + " has no header");
  return db;
}

// --------------------------------------------------------------- towers

std::vector<std::uint32_t> text_buckets(std::string_view text) {
  std::vector<std::uint32_t> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(static_cast<std::uint32_t>(fnv1a(word) % kHashBuckets));
      word.clear();
    }
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

namespace {

constexpr auto kD = static_cast<Eigen::Index>(kEmbedDim);
constexpr auto kH = static_cast<Eigen::Index>(nn::GruEncoder::kHidden);

Mat normalize_cols(const Mat& m, Eigen::RowVectorXd* norms = nullptr) {
  Mat out = m;
  Eigen::RowVectorXd n(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    n(j) = std::max(m.col(j).norm(), 1e-12);
    out.col(j) /= n(j);
  }
  if (norms) *norms = n;
  return out;
}

// Gradient through x -> x / |x| for each column.
Mat normalize_backward(const Mat& unit, const Eigen::RowVectorXd& norms, const Mat& d_unit) {
  Mat d = d_unit;
  for (Eigen::Index j = 0; j < d.cols(); ++j) {
    d.col(j) = (d_unit.col(j) - unit.col(j) * unit.col(j).dot(d_unit.col(j))) / norms(j);
  }
  return d;
}

}  // namespace

DualTower::DualTower(const classify::ClassifierModel& pretrained, std::uint64_t seed,
                     double temperature)
    : trace_base(pretrained), temperature_(temperature) {
  if (!(temperature > 0)) throw Error("temperature must be > 0");
  const double ps = std::sqrt(6.0 / static_cast<double>(kD + kH));
  trace_proj = nn::uniform_init(kD, kH, ps, derive_seed(seed, "dual/trace_proj"));
  trace_bias = nn::uniform_init(kD, 1, 0.1, derive_seed(seed, "dual/trace_bias"));
  table = nn::uniform_init(kD, static_cast<Eigen::Index>(kHashBuckets), 0.5,
                           derive_seed(seed, "dual/table"));
  const double ws = std::sqrt(6.0 / static_cast<double>(2 * kD));
  w1 = nn::uniform_init(kD, kD, ws, derive_seed(seed, "dual/w1"));
  b1 = nn::uniform_init(kD, 1, 0.1, derive_seed(seed, "dual/b1"));
  w2 = nn::uniform_init(kD, kD, ws, derive_seed(seed, "dual/w2"));
  b2 = nn::uniform_init(kD, 1, 0.1, derive_seed(seed, "dual/b2"));
}

Mat DualTower::trace_raw(const nn::SeqBatch& batch, nn::GruCache* cache, Mat* pooled) const {
  Mat p = trace_base.encoder.forward(batch, cache);
  Mat u = trace_proj * p;
  u.colwise() += trace_bias.col(0);
  if (pooled) *pooled = std::move(p);
  return u;
}

Mat DualTower::text_raw(const std::vector<std::string_view>& texts, Mat* mean, Mat* hidden) const {
  const auto b = static_cast<Eigen::Index>(texts.size());
  Mat m = Mat::Zero(kD, b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto buckets = text_buckets(texts[static_cast<std::size_t>(j)]);
    for (auto k : buckets) m.col(j) += table.col(k);
    if (!buckets.empty()) m.col(j) /= static_cast<double>(buckets.size());
  }
  Mat a = w1 * m;
  a.colwise() += b1.col(0);
  Mat z = a.array().tanh().matrix();
  Mat v = w2 * z;
  v.colwise() += b2.col(0);
  if (mean) *mean = std::move(m);
  if (hidden) *hidden = std::move(z);
  return v;
}

std::vector<Vec> DualTower::embed_traces(const std::vector<const SideTrace*>& traces) const {
  std::vector<Vec> out;
  out.reserve(traces.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < traces.size(); s += kChunk) {
    const std::vector<const SideTrace*> part(traces.begin() + static_cast<std::ptrdiff_t>(s),
                                             traces.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(traces.size(), s + kChunk)));
    const Mat u = normalize_cols(trace_raw(trace_base.make_batch(part, 0), nullptr, nullptr));
    for (Eigen::Index j = 0; j < u.cols(); ++j) out.emplace_back(u.col(j));
  }
  return out;
}

Vec DualTower::embed_trace(const SideTrace& st) const { return embed_traces({&st}).front(); }

Vec DualTower::embed_text(std::string_view text) const {
  return normalize_cols(text_raw({text}, nullptr, nullptr)).col(0);
}

double infonce_loss(const Mat& sim, double temperature, Mat* d_sim) {
  if (!(temperature > 0)) throw Error("temperature must be > 0");
  if (sim.rows() != sim.cols() || sim.rows() == 0) {
    throw Error("infonce needs a square, non-empty similarity matrix");
  }
  const Eigen::Index b = sim.rows();
  const Mat s = sim / temperature;
  Mat pr(b, b), pc(b, b);
  double loss_r = 0.0, loss_c = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double mx = s.row(i).maxCoeff();
    pr.row(i) = (s.row(i).array() - mx).exp();
    const double z = pr.row(i).sum();
    pr.row(i) /= z;
    loss_r -= s(i, i) - mx - std::log(z);
  }
  for (Eigen::Index j = 0; j < b; ++j) {
    const double mx = s.col(j).maxCoeff();
    pc.col(j) = (s.col(j).array() - mx).exp();
    const double z = pc.col(j).sum();
    pc.col(j) /= z;
    loss_c -= s(j, j) - mx - std::log(z);
  }
  const auto bd = static_cast<double>(b);
  if (d_sim) {
    const Mat eye = Mat::Identity(b, b);
    *d_sim = ((pr - eye) + (pc - eye)) / (2.0 * bd * temperature);
  }
  return 0.5 * (loss_r + loss_c) / bd;
}

double DualTower::loss_and_grad(const std::vector<const SideTrace*>& traces,
                                const std::vector<std::string_view>& texts, DualTower* grad) const {
  if (traces.size() != texts.size() || traces.empty()) {
    throw Error("dual tower needs equal, non-empty trace and text batches");
  }
  const auto batch = trace_base.make_batch(traces, trace_base.max_len());
  nn::GruCache cache;
  Mat pooled;
  const Mat u = trace_raw(batch, grad ? &cache : nullptr, &pooled);
  Eigen::RowVectorXd un, vn;
  const Mat a = normalize_cols(u, &un);
  Mat mean, hidden;
  const Mat v = text_raw(texts, &mean, &hidden);
  const Mat bt = normalize_cols(v, &vn);
  const Mat sim = a.transpose() * bt;
  Mat d_sim;
  const double loss = infonce_loss(sim, temperature_, grad ? &d_sim : nullptr);
  if (!grad) return loss;

  const Mat du = normalize_backward(a, un, bt * d_sim.transpose());
  grad->trace_proj.noalias() += du * pooled.transpose();
  grad->trace_bias += du.rowwise().sum();
  const Mat d_pooled = trace_proj.transpose() * du;
  trace_base.encoder.backward(batch, cache, d_pooled, grad->trace_base.encoder);

  const Mat dv = normalize_backward(bt, vn, a * d_sim);
  grad->w2.noalias() += dv * hidden.transpose();
  grad->b2 += dv.rowwise().sum();
  const Mat dh = (w2.transpose() * dv).cwiseProduct((1.0 - hidden.array().square()).matrix());
  grad->w1.noalias() += dh * mean.transpose();
  grad->b1 += dh.rowwise().sum();
  const Mat dm = w1.transpose() * dh;
  for (std::size_t j = 0; j < texts.size(); ++j) {
    const auto buckets = text_buckets(texts[j]);
    if (buckets.empty()) continue;
    const Vec share = dm.col(static_cast<Eigen::Index>(j)) / static_cast<double>(buckets.size());
    for (auto k : buckets) grad->table.col(k) += share;
  }
  return loss;
}

DualTower DualTower::zeros_like() const {
  DualTower g;
  g.trace_base = trace_base.zeros_like();
  g.temperature_ = temperature_;
  g.trace_proj = Mat::Zero(trace_proj.rows(), trace_proj.cols());
  g.trace_bias = Mat::Zero(trace_bias.rows(), trace_bias.cols());
  g.table = Mat::Zero(table.rows(), table.cols());
  g.w1 = Mat::Zero(w1.rows(), w1.cols());
  g.b1 = Mat::Zero(b1.rows(), b1.cols());
  g.w2 = Mat::Zero(w2.rows(), w2.cols());
  g.b2 = Mat::Zero(b2.rows(), b2.cols());
  return g;
}

std::vector<nn::ParamRef> DualTower::params() {
  auto p = trace_base.encoder.params("trace.encoder.");
  p.push_back({"trace.proj", &trace_proj});
  p.push_back({"trace.bias", &trace_bias});
  p.push_back({"text.table", &table});
  p.push_back({"text.w1", &w1});
  p.push_back({"text.b1", &b1});
  p.push_back({"text.w2", &w2});
  p.push_back({"text.b2", &b2});
  return p;
}

void DualTrainConfig::validate() const {
  if (!(lr > 0)) throw Error("dual tower learning rate must be > 0");
  if (epochs < 0) throw Error("epochs must be >= 0");
  if (batch_size < 2) throw Error("dual tower batch size must be >= 2");
  if (!(temperature > 0)) throw Error("temperature must be > 0");
}

namespace {

double mean_db_loss(const DualTower& model, const QueryDB& db, std::size_t batch_size) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < db.size(); s += batch_size) {
    std::vector<const SideTrace*> traces;
    std::vector<std::string_view> texts;
    for (std::size_t i = s; i < std::min(db.size(), s + batch_size); ++i) {
      traces.push_back(&db.records[i].side_trace);
      texts.push_back(db.records[i].conversation.response);
    }
    total += model.loss_and_grad(traces, texts, nullptr) * static_cast<double>(traces.size());
    n += traces.size();
  }
  return total / static_cast<double>(std::max<std::size_t>(n, 1));
}

}  // namespace

DualTower train_dual_tower(const QueryDB& db, const classify::ClassifierModel& pretrained,
                           const DualTrainConfig& cfg, DualTrainReport* report) {
  cfg.validate();
  if (db.size() < 2) throw Error("dual tower training needs at least 2 records");
  DualTower model(pretrained, cfg.seed, cfg.temperature);
  DualTrainReport local;
  DualTrainReport& rep = report ? *report : local;
  rep = DualTrainReport{};
  rep.epoch_loss.push_back(mean_db_loss(model, db, cfg.batch_size));

  nn::Adam opt(cfg.lr, cfg.clip_norm);
  Rng order_rng(derive_seed(cfg.seed, "dual/order"));
  std::vector<std::size_t> order(db.size());
  std::iota(order.begin(), order.end(), 0);
  DualTower grad = model.zeros_like();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t s = 0; s + 1 < order.size(); s += cfg.batch_size) {
      std::vector<const SideTrace*> traces;
      std::vector<std::string_view> texts;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) {
        traces.push_back(&db.records[order[i]].side_trace);
        texts.push_back(db.records[order[i]].conversation.response);
      }
      if (traces.size() < 2) continue;
      for (auto& p : grad.params()) p.value->setZero();
      const double loss = model.loss_and_grad(traces, texts, &grad);
      if (!std::isfinite(loss)) {
        throw Error("dual tower training diverged (NaN loss) at epoch " + std::to_string(epoch));
      }
      opt.step(model.params(), grad.params());
    }
    rep.epoch_loss.push_back(mean_db_loss(model, db, cfg.batch_size));
  }
  return model;
}

double self_retrieval_recall(const DualTower& model, const QueryDB& db) {
  if (db.empty()) return 0.0;
  std::vector<const SideTrace*> traces;
  for (const auto& r : db.records) traces.push_back(&r.side_trace);
  const auto tv = model.embed_traces(traces);
  Mat text(kD, static_cast<Eigen::Index>(db.size()));
  for (std::size_t i = 0; i < db.size(); ++i) {
    text.col(static_cast<Eigen::Index>(i)) = model.embed_text(db.records[i].conversation.response);
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const Eigen::RowVectorXd s = tv[i].transpose() * text;
    Eigen::Index best = 0;
    s.maxCoeff(&best);
    if (static_cast<std::size_t>(best) == i) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(db.size());
}

double dual_grad_check(const DualTower& model, const std::vector<const SideTrace*>& traces,
                       const std::vector<std::string_view>& texts) {
  DualTower m = model;
  DualTower grad = m.zeros_like();
  m.loss_and_grad(traces, texts, &grad);
  std::vector<std::uint32_t> touched;
  for (auto t : texts) {
    for (auto k : text_buckets(t)) touched.push_back(k);
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());

  constexpr double h = 1e-5;
  double worst = 0.0;
  auto check = [&](Mat& v, const Mat& g, Eigen::Index i) {
    const double orig = v.data()[i];
    v.data()[i] = orig + h;
    const double up = m.loss_and_grad(traces, texts, nullptr);
    v.data()[i] = orig - h;
    const double down = m.loss_and_grad(traces, texts, nullptr);
    v.data()[i] = orig;
    worst = std::max(worst, nn::relative_error(g.data()[i], (up - down) / (2 * h)));
  };
  auto params = m.params();
  auto grads = grad.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat& v = *params[p].value;
    if (params[p].value == &m.table) {
      for (auto k : touched) {
        for (Eigen::Index r = 0; r < v.rows(); ++r) check(v, *grads[p].value, k * v.rows() + r);
      }
    } else {
      for (Eigen::Index i = 0; i < v.size(); ++i) check(v, *grads[p].value, i);
    }
  }
  return worst;
}

void save_dual_tower(const DualTower& model, const std::filesystem::path& path) {
  nn::ParamFile f;
  f.kind = "dual_tower";
  const auto& base = model.trace_base;
  json meta;
  meta["mode"] = std::string(traceex::feature_mode_name(base.mode()));
  meta["num_topics"] = base.num_topics();
  meta["max_len"] = base.max_len();
  meta["active_inputs"] = base.input_code().active;
  meta["temperature"] = model.temperature_;
  f.meta_json = meta.dump();
  auto& mm = const_cast<DualTower&>(model);
  for (const auto& p : mm.params()) f.tensors.emplace_back(p.name, *p.value);
  nn::write_param_file(f, path);
}

DualTower load_dual_tower(const std::filesystem::path& path) {
  const auto f = nn::read_param_file(path);
  if (f.kind != "dual_tower") throw Error("parameter file is not a dual tower: " + path.string());
  const auto meta = json::parse(f.meta_json);
  classify::ClassifierModel base(traceex::parse_feature_mode(meta.at("mode").get<std::string>()),
                                 meta.at("num_topics").get<std::size_t>(),
                                 meta.at("max_len").get<std::size_t>(), 0);
  base.set_input_code({meta.at("active_inputs").get<std::vector<int>>()});
  DualTower m(base, 0, meta.at("temperature").get<double>());
  for (auto& p : m.params()) {
    const auto& t = f.get(p.name);
    if (t.rows() != p.value->rows() || t.cols() != p.value->cols()) {
      throw Error("shape mismatch for tensor " + p.name);
    }
    *p.value = t;
  }
  return m;
}

// ------------------------------------------------------------ retrieval

double cosine(const Vec& a, const Vec& b) {
  const double d = a.norm() * b.norm();
  return d > 0 ? std::clamp(a.dot(b) / d, -1.0, 1.0) : 0.0;
}

double trace_distance(const DualTower& model, const SideTrace& a, const SideTrace& b) {
  const auto v = model.embed_traces({&a, &b});
  return 1.0 - cosine(v[0], v[1]);
}

DbIndex::DbIndex(const DualTower& model, const QueryDB& db) : model_(&model) {
  std::vector<const SideTrace*> traces;
  traces.reserve(db.size());
  for (const auto& r : db.records) traces.push_back(&r.side_trace);
  vecs_ = model.embed_traces(traces);
}

void DbIndex::add(const QueryRecord& rec) { vecs_.push_back(model_->embed_trace(rec.side_trace)); }

std::vector<Hit> retrieve(const DbIndex& index, const QueryDB& db, const SideTrace& st,
                          std::size_t g, const TopicFilter& filter) {
  if (db.empty()) throw Error("retrieve from an empty query db");
  if (index.size() != db.size()) throw Error("retrieval index is out of date with the query db");
  if (g > db.size()) throw Error("retrieve: g exceeds the query db size");
  const Vec q = index.model().embed_trace(st);
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < db.size(); ++i) {
    if (filter && std::find(filter->begin(), filter->end(), db.records[i].topic) == filter->end()) {
      continue;
    }
    hits.push_back({i, cosine(q, index.vec(i))});
  }
  const auto better = [&](const Hit& a, const Hit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return db.records[a.index].id() < db.records[b.index].id();
  };
  const auto keep = std::min(g, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                    better);
  hits.resize(keep);
  return hits;
}

std::vector<Hit> retrieve(const DualTower& model, const QueryDB& db, const SideTrace& st,
                          std::size_t g, const TopicFilter& filter) {
  if (db.empty()) throw Error("retrieve from an empty query db");
  return retrieve(DbIndex(model, db), db, st, g, filter);
}

std::vector<int> topic_filter(const classify::ClassifierModel& classifier, const SideTrace& st,
                              bool widen) {
  return classifier.predict_topk(st, widen ? std::min<std::size_t>(3, classifier.num_topics()) : 1);
}

std::vector<const QueryRecord*> rank_gradient(const DualTower& model, const SideTrace& st,
                                              const std::vector<const QueryRecord*>& candidates) {
  std::vector<const SideTrace*> traces{&st};
  for (const auto* c : candidates) traces.push_back(&c->side_trace);
  const auto v = model.embed_traces(traces);
  std::vector<std::pair<double, const QueryRecord*>> scored;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    scored.emplace_back(cosine(v[0], v[i + 1]), candidates[i]);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second->id() > b.second->id();
  });
  std::vector<const QueryRecord*> out;
  for (const auto& [s, r] : scored) out.push_back(r);
  return out;
}

double ood_score(std::string_view victim_text, const std::vector<std::string>& train_texts,
                 const DualTower& model) {
  if (train_texts.empty()) throw Error("ood_score needs training texts");
  const Vec v = model.embed_text(victim_text);
  double best = -1.0;
  for (const auto& t : train_texts) best = std::max(best, cosine(v, model.embed_text(t)));
  return std::clamp(1.0 - best, 0.0, 1.0);
}

}  // namespace netecho::retrieval
