#include "netecho/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

namespace netecho::nn {

using json = nlohmann::json;

namespace {

Mat sigmoid(const Mat& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

}  // namespace

Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double scale, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * rng.uniform() - 1.0) * scale;
  }
  return m;
}

GruEncoder::GruEncoder(const std::vector<std::string>& roles, std::uint64_t seed) {
  const auto f = static_cast<Eigen::Index>(roles.size());
  // The scale is fixed (not fan-in based) so it does not depend on F.
  const double in_scale = std::sqrt(6.0 / (3.0 + kEmbed));
  w_in.resize(kEmbed, f);
  for (Eigen::Index c = 0; c < f; ++c) {
    w_in.col(c) = uniform_init(kEmbed, 1, in_scale,
                               derive_seed(seed, "gru/w_in/" + roles[static_cast<std::size_t>(c)]));
  }
  b_in = Mat::Zero(kEmbed, 1);
  const double ws = std::sqrt(6.0 / (kEmbed + kHidden));
  const double us = std::sqrt(6.0 / (2.0 * kHidden));
  w = uniform_init(3 * kHidden, kEmbed, ws, derive_seed(seed, "gru/w"));
  u_zr = uniform_init(2 * kHidden, kHidden, us, derive_seed(seed, "gru/u_zr"));
  u_n = uniform_init(kHidden, kHidden, us, derive_seed(seed, "gru/u_n"));
  b = Mat::Zero(3 * kHidden, 1);
}

Mat GruEncoder::forward(const SeqBatch& batch, GruCache* cache) const {
  const Eigen::Index bsz = static_cast<Eigen::Index>(batch.batch);
  const Eigen::Index hid = kHidden;
  Mat h = Mat::Zero(hid, bsz);
  Mat pooled = Mat::Zero(hid, bsz);
  Eigen::RowVectorXd inv_len(bsz);
  for (Eigen::Index j = 0; j < bsz; ++j) {
    inv_len(j) = batch.lengths(j) > 0 ? 1.0 / batch.lengths(j) : 0.0;
  }
  if (cache) {
    const auto t = batch.steps();
    cache->e.resize(t);
    cache->z.resize(t);
    cache->r.resize(t);
    cache->n.resize(t);
    cache->h_prev.resize(t);
    cache->inv_len = inv_len;
  }
  for (std::size_t t = 0; t < batch.steps(); ++t) {
    Mat e = w_in * batch.x[t];
    e.colwise() += b_in.col(0);
    Mat a = w * e;
    a.colwise() += b.col(0);
    a.topRows(2 * hid) += u_zr * h;
    const Mat z = sigmoid(a.topRows(hid));
    const Mat r = sigmoid(a.middleRows(hid, hid));
    const Mat rh = r.cwiseProduct(h);
    const Mat n = (a.bottomRows(hid) + u_n * rh).array().tanh().matrix();
    const auto& m = batch.mask[t];
    Mat hc = n + z.cwiseProduct(h - n);
    Mat h_new = h + (hc - h) * m.asDiagonal();
    if (cache) {
      cache->e[t] = std::move(e);
      cache->z[t] = z;
      cache->r[t] = r;
      cache->n[t] = n;
      cache->h_prev[t] = h;
    }
    h = std::move(h_new);
    pooled += h * (m.cwiseProduct(inv_len)).asDiagonal();
  }
  return pooled;
}

void GruEncoder::backward(const SeqBatch& batch, const GruCache& cache, const Mat& d_pooled,
                          GruEncoder& grad) const {
  const Eigen::Index hid = kHidden;
  const Eigen::Index bsz = static_cast<Eigen::Index>(batch.batch);
  Mat dh = Mat::Zero(hid, bsz);
  Mat da(3 * hid, bsz);
  for (std::size_t ti = batch.steps(); ti-- > 0;) {
    const auto& m = batch.mask[ti];
    dh += d_pooled * (m.cwiseProduct(cache.inv_len)).asDiagonal();
    const Mat& z = cache.z[ti];
    const Mat& r = cache.r[ti];
    const Mat& n = cache.n[ti];
    const Mat& hp = cache.h_prev[ti];
    const Mat dhc = dh * m.asDiagonal();
    Mat dh_prev = dh - dhc;
    const Mat dn = dhc.cwiseProduct((1.0 - z.array()).matrix());
    const Mat dz = dhc.cwiseProduct(hp - n);
    dh_prev += dhc.cwiseProduct(z);
    auto da_n = da.bottomRows(hid);
    da_n = dn.cwiseProduct((1.0 - n.array().square()).matrix());
    const Mat rh = r.cwiseProduct(hp);
    grad.u_n.noalias() += da_n * rh.transpose();
    const Mat drh = u_n.transpose() * da_n;
    dh_prev += drh.cwiseProduct(r);
    const Mat dr = drh.cwiseProduct(hp);
    da.middleRows(hid, hid) = dr.cwiseProduct((r.array() * (1.0 - r.array())).matrix());
    da.topRows(hid) = dz.cwiseProduct((z.array() * (1.0 - z.array())).matrix());
    grad.u_zr.noalias() += da.topRows(2 * hid) * hp.transpose();
    dh_prev.noalias() += u_zr.transpose() * da.topRows(2 * hid);
    grad.w.noalias() += da * cache.e[ti].transpose();
    grad.b += da.rowwise().sum();
    const Mat de = w.transpose() * da;
    grad.w_in.noalias() += de * batch.x[ti].transpose();
    grad.b_in += de.rowwise().sum();
    dh = std::move(dh_prev);
  }
}

GruEncoder GruEncoder::zeros_like() const {
  GruEncoder g;
  g.w_in = Mat::Zero(w_in.rows(), w_in.cols());
  g.b_in = Mat::Zero(b_in.rows(), b_in.cols());
  g.w = Mat::Zero(w.rows(), w.cols());
  g.u_zr = Mat::Zero(u_zr.rows(), u_zr.cols());
  g.u_n = Mat::Zero(u_n.rows(), u_n.cols());
  g.b = Mat::Zero(b.rows(), b.cols());
  return g;
}

std::vector<ParamRef> GruEncoder::params(const std::string& prefix) {
  return {{prefix + "w_in", &w_in}, {prefix + "b_in", &b_in}, {prefix + "w", &w},
          {prefix + "u_zr", &u_zr}, {prefix + "u_n", &u_n},   {prefix + "b", &b}};
}

void MomentumSgd::step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads) {
  if (params.size() != grads.size()) throw Error("optimizer: parameter/gradient count mismatch");
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
  }
  double sq = 0.0;
  for (const auto& g : grads) sq += g.value->squaredNorm();
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm_ > 0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] - lr_ * scale * *grads[i].value;
    *params[i].value += velocity_[i];
  }
}

void Adam::step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads) {
  if (params.size() != grads.size()) throw Error("optimizer: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
    }
  }
  double sq = 0.0;
  for (const auto& g : grads) sq += g.value->squaredNorm();
  const double norm = std::sqrt(sq);
  const double scale = (clip_norm_ > 0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = (*grads[i].value * scale).array();
    m_[i].array() = beta1_ * m_[i].array() + (1.0 - beta1_) * g;
    v_[i].array() = beta2_ * v_[i].array() + (1.0 - beta2_) * g.square();
    params[i].value->array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric));
}

// ------------------------------------------------------------ param files

namespace {
constexpr std::string_view kMagic = "NETECHO-PARAMS v1";
static_assert(std::endian::native == std::endian::little,
              "parameter files are written in little-endian byte order");
}  // namespace

const Mat& ParamFile::get(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw Error("parameter file has no tensor '" + name + "'");
}

void write_param_file(const ParamFile& f, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write parameter file " + path.string());
  json manifest;
  manifest["kind"] = f.kind;
  manifest["meta"] = json::parse(f.meta_json);
  manifest["tensors"] = json::array();
  for (const auto& [name, m] : f.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  out << kMagic << '\n' << manifest.dump() << '\n';
  for (const auto& [name, m] : f.tensors) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing parameter file " + path.string());
}

ParamFile read_param_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read parameter file " + path.string());
  std::string magic, manifest_line;
  std::getline(in, magic);
  if (magic != kMagic) throw Error("not a netecho parameter file: " + path.string());
  std::getline(in, manifest_line);
  json manifest;
  try {
    manifest = json::parse(manifest_line);
  } catch (const json::parse_error&) {
    throw Error("corrupt parameter manifest in " + path.string());
  }
  ParamFile f;
  f.kind = manifest.at("kind").get<std::string>();
  f.meta_json = manifest.at("meta").dump();
  for (const auto& t : manifest.at("tensors")) {
    Mat m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw Error("truncated parameter file " + path.string());
    f.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return f;
}

}  // namespace netecho::nn
