// Small hand-differentiated network pieces shared by the classifier and the
// dual tower: a masked GRU encoder, momentum SGD and parameter files.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "netecho/common.hpp"

namespace netecho::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Named view of a parameter tensor, used by optimizers, checkpoints and
/// gradient checks.
struct ParamRef {
  std::string name;
  Mat* value;
};

/// A padded batch of feature sequences: x[t] is dim x B, mask[t] is 1 x B.
struct SeqBatch {
  std::size_t dim = 0;
  std::size_t batch = 0;
  std::vector<Mat> x;
  std::vector<Eigen::RowVectorXd> mask;
  Eigen::RowVectorXd lengths;

  std::size_t steps() const { return x.size(); }
};

struct GruCache {
  std::vector<Mat> e, z, r, n, h_prev;
  Eigen::RowVectorXd inv_len;
};

/// Linear input projection followed by a GRU whose states are mean-pooled
/// over the valid steps of each sequence. Padded steps carry the state.
class GruEncoder {
 public:
  static constexpr int kEmbed = 32;
  static constexpr int kHidden = 64;

  GruEncoder() = default;
  /// `roles` names each input channel; the column of the input projection
  /// for a channel depends only on (seed, role), so models over different
  /// channel subsets start from the same weights for shared channels.
  GruEncoder(const std::vector<std::string>& roles, std::uint64_t seed);

  std::size_t input_dim() const { return static_cast<std::size_t>(w_in.cols()); }

  Mat forward(const SeqBatch& batch, GruCache* cache) const;
  /// Accumulates parameter gradients into `grad` (same shapes as *this).
  void backward(const SeqBatch& batch, const GruCache& cache, const Mat& d_pooled,
                GruEncoder& grad) const;

  GruEncoder zeros_like() const;
  std::vector<ParamRef> params(const std::string& prefix);

  Mat w_in, b_in;   // kEmbed x F, kEmbed x 1
  Mat w, u_zr, u_n; // 3H x kEmbed, 2H x H, H x H
  Mat b;            // 3H x 1, rows [z; r; n]
};

/// Uniform(-scale, scale) initialization from a dedicated seed.
Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double scale, std::uint64_t seed);

/// SGD with momentum and global-norm gradient clipping.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum, double clip_norm)
      : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {}

  /// params[i] and grads[i] must refer to tensors of equal shape.
  void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads);
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  double clip_norm_;
  std::vector<Mat> velocity_;
};

/// Adam with bias correction and global-norm gradient clipping.
class Adam {
 public:
  Adam(double lr, double clip_norm, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), clip_norm_(clip_norm), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef>& params, const std::vector<ParamRef>& grads);

 private:
  double lr_, clip_norm_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

/// Relative error used by every gradient check.
double relative_error(double analytic, double numeric);

// Parameter file: a magic line, one JSON manifest line
// {"kind":..,"meta":{..},"tensors":[{"name","rows","cols"}]}, then every
// tensor as little-endian float64 in column-major order.
struct ParamFile {
  std::string kind;
  std::string meta_json = "{}";
  std::vector<std::pair<std::string, Mat>> tensors;

  const Mat& get(const std::string& name) const;
};

void write_param_file(const ParamFile& f, const std::filesystem::path& path);
ParamFile read_param_file(const std::filesystem::path& path);

}  // namespace netecho::nn
