#pragma once

// The parametric memory module: a channel-shared quantile forecaster in two
// families. linear_patch is a patched linear map with closed-form gradients
// (smoke-test and oracle tier); tiny_transformer is a pre-norm encoder with
// horizon-query cross-attention decoder. Both run under instance
// normalization and carry hand-written reverse-mode gradients.

#include "tsmem/core.hpp"
#include "tsmem/io.hpp"
#include "tsmem/losses.hpp"
#include "tsmem/rng.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace tsmem {

enum class StudentFamily : std::uint8_t { linear_patch = 0, tiny_transformer = 1 };

struct StudentConfig {
  StudentFamily family = StudentFamily::tiny_transformer;
  int lookback = 96;
  int horizon = 24;
  int patch_len = 8;
  int width = 32;
  int encoder_layers = 2;
  int decoder_layers = 1;
  int heads = 2;
  int quantiles = 9;
  bool use_periodicity = false;
  int period = 0;
  std::uint64_t seed = 1;

  void validate() const {
    detail::require(lookback >= 1 && horizon >= 1 && quantiles >= 1,
                    "StudentConfig: L, H, Q must be >= 1");
    detail::require(patch_len >= 1 && patch_len <= lookback,
                    "StudentConfig: patch length must lie in [1, L]");
    detail::require(width >= 1, "StudentConfig: width must be >= 1");
    detail::require(heads >= 1 && width % heads == 0,
                    "StudentConfig: width must be divisible by heads");
    detail::require(encoder_layers >= 1 && decoder_layers >= 1,
                    "StudentConfig: layer counts must be >= 1");
    if (use_periodicity)
      detail::require(period >= 1,
                      "StudentConfig: periodicity enabled without a period");
  }

  int patch_count() const { return (lookback + patch_len - 1) / patch_len; }
  int token_input_dim() const { return patch_len + (use_periodicity ? 2 : 0); }
};

// ---------------------------------------------------------------------------
// Flat parameter array with named, disjoint slices and seeded init.

class ParameterStore {
 public:
  enum class Init : std::uint8_t { zeros, ones, uniform_fanin, normal_002 };

  struct Slice {
    std::string name;
    std::size_t offset = 0;
    long rows = 0, cols = 0;
    Init init = Init::zeros;
    std::size_t count() const { return static_cast<std::size_t>(rows) * cols; }
  };

  std::size_t add(std::string name, long rows, long cols, Init init) {
    Slice s;
    s.name = std::move(name);
    s.offset = total_;
    s.rows = rows;
    s.cols = cols;
    s.init = init;
    total_ += s.count();
    slices_.push_back(std::move(s));
    return slices_.size() - 1;
  }

  void initialize(std::uint64_t seed) {
    init_seed_ = seed;
    data_.assign(total_, 0.0);
    Rng rng(seed);
    for (const Slice& s : slices_) {
      double* p = data_.data() + s.offset;
      switch (s.init) {
        case Init::zeros:
          break;
        case Init::ones:
          for (std::size_t i = 0; i < s.count(); ++i) p[i] = 1.0;
          break;
        case Init::uniform_fanin: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
          for (std::size_t i = 0; i < s.count(); ++i)
            p[i] = rng.uniform(-bound, bound);
          break;
        }
        case Init::normal_002:
          for (std::size_t i = 0; i < s.count(); ++i)
            p[i] = rng.normal() * 0.02;
          break;
      }
    }
    ++revision_;
  }

  Eigen::Map<const Matrix> view(std::size_t id) const {
    const Slice& s = slices_[id];
    return Eigen::Map<const Matrix>(data_.data() + s.offset, s.rows, s.cols);
  }

  Eigen::Map<Matrix> view_mut(std::size_t id) {
    const Slice& s = slices_[id];
    ++revision_;
    return Eigen::Map<Matrix>(data_.data() + s.offset, s.rows, s.cols);
  }

  // Gradient (or any parallel buffer) view through the same layout.
  Eigen::Map<Matrix> view_in(std::vector<double>& buf, std::size_t id) const {
    const Slice& s = slices_[id];
    return Eigen::Map<Matrix>(buf.data() + s.offset, s.rows, s.cols);
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data_mut() {
    ++revision_;
    return data_;
  }
  std::size_t size() const { return total_; }
  const std::vector<Slice>& slices() const { return slices_; }
  std::uint64_t revision() const { return revision_; }
  std::uint64_t init_seed() const { return init_seed_; }

 private:
  std::vector<Slice> slices_;
  std::vector<double> data_;
  std::size_t total_ = 0;
  std::uint64_t revision_ = 0;
  std::uint64_t init_seed_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable primitives with explicit caches.

namespace nnops {

inline constexpr double kLnEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

inline Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias,
                         LayerNormCache& cache) {
  const long R = x.rows(), D = x.cols();
  cache.xhat.resize(R, D);
  cache.rstd.resize(R);
  Matrix y(R, D);
  for (long r = 0; r < R; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd[r] = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mu) * rstd;
    y.row(r) = cache.xhat.row(r).array() * gain.transpose().array() +
               bias.transpose().array();
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Vector& gain,
                                  const LayerNormCache& cache, Vector& dgain,
                                  Vector& dbias) {
  const long R = dy.rows(), D = dy.cols();
  Matrix dx(R, D);
  for (long r = 0; r < R; ++r) {
    dgain += (dy.row(r).array() * cache.xhat.row(r).array()).matrix().transpose();
    dbias += dy.row(r).transpose();
    Eigen::RowVectorXd dxhat = dy.row(r).array() * gain.transpose().array();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * cache.xhat.row(r).array()).mean();
    dx.row(r) =
        (dxhat.array() - m1 - cache.xhat.row(r).array() * m2) * cache.rstd[r];
  }
  return dx;
}

inline Matrix softmax_rows(const Matrix& s) {
  Matrix p(s.rows(), s.cols());
  for (long r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    Eigen::RowVectorXd e = (s.row(r).array() - m).exp();
    p.row(r) = e / e.sum();
  }
  return p;
}

inline Matrix softmax_rows_backward(const Matrix& p, const Matrix& dp) {
  Matrix ds(p.rows(), p.cols());
  for (long r = 0; r < p.rows(); ++r) {
    const double dot = (dp.row(r).array() * p.row(r).array()).sum();
    ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
  }
  return ds;
}

inline double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  constexpr double a = 0.044715;
  const double t = std::tanh(c * (x + a * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x);
}

}  // namespace nnops

// ---------------------------------------------------------------------------
// Workspace: per-forward activation cache (one per worker thread).

struct StudentWorkspace {
  bool prepared = false;
  std::uint64_t params_revision = 0;
  long anchor = 0;
  NormStats stats;
  Matrix context;

  struct AttentionCache {
    nnops::LayerNormCache ln;
    Matrix a;                   // normalized query-side input
    Matrix qm, km, vm;          // projected q / k / v
    std::vector<Matrix> probs;  // per-head softmax rows
    Matrix ocat;                // concatenated head outputs
  };
  struct FfnCache {
    nnops::LayerNormCache ln;
    Matrix b;   // normalized input
    Matrix f1;  // pre-activation
    Matrix g;   // gelu(f1)
  };
  struct EncoderLayerCache {
    Matrix z_in;
    AttentionCache attn;
    Matrix z_mid;
    FfnCache ffn;
  };
  struct DecoderLayerCache {
    Matrix y_in;
    AttentionCache attn;
    Matrix y_mid;
    FfnCache ffn;
  };
  struct ChannelCache {
    Matrix patch_input;  // n_p x p_in
    Matrix tokens;       // n_p x d (after projection + positional terms)
    std::vector<EncoderLayerCache> enc;
    Matrix z_enc;        // final encoder output
    std::vector<DecoderLayerCache> dec;
    Matrix y_final;      // H x d
    Vector pooled;       // linear_patch only
    Matrix out_norm;     // H x Q, pre-denormalization
  };
  std::vector<ChannelCache> channels;
};

// ---------------------------------------------------------------------------

class Student {
 public:
  Student(StudentConfig cfg, QuantileLevels levels)
      : cfg_(cfg), levels_(std::move(levels)) {
    cfg_.validate();
    detail::require(levels_.count() == cfg_.quantiles,
                    "Student: level grid size must match config quantiles");
    build_layout();
    params_.initialize(cfg_.seed);
  }

  const StudentConfig& config() const { return cfg_; }
  const QuantileLevels& levels() const { return levels_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  // Raw-scale forward with activation caching for a later backward pass.
  QTensor forward(const Matrix& context, long anchor,
                  StudentWorkspace& ws) const {
    detail::require(context.rows() == cfg_.lookback,
                    "Student: context length mismatch");
    const long C = context.cols();
    ws.anchor = anchor;
    ws.context = context;
    ws.channels.assign(C, {});
    auto [norm, stats] = instance_normalize(context);
    ws.stats = stats;

    QTensor out = qtensor_zeros(cfg_.quantiles, cfg_.horizon, C);
    for (long c = 0; c < C; ++c) {
      auto& cc = ws.channels[c];
      cc.patch_input = patchify(norm.col(c), anchor);
      if (cfg_.family == StudentFamily::linear_patch)
        forward_linear(cc);
      else
        forward_transformer(cc);
      for (int j = 0; j < cfg_.quantiles; ++j)
        for (int h = 0; h < cfg_.horizon; ++h)
          out[j](h, c) =
              cc.out_norm(h, j) * (stats.std[c] + stats.eps) + stats.mean[c];
    }
    ws.prepared = true;
    ws.params_revision = params_.revision();
    return out;
  }

  // Accumulates d<upstream, forward>/d(params) into param_grad (pre-sized,
  // caller-zeroed). Requires a workspace prepared by forward() against the
  // current parameter revision.
  void backward(const QTensor& upstream, StudentWorkspace& ws,
                std::vector<double>& param_grad) const {
    if (!ws.prepared || ws.params_revision != params_.revision())
      throw std::runtime_error("Student::backward: stale activation cache");
    detail::require(param_grad.size() == params_.size(),
                    "Student::backward: gradient buffer size mismatch");
    const long C = ws.context.cols();
    for (long c = 0; c < C; ++c) {
      auto& cc = ws.channels[c];
      // Denormalization is affine; the scale folds into the upstream.
      Matrix g_norm(cfg_.horizon, cfg_.quantiles);
      for (int j = 0; j < cfg_.quantiles; ++j)
        for (int h = 0; h < cfg_.horizon; ++h)
          g_norm(h, j) = upstream[j](h, c) * (ws.stats.std[c] + ws.stats.eps);
      if (cfg_.family == StudentFamily::linear_patch)
        backward_linear(cc, g_norm, param_grad);
      else
        backward_transformer(cc, g_norm, param_grad);
    }
  }

  QuantileForecast forecast(const Matrix& context, long anchor = 0) const {
    StudentWorkspace ws;
    QTensor out = forward(context, anchor, ws);
    QuantileForecast qf;
    qf.levels = levels_;
    qf.values = std::move(out);
    return qf;
  }

  void save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.magic("TSMP");
    w.u16(1);
    w.u8(static_cast<std::uint8_t>(cfg_.family));
    w.u32(static_cast<std::uint32_t>(cfg_.lookback));
    w.u32(static_cast<std::uint32_t>(cfg_.horizon));
    w.u32(static_cast<std::uint32_t>(cfg_.patch_len));
    w.u32(static_cast<std::uint32_t>(cfg_.width));
    w.u32(static_cast<std::uint32_t>(cfg_.encoder_layers));
    w.u32(static_cast<std::uint32_t>(cfg_.decoder_layers));
    w.u32(static_cast<std::uint32_t>(cfg_.heads));
    w.u32(static_cast<std::uint32_t>(cfg_.quantiles));
    w.u8(cfg_.use_periodicity ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(cfg_.period));
    w.u64(cfg_.seed);
    for (double q : levels_.levels) w.f64(q);
    w.u64(params_.size());
    for (double v : params_.data()) w.f64(v);
    w.save(path);
  }

  static Student load(const std::filesystem::path& path) {
    ByteReader r = ByteReader::load(path);
    r.expect_magic("TSMP");
    if (r.u16() != 1) throw std::runtime_error("Student: unsupported version");
    StudentConfig cfg;
    cfg.family = static_cast<StudentFamily>(r.u8());
    cfg.lookback = static_cast<int>(r.u32());
    cfg.horizon = static_cast<int>(r.u32());
    cfg.patch_len = static_cast<int>(r.u32());
    cfg.width = static_cast<int>(r.u32());
    cfg.encoder_layers = static_cast<int>(r.u32());
    cfg.decoder_layers = static_cast<int>(r.u32());
    cfg.heads = static_cast<int>(r.u32());
    cfg.quantiles = static_cast<int>(r.u32());
    cfg.use_periodicity = r.u8() != 0;
    cfg.period = static_cast<int>(r.u32());
    cfg.seed = r.u64();
    std::vector<double> qs(cfg.quantiles);
    for (double& q : qs) q = r.f64();
    Student s(cfg, QuantileLevels::make(std::move(qs)));
    const std::uint64_t n = r.u64();
    detail::require(n == s.params_.size(), "Student: parameter count mismatch");
    auto& data = s.params_.data_mut();
    for (double& v : data) v = r.f64();
    return s;
  }

 private:
  struct AttnSlices {
    std::size_t ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FfnSlices {
    std::size_t ln_g, ln_b, w1, b1, w2, b2;
  };

  StudentConfig cfg_;
  QuantileLevels levels_;
  ParameterStore params_;

  // slice ids
  std::size_t w_tok_ = 0, b_tok_ = 0, pos_ = 0;
  std::vector<AttnSlices> enc_attn_;
  std::vector<FfnSlices> enc_ffn_;
  std::size_t queries_ = 0;
  std::vector<AttnSlices> dec_attn_;
  std::vector<FfnSlices> dec_ffn_;
  std::size_t w_head_ = 0, b_head_ = 0;       // transformer head: d -> Q
  std::size_t w_lin_ = 0, b_lin_ = 0;         // linear family head: d -> H*Q

  int ffn_dim() const { return 2 * cfg_.width; }

  void build_layout() {
    using Init = ParameterStore::Init;
    const int d = cfg_.width, p_in = cfg_.token_input_dim();
    const int n_p = cfg_.patch_count();
    w_tok_ = params_.add("token_proj.w", p_in, d, Init::uniform_fanin);
    b_tok_ = params_.add("token_proj.b", 1, d, Init::zeros);
    pos_ = params_.add("token_pos", n_p, d, Init::normal_002);
    if (cfg_.family == StudentFamily::linear_patch) {
      w_lin_ = params_.add("linear_head.w", d, cfg_.horizon * cfg_.quantiles,
                           Init::uniform_fanin);
      b_lin_ = params_.add("linear_head.b", 1, cfg_.horizon * cfg_.quantiles,
                           Init::zeros);
      return;
    }
    auto add_attn = [&](const std::string& prefix) {
      AttnSlices s;
      s.ln_g = params_.add(prefix + ".ln.g", 1, d, Init::ones);
      s.ln_b = params_.add(prefix + ".ln.b", 1, d, Init::zeros);
      s.wq = params_.add(prefix + ".wq", d, d, Init::uniform_fanin);
      s.bq = params_.add(prefix + ".bq", 1, d, Init::zeros);
      s.wk = params_.add(prefix + ".wk", d, d, Init::uniform_fanin);
      s.bk = params_.add(prefix + ".bk", 1, d, Init::zeros);
      s.wv = params_.add(prefix + ".wv", d, d, Init::uniform_fanin);
      s.bv = params_.add(prefix + ".bv", 1, d, Init::zeros);
      s.wo = params_.add(prefix + ".wo", d, d, Init::uniform_fanin);
      s.bo = params_.add(prefix + ".bo", 1, d, Init::zeros);
      return s;
    };
    auto add_ffn = [&](const std::string& prefix) {
      FfnSlices s;
      s.ln_g = params_.add(prefix + ".ln.g", 1, d, Init::ones);
      s.ln_b = params_.add(prefix + ".ln.b", 1, d, Init::zeros);
      s.w1 = params_.add(prefix + ".w1", d, ffn_dim(), Init::uniform_fanin);
      s.b1 = params_.add(prefix + ".b1", 1, ffn_dim(), Init::zeros);
      s.w2 = params_.add(prefix + ".w2", ffn_dim(), d, Init::uniform_fanin);
      s.b2 = params_.add(prefix + ".b2", 1, d, Init::zeros);
      return s;
    };
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      enc_attn_.push_back(add_attn("enc" + std::to_string(l) + ".attn"));
      enc_ffn_.push_back(add_ffn("enc" + std::to_string(l) + ".ffn"));
    }
    queries_ = params_.add("horizon_queries", cfg_.horizon, d, Init::normal_002);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      dec_attn_.push_back(add_attn("dec" + std::to_string(l) + ".xattn"));
      dec_ffn_.push_back(add_ffn("dec" + std::to_string(l) + ".ffn"));
    }
    w_head_ = params_.add("quantile_head.w", d, cfg_.quantiles,
                          Init::uniform_fanin);
    b_head_ = params_.add("quantile_head.b", 1, cfg_.quantiles, Init::zeros);
  }

  // Zero-padded patches of one normalized channel, with optional periodicity
  // features appended to every token.
  Matrix patchify(const Vector& xn, long anchor) const {
    const int n_p = cfg_.patch_count(), p = cfg_.patch_len;
    Matrix u = Matrix::Zero(n_p, cfg_.token_input_dim());
    for (int i = 0; i < n_p; ++i) {
      const long begin = static_cast<long>(i) * p;
      const long len = std::min<long>(p, cfg_.lookback - begin);
      u.block(i, 0, 1, len) = xn.segment(begin, len).transpose();
    }
    if (cfg_.use_periodicity) {
      auto [s, c] = periodicity_feature(anchor, cfg_.period);
      u.col(cfg_.patch_len).setConstant(s);
      u.col(cfg_.patch_len + 1).setConstant(c);
    }
    return u;
  }

  Matrix project_tokens(const Matrix& patch_input) const {
    Matrix z = patch_input * params_.view(w_tok_);
    z.rowwise() += params_.view(b_tok_).row(0);
    z += params_.view(pos_);
    return z;
  }

  void backprop_token_projection(const Matrix& patch_input, const Matrix& dz,
                                 std::vector<double>& pg) const {
    params_.view_in(pg, w_tok_) += patch_input.transpose() * dz;
    params_.view_in(pg, b_tok_).row(0) += dz.colwise().sum();
    params_.view_in(pg, pos_) += dz;
  }

  // --- linear_patch family ---

  void forward_linear(StudentWorkspace::ChannelCache& cc) const {
    cc.tokens = project_tokens(cc.patch_input);
    cc.pooled = cc.tokens.colwise().mean().transpose();
    Eigen::RowVectorXd flat =
        cc.pooled.transpose() * params_.view(w_lin_) + params_.view(b_lin_).row(0);
    cc.out_norm.resize(cfg_.horizon, cfg_.quantiles);
    for (int h = 0; h < cfg_.horizon; ++h)
      cc.out_norm.row(h) = flat.segment(h * cfg_.quantiles, cfg_.quantiles);
  }

  void backward_linear(const StudentWorkspace::ChannelCache& cc,
                       const Matrix& g_norm, std::vector<double>& pg) const {
    Eigen::RowVectorXd g_flat(cfg_.horizon * cfg_.quantiles);
    for (int h = 0; h < cfg_.horizon; ++h)
      g_flat.segment(h * cfg_.quantiles, cfg_.quantiles) = g_norm.row(h);
    params_.view_in(pg, w_lin_) += cc.pooled * g_flat;
    params_.view_in(pg, b_lin_).row(0) += g_flat;
    Vector d_pooled = params_.view(w_lin_) * g_flat.transpose();
    const double inv_np = 1.0 / static_cast<double>(cfg_.patch_count());
    Matrix dz = (d_pooled * inv_np).transpose().replicate(cfg_.patch_count(), 1);
    backprop_token_projection(cc.patch_input, dz, pg);
  }

  // --- tiny_transformer family ---

  // Multi-head attention: query stream `q_in` attends over `kv_in`.
  Matrix attention_forward(const AttnSlices& s, const Matrix& q_in,
                           const Matrix& kv_in,
                           StudentWorkspace::AttentionCache& cache) const {
    const int d = cfg_.width, nh = cfg_.heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.a = nnops::layer_norm(q_in, params_.view(s.ln_g).row(0).transpose(),
                                params_.view(s.ln_b).row(0).transpose(),
                                cache.ln);
    cache.qm = cache.a * params_.view(s.wq);
    cache.qm.rowwise() += params_.view(s.bq).row(0);
    cache.km = kv_in * params_.view(s.wk);
    cache.km.rowwise() += params_.view(s.bk).row(0);
    cache.vm = kv_in * params_.view(s.wv);
    cache.vm.rowwise() += params_.view(s.bv).row(0);

    cache.probs.assign(nh, {});
    cache.ocat.resize(q_in.rows(), d);
    for (int h = 0; h < nh; ++h) {
      Matrix scores = cache.qm.middleCols(h * dh, dh) *
                      cache.km.middleCols(h * dh, dh).transpose() * scale;
      cache.probs[h] = nnops::softmax_rows(scores);
      cache.ocat.middleCols(h * dh, dh) =
          cache.probs[h] * cache.vm.middleCols(h * dh, dh);
    }
    Matrix out = cache.ocat * params_.view(s.wo);
    out.rowwise() += params_.view(s.bo).row(0);
    return out;
  }

  // Returns d(q_in); accumulates d(kv_in) into dkv (when non-null) and the
  // parameter gradients into pg.
  Matrix attention_backward(const AttnSlices& s, const Matrix& kv_in,
                            const Matrix& d_out,
                            StudentWorkspace::AttentionCache& cache,
                            Matrix* dkv, std::vector<double>& pg) const {
    const int d = cfg_.width, nh = cfg_.heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    params_.view_in(pg, s.wo) += cache.ocat.transpose() * d_out;
    params_.view_in(pg, s.bo).row(0) += d_out.colwise().sum();
    Matrix d_ocat = d_out * params_.view(s.wo).transpose();

    Matrix dqm = Matrix::Zero(cache.qm.rows(), d);
    Matrix dkm = Matrix::Zero(cache.km.rows(), d);
    Matrix dvm = Matrix::Zero(cache.vm.rows(), d);
    for (int h = 0; h < nh; ++h) {
      const auto qh = cache.qm.middleCols(h * dh, dh);
      const auto kh = cache.km.middleCols(h * dh, dh);
      const auto vh = cache.vm.middleCols(h * dh, dh);
      const Matrix d_oh = d_ocat.middleCols(h * dh, dh);
      Matrix dp = d_oh * vh.transpose();
      dvm.middleCols(h * dh, dh) = cache.probs[h].transpose() * d_oh;
      Matrix ds = nnops::softmax_rows_backward(cache.probs[h], dp);
      dqm.middleCols(h * dh, dh) = ds * kh * scale;
      dkm.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
    }

    params_.view_in(pg, s.wq) += cache.a.transpose() * dqm;
    params_.view_in(pg, s.bq).row(0) += dqm.colwise().sum();
    params_.view_in(pg, s.wk) += kv_in.transpose() * dkm;
    params_.view_in(pg, s.bk).row(0) += dkm.colwise().sum();
    params_.view_in(pg, s.wv) += kv_in.transpose() * dvm;
    params_.view_in(pg, s.bv).row(0) += dvm.colwise().sum();
    if (dkv) {
      *dkv += dkm * params_.view(s.wk).transpose();
      *dkv += dvm * params_.view(s.wv).transpose();
    }

    Matrix da = dqm * params_.view(s.wq).transpose();
    Vector dgain = Vector::Zero(d), dbias = Vector::Zero(d);
    Matrix dq_in = nnops::layer_norm_backward(
        da, params_.view(s.ln_g).row(0).transpose(), cache.ln, dgain, dbias);
    params_.view_in(pg, s.ln_g).row(0) += dgain.transpose();
    params_.view_in(pg, s.ln_b).row(0) += dbias.transpose();
    return dq_in;
  }

  Matrix ffn_forward(const FfnSlices& s, const Matrix& x,
                     StudentWorkspace::FfnCache& cache) const {
    cache.b = nnops::layer_norm(x, params_.view(s.ln_g).row(0).transpose(),
                                params_.view(s.ln_b).row(0).transpose(),
                                cache.ln);
    cache.f1 = cache.b * params_.view(s.w1);
    cache.f1.rowwise() += params_.view(s.b1).row(0);
    cache.g = cache.f1.unaryExpr([](double v) { return nnops::gelu(v); });
    Matrix out = cache.g * params_.view(s.w2);
    out.rowwise() += params_.view(s.b2).row(0);
    return out;
  }

  Matrix ffn_backward(const FfnSlices& s, const Matrix& d_out,
                      StudentWorkspace::FfnCache& cache,
                      std::vector<double>& pg) const {
    params_.view_in(pg, s.w2) += cache.g.transpose() * d_out;
    params_.view_in(pg, s.b2).row(0) += d_out.colwise().sum();
    Matrix dg = d_out * params_.view(s.w2).transpose();
    Matrix df1 = dg.array() *
                 cache.f1.unaryExpr([](double v) { return nnops::gelu_grad(v); })
                     .array();
    params_.view_in(pg, s.w1) += cache.b.transpose() * df1;
    params_.view_in(pg, s.b1).row(0) += df1.colwise().sum();
    Matrix db = df1 * params_.view(s.w1).transpose();
    Vector dgain = Vector::Zero(cfg_.width), dbias = Vector::Zero(cfg_.width);
    Matrix dx = nnops::layer_norm_backward(
        db, params_.view(s.ln_g).row(0).transpose(), cache.ln, dgain, dbias);
    params_.view_in(pg, s.ln_g).row(0) += dgain.transpose();
    params_.view_in(pg, s.ln_b).row(0) += dbias.transpose();
    return dx;
  }

  void forward_transformer(StudentWorkspace::ChannelCache& cc) const {
    cc.tokens = project_tokens(cc.patch_input);
    Matrix z = cc.tokens;
    cc.enc.resize(cfg_.encoder_layers);
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      auto& lc = cc.enc[l];
      lc.z_in = z;
      z += attention_forward(enc_attn_[l], lc.z_in, lc.z_in, lc.attn);
      lc.z_mid = z;
      z += ffn_forward(enc_ffn_[l], lc.z_mid, lc.ffn);
    }
    cc.z_enc = z;

    Matrix y = params_.view(queries_);
    cc.dec.resize(cfg_.decoder_layers);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      auto& lc = cc.dec[l];
      lc.y_in = y;
      y += attention_forward(dec_attn_[l], lc.y_in, cc.z_enc, lc.attn);
      lc.y_mid = y;
      y += ffn_forward(dec_ffn_[l], lc.y_mid, lc.ffn);
    }
    cc.y_final = y;
    cc.out_norm = y * params_.view(w_head_);
    cc.out_norm.rowwise() += params_.view(b_head_).row(0);
  }

  void backward_transformer(StudentWorkspace::ChannelCache& cc,
                            const Matrix& g_norm,
                            std::vector<double>& pg) const {
    params_.view_in(pg, w_head_) += cc.y_final.transpose() * g_norm;
    params_.view_in(pg, b_head_).row(0) += g_norm.colwise().sum();
    Matrix dy = g_norm * params_.view(w_head_).transpose();

    Matrix dz_enc = Matrix::Zero(cc.z_enc.rows(), cfg_.width);
    for (int l = cfg_.decoder_layers - 1; l >= 0; --l) {
      auto& lc = cc.dec[l];
      Matrix d_mid = dy + ffn_backward(dec_ffn_[l], dy, lc.ffn, pg);
      dy = d_mid + attention_backward(dec_attn_[l], cc.z_enc, d_mid, lc.attn,
                                      &dz_enc, pg);
    }
    params_.view_in(pg, queries_) += dy;

    Matrix dz = dz_enc;
    for (int l = cfg_.encoder_layers - 1; l >= 0; --l) {
      auto& lc = cc.enc[l];
      Matrix d_mid = dz + ffn_backward(enc_ffn_[l], dz, lc.ffn, pg);
      // Self-attention: the kv stream is the same tensor as the q stream.
      Matrix dkv = Matrix::Zero(lc.z_in.rows(), cfg_.width);
      Matrix dq = attention_backward(enc_attn_[l], lc.z_in, d_mid, lc.attn,
                                     &dkv, pg);
      dz = d_mid + dq + dkv;
    }
    backprop_token_projection(cc.patch_input, dz, pg);
  }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct GradCheckReport {
  double max_rel_err = 0.0;
  int directions = 0;
  bool pass = false;
};

inline GradCheckReport grad_check(
    const StudentConfig& cfg, const QuantileLevels& levels, double tolerance,
    int directions = 50, std::uint64_t seed = 123,
    const std::function<void(std::vector<double>&)>& corrupt_grad = nullptr) {
  Student student(cfg, levels);
  Rng rng(seed);
  const long C = 2;
  Matrix context(cfg.lookback, C);
  for (long r = 0; r < context.rows(); ++r)
    for (long c = 0; c < C; ++c) context(r, c) = rng.normal();
  QTensor up = qtensor_zeros(cfg.quantiles, cfg.horizon, C);
  for (auto& m : up)
    for (long h = 0; h < m.rows(); ++h)
      for (long c = 0; c < C; ++c) m(h, c) = rng.normal();

  StudentWorkspace ws;
  student.forward(context, 0, ws);
  std::vector<double> analytic(student.param_count(), 0.0);
  student.backward(up, ws, analytic);
  if (corrupt_grad) corrupt_grad(analytic);

  auto objective = [&](const std::vector<double>& theta) {
    auto& data = student.params().data_mut();
    data = theta;
    StudentWorkspace tmp;
    QTensor out = student.forward(context, 0, tmp);
    double acc = 0.0;
    for (int j = 0; j < cfg.quantiles; ++j)
      acc += (out[j].array() * up[j].array()).sum();
    return acc;
  };

  const std::vector<double> theta0 = student.params().data();
  const double eps = 1e-6;
  GradCheckReport report;
  report.directions = directions;
  for (int it = 0; it < directions; ++it) {
    std::vector<double> dir(theta0.size());
    double norm = 0.0;
    for (double& v : dir) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : dir) v /= norm;

    std::vector<double> plus = theta0, minus = theta0;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      plus[i] += eps * dir[i];
      minus[i] -= eps * dir[i];
    }
    const double fd = (objective(plus) - objective(minus)) / (2.0 * eps);
    double an = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) an += analytic[i] * dir[i];
    const double rel =
        std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  student.params().data_mut() = theta0;
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace tsmem
