#pragma once

// Core data model for probabilistic multivariate forecasting: series frames,
// supervised windows with leakage-safe splits, instance normalization,
// periodicity encoding, quantile forecasts and evaluation metrics.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsmem {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kNormEps = 1e-8;

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// T x C multivariate series in raw units.
struct SeriesFrame {
  Matrix values;  // T rows, C channels
  std::vector<std::string> channel_names;
  std::optional<int> period_hint;

  long rows() const { return values.rows(); }
  long channels() const { return values.cols(); }

  void validate() const {
    detail::require(values.rows() >= 1, "SeriesFrame: T must be >= 1");
    detail::require(values.cols() >= 1, "SeriesFrame: C must be >= 1");
    detail::require(
        channel_names.empty() ||
            static_cast<long>(channel_names.size()) == values.cols(),
        "SeriesFrame: channel_names length must equal C");
    detail::require(values.allFinite(), "SeriesFrame: values must be finite");
    if (period_hint)
      detail::require(*period_hint >= 1, "SeriesFrame: period_hint must be positive");
  }
};

struct WindowSpec {
  int lookback = 96;
  int horizon = 24;
  int stride = 1;

  void validate() const {
    detail::require(lookback >= 1, "WindowSpec: lookback must be >= 1");
    detail::require(horizon >= 1, "WindowSpec: horizon must be >= 1");
    detail::require(stride >= 1, "WindowSpec: stride must be >= 1");
  }
};

// One supervised window. The anchor is the 0-based row index of the last
// context row: context = rows [anchor-L+1, anchor], future = [anchor+1, anchor+H].
struct WindowPair {
  long anchor = 0;
  Matrix context;  // L x C
  Matrix future;   // H x C
};

// Ascending quantile level grid with a deterministic median index.
struct QuantileLevels {
  std::vector<double> levels;
  int median_index = 0;

  static QuantileLevels make(std::vector<double> qs) {
    detail::require(!qs.empty(), "QuantileLevels: empty grid");
    for (std::size_t i = 0; i < qs.size(); ++i) {
      detail::require(qs[i] > 0.0 && qs[i] < 1.0,
                      "QuantileLevels: levels must lie in (0,1)");
      if (i > 0)
        detail::require(qs[i] > qs[i - 1],
                        "QuantileLevels: levels must be strictly ascending");
    }
    QuantileLevels out;
    out.levels = std::move(qs);
    // Tie between two equidistant levels resolves to the lower index.
    double best = std::abs(out.levels[0] - 0.5);
    out.median_index = 0;
    for (int j = 1; j < static_cast<int>(out.levels.size()); ++j) {
      double d = std::abs(out.levels[j] - 0.5);
      if (d < best - 1e-15) {
        best = d;
        out.median_index = j;
      }
    }
    return out;
  }

  // The common default: deciles 0.1 .. 0.9.
  static QuantileLevels deciles() {
    std::vector<double> qs(9);
    for (int i = 0; i < 9; ++i) qs[i] = 0.1 * (i + 1);
    return make(std::move(qs));
  }

  int count() const { return static_cast<int>(levels.size()); }

  bool same_grid(const QuantileLevels& other) const {
    return levels == other.levels;
  }
};

// Q x H x C predictive quantiles, stored as one H x C matrix per level.
struct QuantileForecast {
  std::vector<Matrix> values;  // size Q, each H x C
  QuantileLevels levels;

  int quantile_count() const { return static_cast<int>(values.size()); }
  long horizon() const { return values.empty() ? 0 : values[0].rows(); }
  long channels() const { return values.empty() ? 0 : values[0].cols(); }

  static QuantileForecast zeros(const QuantileLevels& lv, long H, long C) {
    QuantileForecast qf;
    qf.levels = lv;
    qf.values.assign(lv.count(), Matrix::Zero(H, C));
    return qf;
  }

  const Matrix& median_slice() const { return values[levels.median_index]; }

  // True when no lower-level quantile exceeds the next level anywhere.
  bool level_monotone(double tol = 0.0) const {
    for (std::size_t j = 0; j + 1 < values.size(); ++j)
      if (((values[j].array() - values[j + 1].array()) > tol).any()) return false;
    return true;
  }
};

// Per-channel normalization statistics for inversion.
struct NormStats {
  Vector mean;
  Vector std;  // population standard deviation, >= 0
  double eps = kNormEps;
};

// ---------------------------------------------------------------------------
// Windowing with leakage-safe contiguous splits (train < val < test in time).

struct SplitSegment {
  long begin = 0;  // first row (inclusive)
  long end = 0;    // past-the-end row

  long length() const { return end - begin; }
};

struct SplitWindows {
  std::vector<WindowPair> train, val, test;
  SplitSegment train_seg, val_seg, test_seg;
};

namespace detail {

inline std::vector<WindowPair> enumerate_windows(const Matrix& values,
                                                 const SplitSegment& seg,
                                                 const WindowSpec& spec) {
  std::vector<WindowPair> out;
  const long L = spec.lookback, H = spec.horizon;
  // Both context and future must lie inside [seg.begin, seg.end).
  for (long t = seg.begin + L - 1; t + H <= seg.end - 1; t += spec.stride) {
    WindowPair w;
    w.anchor = t;
    w.context = values.middleRows(t - L + 1, L);
    w.future = values.middleRows(t + 1, H);
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace detail

inline SplitWindows make_split_windows(const SeriesFrame& frame,
                                       const WindowSpec& spec,
                                       const std::array<double, 3>& fractions) {
  frame.validate();
  spec.validate();
  double fsum = fractions[0] + fractions[1] + fractions[2];
  detail::require(std::abs(fsum - 1.0) < 1e-9,
                  "make_split_windows: split fractions must sum to 1");
  for (double f : fractions)
    detail::require(f >= 0.0, "make_split_windows: fractions must be nonnegative");

  const long T = frame.rows();
  const long need = spec.lookback + spec.horizon;

  SplitWindows out;
  long n_train = static_cast<long>(std::floor(fractions[0] * T));
  long n_val = static_cast<long>(std::floor(fractions[1] * T));
  out.train_seg = {0, n_train};
  out.val_seg = {n_train, n_train + n_val};
  out.test_seg = {n_train + n_val, T};

  const std::array<const SplitSegment*, 3> segs = {&out.train_seg, &out.val_seg,
                                                   &out.test_seg};
  for (int i = 0; i < 3; ++i) {
    if (fractions[i] > 0.0 && segs[i]->length() < need) {
      // Smallest T whose every nonempty split can hold one window.
      long t_min = T;
      auto fits = [&](long tt) {
        long a = static_cast<long>(std::floor(fractions[0] * tt));
        long b = static_cast<long>(std::floor(fractions[1] * tt));
        long c = tt - a - b;
        return (fractions[0] == 0.0 || a >= need) &&
               (fractions[1] == 0.0 || b >= need) &&
               (fractions[2] == 0.0 || c >= need);
      };
      while (!fits(t_min)) ++t_min;
      throw std::invalid_argument(
          "make_split_windows: insufficient length T=" + std::to_string(T) +
          ", need at least T=" + std::to_string(t_min) + " for L+H=" +
          std::to_string(need) + " windows in every nonempty split");
    }
  }

  out.train = detail::enumerate_windows(frame.values, out.train_seg, spec);
  out.val = detail::enumerate_windows(frame.values, out.val_seg, spec);
  out.test = detail::enumerate_windows(frame.values, out.test_seg, spec);
  return out;
}

// ---------------------------------------------------------------------------
// Instance normalization (per-channel z-scoring over the context rows).

inline std::pair<Matrix, NormStats> instance_normalize(const Matrix& X,
                                                       double eps = kNormEps) {
  const long L = X.rows(), C = X.cols();
  NormStats stats;
  stats.eps = eps;
  stats.mean = X.colwise().mean();
  stats.std = Vector(C);
  for (long c = 0; c < C; ++c) {
    double var = (X.col(c).array() - stats.mean[c]).square().sum() /
                 static_cast<double>(L);
    stats.std[c] = std::sqrt(var);
  }
  Matrix Xn(L, C);
  for (long c = 0; c < C; ++c)
    Xn.col(c) = (X.col(c).array() - stats.mean[c]) / (stats.std[c] + eps);
  return {std::move(Xn), std::move(stats)};
}

inline Matrix denormalize(const Matrix& Xn, const NormStats& stats) {
  detail::require(Xn.cols() == stats.mean.size(),
                  "denormalize: channel count mismatch");
  Matrix X(Xn.rows(), Xn.cols());
  for (long c = 0; c < Xn.cols(); ++c)
    X.col(c) = Xn.col(c).array() * (stats.std[c] + stats.eps) + stats.mean[c];
  return X;
}

inline QuantileForecast denormalize(const QuantileForecast& qf,
                                    const NormStats& stats) {
  QuantileForecast out;
  out.levels = qf.levels;
  out.values.reserve(qf.values.size());
  for (const Matrix& m : qf.values) out.values.push_back(denormalize(m, stats));
  return out;
}

// ---------------------------------------------------------------------------
// Periodicity encoding: [sin(2*pi*t/P), cos(2*pi*t/P)].
// The phase is reduced mod P first so feature(t) == feature(t+P) bit-exactly.

inline std::pair<double, double> periodicity_feature(long t, int period) {
  detail::require(period >= 1, "periodicity_feature: period must be >= 1");
  long r = t % period;
  if (r < 0) r += period;
  double phase = 2.0 * M_PI * static_cast<double>(r) / static_cast<double>(period);
  return {std::sin(phase), std::cos(phase)};
}

inline std::vector<std::pair<double, double>> periodicity_features(
    const std::vector<long>& anchors, int period) {
  std::vector<std::pair<double, double>> out;
  out.reserve(anchors.size());
  for (long t : anchors) out.push_back(periodicity_feature(t, period));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics.

inline void check_same_shape(const Matrix& a, const Matrix& b,
                             const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
}

inline double mse(const Matrix& truth, const Matrix& pred) {
  check_same_shape(truth, pred, "mse");
  return (truth - pred).array().square().mean();
}

inline double mae(const Matrix& truth, const Matrix& pred) {
  check_same_shape(truth, pred, "mae");
  return (truth - pred).array().abs().mean();
}

// Pinball loss rho_q(z, y) = (y - z) * (q - I[y < z]).
inline double pinball(double z, double y, double q) {
  return (y - z) * (q - (y < z ? 1.0 : 0.0));
}

// Subgradient of rho_q wrt z. The indicator convention I[y < z] is applied
// literally, so the derivative at z == y is -q.
inline double pinball_grad(double z, double y, double q) {
  return (y < z) ? (1.0 - q) : -q;
}

// Mean pinball risk of a quantile forecast against the realized future,
// averaged over levels, horizon steps and channels.
inline double pinball_risk(const QuantileForecast& qf, const Matrix& truth) {
  detail::require(!qf.values.empty(), "pinball_risk: empty forecast");
  check_same_shape(qf.values[0], truth, "pinball_risk");
  double acc = 0.0;
  for (int j = 0; j < qf.quantile_count(); ++j) {
    const double q = qf.levels.levels[j];
    const Matrix& Z = qf.values[j];
    for (long h = 0; h < truth.rows(); ++h)
      for (long c = 0; c < truth.cols(); ++c)
        acc += pinball(Z(h, c), truth(h, c), q);
  }
  return acc / (static_cast<double>(qf.quantile_count()) * truth.rows() *
                truth.cols());
}

// CRPS approximated by the mean weighted quantile loss: the factor 2 turns
// the mean pinball into the standard finite-grid CRPS estimator.
inline double crps_approx(const QuantileForecast& qf, const Matrix& truth) {
  return 2.0 * pinball_risk(qf, truth);
}

// Point extraction: the median slice when 0.5 is on the grid, otherwise a
// linear interpolation between the levels straddling 0.5.
inline Matrix point_from_quantiles(const QuantileForecast& qf) {
  detail::require(!qf.values.empty(), "point_from_quantiles: empty forecast");
  const auto& qs = qf.levels.levels;
  for (std::size_t j = 0; j < qs.size(); ++j)
    if (std::abs(qs[j] - 0.5) < 1e-12) return qf.values[j];
  int ja = -1, jb = -1;
  for (std::size_t j = 0; j < qs.size(); ++j) {
    if (qs[j] < 0.5) ja = static_cast<int>(j);
    if (qs[j] > 0.5 && jb < 0) jb = static_cast<int>(j);
  }
  if (ja < 0 || jb < 0)
    throw std::invalid_argument(
        "point_from_quantiles: levels do not straddle 0.5");
  const double w = (0.5 - qs[ja]) / (qs[jb] - qs[ja]);
  return qf.values[ja] + w * (qf.values[jb] - qf.values[ja]);
}

}  // namespace tsmem
