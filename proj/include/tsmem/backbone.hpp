#pragma once

// Frozen probabilistic forecaster abstraction plus two deterministic
// reference backbones (seasonal-naive and persistence) and a precomputed
// forecast cache with an on-disk container ("TSMC").

#include "tsmem/core.hpp"
#include "tsmem/io.hpp"
#include "tsmem/parallel.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace tsmem {

// Left empirical quantile of a sorted sample.
inline double empirical_quantile(const std::vector<double>& sorted, double q) {
  detail::require(!sorted.empty(), "empirical_quantile: empty sample");
  const auto n = static_cast<double>(sorted.size());
  long idx = static_cast<long>(std::ceil(q * n)) - 1;
  idx = std::clamp<long>(idx, 0, static_cast<long>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(idx)];
}

// Deterministic frozen forecaster: same context, identical output, no state
// mutation after fitting.
class FrozenForecaster {
 public:
  virtual ~FrozenForecaster() = default;
  virtual QuantileForecast forecast(const Matrix& context) const = 0;
  virtual const QuantileLevels& levels() const = 0;
  virtual int horizon() const = 0;
  virtual std::string family() const = 0;
  virtual void serialize(ByteWriter& w) const = 0;

  // Hash of the fitted parameters and the level grid.
  Digest fingerprint() const {
    ByteWriter w;
    serialize(w);
    return w.digest();
  }
};

namespace detail {

// Shared machinery: a point rule plus frozen per-(level,step,channel)
// residual quantile offsets with the median offset pinned to zero.
class OffsetBackbone : public FrozenForecaster {
 public:
  QuantileForecast forecast(const Matrix& context) const override {
    require(fitted_, family() + ": forecast before fit");
    require(context.cols() == static_cast<long>(channels_),
            family() + ": context channel count mismatch");
    Matrix point = point_rule(context);
    QuantileForecast qf;
    qf.levels = levels_;
    qf.values.reserve(offsets_.size());
    for (const Matrix& off : offsets_) qf.values.push_back(point + off);
    return qf;
  }

  const QuantileLevels& levels() const override { return levels_; }
  int horizon() const override { return horizon_; }

  // Counterpart of serialize(); consumes the trailing offset matrices.
  void restore(ByteReader& r, int horizon, int channels) {
    horizon_ = horizon;
    channels_ = channels;
    offsets_.clear();
    for (int j = 0; j < levels_.count(); ++j) offsets_.push_back(r.matrix());
    fitted_ = true;
  }

  void serialize(ByteWriter& w) const override {
    w.str(family());
    w.u32(static_cast<std::uint32_t>(horizon_));
    w.u32(static_cast<std::uint32_t>(channels_));
    w.u32(static_cast<std::uint32_t>(levels_.count()));
    for (double q : levels_.levels) w.f64(q);
    serialize_extra(w);
    for (const Matrix& off : offsets_) w.matrix(off);
  }

 protected:
  virtual Matrix point_rule(const Matrix& context) const = 0;
  virtual void serialize_extra(ByteWriter& w) const = 0;

  // Collects residuals (future - point) over the training windows and
  // freezes their empirical quantiles, re-centered so that the median-level
  // offset is exactly zero.
  void fit_offsets(const std::vector<WindowPair>& train_windows) {
    require(!train_windows.empty(), family() + ": no training windows");
    horizon_ = static_cast<int>(train_windows[0].future.rows());
    channels_ = static_cast<int>(train_windows[0].future.cols());
    const int Q = levels_.count();
    std::vector<std::vector<double>> residuals(
        static_cast<std::size_t>(horizon_) * channels_);
    for (const WindowPair& w : train_windows) {
      Matrix r = w.future - point_rule(w.context);
      for (int h = 0; h < horizon_; ++h)
        for (int c = 0; c < channels_; ++c)
          residuals[static_cast<std::size_t>(h) * channels_ + c].push_back(
              r(h, c));
    }
    offsets_.assign(Q, Matrix::Zero(horizon_, channels_));
    for (int h = 0; h < horizon_; ++h) {
      for (int c = 0; c < channels_; ++c) {
        auto& sample = residuals[static_cast<std::size_t>(h) * channels_ + c];
        std::sort(sample.begin(), sample.end());
        for (int j = 0; j < Q; ++j)
          offsets_[j](h, c) = level_offset(sample, levels_.levels[j]);
        const double center = offsets_[levels_.median_index](h, c);
        for (int j = 0; j < Q; ++j) offsets_[j](h, c) -= center;
      }
    }
    fitted_ = true;
  }

  virtual double level_offset(const std::vector<double>& sorted_residuals,
                              double q) const {
    return empirical_quantile(sorted_residuals, q);
  }

  QuantileLevels levels_;
  std::vector<Matrix> offsets_;  // Q matrices of H x C, ascending in level
  int horizon_ = 0;
  int channels_ = 0;
  bool fitted_ = false;
};

}  // namespace detail

// Seasonal-naive: each forecast step copies the value one period back,
// wrapping within the context beyond one period.
class SeasonalNaiveBackbone : public detail::OffsetBackbone {
 public:
  SeasonalNaiveBackbone(int period, QuantileLevels levels) : period_(period) {
    detail::require(period >= 1, "SeasonalNaiveBackbone: period must be >= 1");
    levels_ = std::move(levels);
  }

  void fit(const std::vector<WindowPair>& train_windows) {
    detail::require(!train_windows.empty(),
                    "SeasonalNaiveBackbone: no training windows");
    detail::require(train_windows[0].context.rows() >= period_,
                    "SeasonalNaiveBackbone: lookback shorter than period");
    fit_offsets(train_windows);
  }

  std::string family() const override { return "seasonal_naive"; }
  int period() const { return period_; }

 protected:
  Matrix point_rule(const Matrix& context) const override {
    const long L = context.rows(), C = context.cols();
    detail::require(L >= period_,
                    "SeasonalNaiveBackbone: context shorter than period");
    Matrix out(horizon_ == 0 ? 0 : horizon_, C);
    for (int h = 0; h < horizon_; ++h) {
      const long src = L - period_ + (h % period_);
      for (long c = 0; c < C; ++c) out(h, c) = context(src, c);
    }
    return out;
  }

  void serialize_extra(ByteWriter& w) const override {
    w.u32(static_cast<std::uint32_t>(period_));
  }

 private:
  int period_;
};

// Persistence: repeats the last context row; symmetric residual band.
class PersistenceBackbone : public detail::OffsetBackbone {
 public:
  explicit PersistenceBackbone(QuantileLevels levels) {
    levels_ = std::move(levels);
  }

  void fit(const std::vector<WindowPair>& train_windows) {
    fit_offsets(train_windows);
  }

  std::string family() const override { return "persistence"; }

 protected:
  Matrix point_rule(const Matrix& context) const override {
    Matrix out(horizon_, context.cols());
    for (int h = 0; h < horizon_; ++h) out.row(h) = context.row(context.rows() - 1);
    return out;
  }

  void serialize_extra(ByteWriter&) const override {}

  double level_offset(const std::vector<double>& sorted_residuals,
                      double q) const override {
    // Symmetric band from absolute residual quantiles, zero at the median.
    std::vector<double> abs_sorted(sorted_residuals.size());
    for (std::size_t i = 0; i < sorted_residuals.size(); ++i)
      abs_sorted[i] = std::abs(sorted_residuals[i]);
    std::sort(abs_sorted.begin(), abs_sorted.end());
    if (std::abs(q - 0.5) < 1e-12) return 0.0;
    if (q > 0.5) return empirical_quantile(abs_sorted, 2.0 * q - 1.0);
    return -empirical_quantile(abs_sorted, 1.0 - 2.0 * q);
  }
};

inline std::shared_ptr<SeasonalNaiveBackbone> fit_seasonal_naive(
    const std::vector<WindowPair>& train_windows, int period,
    const QuantileLevels& levels) {
  auto backbone = std::make_shared<SeasonalNaiveBackbone>(period, levels);
  backbone->fit(train_windows);
  return backbone;
}

inline std::shared_ptr<PersistenceBackbone> fit_persistence(
    const std::vector<WindowPair>& train_windows, const QuantileLevels& levels) {
  auto backbone = std::make_shared<PersistenceBackbone>(levels);
  backbone->fit(train_windows);
  return backbone;
}

inline std::shared_ptr<FrozenForecaster> deserialize_backbone(ByteReader& r) {
  // Mirrors OffsetBackbone::serialize.
  const std::string family = r.str();
  const int H = static_cast<int>(r.u32());
  const int C = static_cast<int>(r.u32());
  const int Q = static_cast<int>(r.u32());
  std::vector<double> qs(Q);
  for (double& q : qs) q = r.f64();
  auto levels = QuantileLevels::make(std::move(qs));

  if (family == "seasonal_naive") {
    const int period = static_cast<int>(r.u32());
    auto b = std::make_shared<SeasonalNaiveBackbone>(period, levels);
    b->restore(r, H, C);
    return b;
  }
  if (family == "persistence") {
    auto b = std::make_shared<PersistenceBackbone>(levels);
    b->restore(r, H, C);
    return b;
  }
  throw std::runtime_error("deserialize_backbone: unknown family " + family);
}

// ---------------------------------------------------------------------------
// Forecast cache: anchor -> QuantileForecast, bound to a backbone fingerprint.

class ForecastCache {
 public:
  ForecastCache() = default;
  ForecastCache(Digest fingerprint, QuantileLevels levels)
      : fingerprint_(fingerprint), levels_(std::move(levels)) {}

  void insert(long anchor, QuantileForecast qf) {
    entries_.emplace(anchor, std::move(qf));
  }

  const QuantileForecast* find(long anchor) const {
    auto it = entries_.find(anchor);
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const Digest& fingerprint() const { return fingerprint_; }
  const std::map<long, QuantileForecast>& entries() const { return entries_; }

  bool valid_for(const FrozenForecaster& backbone) const {
    return fingerprint_ == backbone.fingerprint();
  }

  void save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.magic("TSMC");
    w.u16(1);
    w.raw(fingerprint_.data(), fingerprint_.size());
    w.u64(entries_.size());
    const long Q = levels_.count();
    const long H = entries_.empty() ? 0 : entries_.begin()->second.horizon();
    const long C = entries_.empty() ? 0 : entries_.begin()->second.channels();
    w.u32(static_cast<std::uint32_t>(Q));
    w.u32(static_cast<std::uint32_t>(H));
    w.u32(static_cast<std::uint32_t>(C));
    for (double q : levels_.levels) w.f64(q);
    for (const auto& [anchor, qf] : entries_) {
      w.i64(anchor);
      for (const Matrix& m : qf.values)
        for (long h = 0; h < m.rows(); ++h)
          for (long c = 0; c < m.cols(); ++c) w.f64(m(h, c));
    }
    w.save(path);
  }

  static ForecastCache load(const std::filesystem::path& path) {
    ByteReader r = ByteReader::load(path);
    r.expect_magic("TSMC");
    const std::uint16_t version = r.u16();
    if (version != 1)
      throw std::runtime_error("ForecastCache: unsupported version");
    ForecastCache cache;
    r.raw(cache.fingerprint_.data(), cache.fingerprint_.size());
    const std::uint64_t count = r.u64();
    const int Q = static_cast<int>(r.u32());
    const long H = r.u32(), C = r.u32();
    std::vector<double> qs(Q);
    for (double& q : qs) q = r.f64();
    cache.levels_ = QuantileLevels::make(std::move(qs));
    for (std::uint64_t i = 0; i < count; ++i) {
      const long anchor = r.i64();
      QuantileForecast qf = QuantileForecast::zeros(cache.levels_, H, C);
      for (Matrix& m : qf.values)
        for (long h = 0; h < H; ++h)
          for (long c = 0; c < C; ++c) m(h, c) = r.f64();
      cache.entries_.emplace(anchor, std::move(qf));
    }
    return cache;
  }

 private:
  Digest fingerprint_{};
  QuantileLevels levels_;
  std::map<long, QuantileForecast> entries_;
};

inline ForecastCache precompute_cache(const FrozenForecaster& backbone,
                                      const std::vector<WindowPair>& windows,
                                      int threads = 1) {
  ForecastCache cache(backbone.fingerprint(), backbone.levels());
  std::vector<QuantileForecast> results(windows.size());
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    results[i] = backbone.forecast(windows[i].context);
  });
  for (std::size_t i = 0; i < windows.size(); ++i)
    cache.insert(windows[i].anchor, std::move(results[i]));
  return cache;
}

}  // namespace tsmem
