#pragma once

// Leakage-safe offline kNN teacher: frozen patch-mean embedding, brute-force
// retrieval with overlap exclusion, trailing-mean shift alignment, l1
// re-ranking, softmax retrieval weights, weighted empirical quantile
// aggregation and retrieval confidence.

#include "tsmem/core.hpp"
#include "tsmem/io.hpp"
#include "tsmem/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace tsmem {

// Frozen context encoder contract: deterministic, fixed output dimension.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual Vector embed(const Matrix& context) const = 0;
  virtual long dimension(long channels) const = 0;
  virtual std::string name() const = 0;
};

// Default encoder: instance-normalize the context, split each channel into
// equal patches (last patch absorbs the remainder), take patch means and
// concatenate channels. Shift-invariant by construction of the z-scoring.
class PatchMeanEmbedder : public Embedder {
 public:
  explicit PatchMeanEmbedder(int patches = 8) : patches_(patches) {
    detail::require(patches >= 1, "PatchMeanEmbedder: patches must be >= 1");
  }

  Vector embed(const Matrix& context) const override {
    const long L = context.rows(), C = context.cols();
    int f = patches_;
    if (L < f) {
      f = static_cast<int>(L);
      ++reduced_calls_;  // warning record: short context reduced the patch count
    }
    auto [norm, stats] = instance_normalize(context);
    (void)stats;
    const long base = L / f;
    Vector out(static_cast<long>(patches_) * C);
    out.setZero();
    for (long c = 0; c < C; ++c) {
      for (int i = 0; i < f; ++i) {
        const long begin = static_cast<long>(i) * base;
        const long len = (i == f - 1) ? (L - begin) : base;
        out[c * patches_ + i] = norm.col(c).segment(begin, len).mean();
      }
      // Padding lanes stay zero when f was reduced, keeping the dimension
      // constant across calls.
    }
    return out;
  }

  long dimension(long channels) const override { return patches_ * channels; }
  std::string name() const override {
    return "patch_mean_" + std::to_string(patches_);
  }
  long reduced_calls() const { return reduced_calls_.load(); }

 private:
  int patches_;
  mutable std::atomic<long> reduced_calls_{0};
};

inline Vector default_embed(const Matrix& context, int patches = 8) {
  return PatchMeanEmbedder(patches).embed(context);
}

struct RetrievalConfig {
  int k = 16;             // neighbors kept after re-ranking
  int k_cand = 64;        // pre-rerank candidate pool
  int trailing_m = 24;    // trailing-mean length, clamped to the lookback
  double tau_ret = 1.0;   // softmax temperature
  enum class Transform { identity, squared };
  Transform psi = Transform::identity;
  bool standardize_distances = true;
  int exclusion_margin = 0;  // extra rows added around the query span

  void validate() const {
    detail::require(k >= 1, "RetrievalConfig: K must be >= 1");
    detail::require(k_cand >= k, "RetrievalConfig: K_cand must be >= K");
    detail::require(trailing_m >= 1, "RetrievalConfig: m must be >= 1");
    detail::require(tau_ret > 0.0, "RetrievalConfig: tau must be positive");
    detail::require(exclusion_margin >= 0,
                    "RetrievalConfig: exclusion margin must be >= 0");
  }

  int effective_m(long lookback) const {
    return static_cast<int>(std::min<long>(trailing_m, lookback));
  }

  void serialize(ByteWriter& w) const {
    w.u32(static_cast<std::uint32_t>(k));
    w.u32(static_cast<std::uint32_t>(k_cand));
    w.u32(static_cast<std::uint32_t>(trailing_m));
    w.f64(tau_ret);
    w.u8(psi == Transform::squared ? 1 : 0);
    w.u8(standardize_distances ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(exclusion_margin));
  }

  static RetrievalConfig deserialize(ByteReader& r) {
    RetrievalConfig cfg;
    cfg.k = static_cast<int>(r.u32());
    cfg.k_cand = static_cast<int>(r.u32());
    cfg.trailing_m = static_cast<int>(r.u32());
    cfg.tau_ret = r.f64();
    cfg.psi = r.u8() ? Transform::squared : Transform::identity;
    cfg.standardize_distances = r.u8() != 0;
    cfg.exclusion_margin = static_cast<int>(r.u32());
    return cfg;
  }
};

// Thrown when overlap exclusion leaves no admissible neighbor.
struct NoNeighborsError : std::runtime_error {
  explicit NoNeighborsError(long anchor_)
      : std::runtime_error("no admissible neighbors for query anchor " +
                           std::to_string(anchor_)),
        anchor(anchor_) {}
  long anchor;
};

// ---------------------------------------------------------------------------
// Knowledge base over the training split only.

class KnowledgeBase {
 public:
  struct Entry {
    WindowPair window;
    Vector embedding;
  };

  KnowledgeBase() = default;

  static KnowledgeBase build(const std::vector<WindowPair>& train_windows,
                             const Embedder& embedder,
                             const SplitSegment& train_segment,
                             int threads = 1) {
    KnowledgeBase kb;
    kb.segment_ = train_segment;
    kb.split_tag_ = "train";
    kb.entries_.resize(train_windows.size());
    for (const WindowPair& w : train_windows) {
      const long lo = w.anchor - w.context.rows() + 1;
      const long hi = w.anchor + w.future.rows();
      detail::require(lo >= train_segment.begin && hi <= train_segment.end - 1,
                      "KnowledgeBase: window [" + std::to_string(lo) + "," +
                          std::to_string(hi) +
                          "] escapes the training segment");
    }
    parallel_for(train_windows.size(), threads, [&](std::size_t i) {
      kb.entries_[i].window = train_windows[i];
      kb.entries_[i].embedding = embedder.embed(train_windows[i].context);
    });
    return kb;
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<Entry>& entries() const { return entries_; }
  const SplitSegment& segment() const { return segment_; }
  const std::string& split_tag() const { return split_tag_; }

 private:
  std::vector<Entry> entries_;
  SplitSegment segment_{};
  std::string split_tag_;
};

inline KnowledgeBase build_knowledge_base(
    const std::vector<WindowPair>& train_windows, const Embedder& embedder,
    const SplitSegment& train_segment, int threads = 1) {
  return KnowledgeBase::build(train_windows, embedder, train_segment, threads);
}

// ---------------------------------------------------------------------------
// Retrieval pipeline pieces.

struct Candidate {
  std::size_t entry_index = 0;
  double embed_distance = 0.0;
  Vector shift;            // per-channel additive alignment
  Matrix aligned_context;  // L x C
  Matrix aligned_future;   // H x C
  double rerank_score = 0.0;
};

struct NeighborSet {
  std::vector<Candidate> neighbors;  // rerank scores nondecreasing
  int effective_k = 0;               // < requested K when the pool was small
};

// Euclidean embedding distances with full-span overlap exclusion: a
// candidate whose [i-L+1, i+H] range intersects the query's span (plus the
// configured margin) is never retrieved. Keeps the K_cand smallest
// distances, ties broken toward the smaller entry index.
inline std::vector<Candidate> retrieve_candidates(const WindowPair& query,
                                                  const Vector& query_embedding,
                                                  const KnowledgeBase& kb,
                                                  const RetrievalConfig& cfg) {
  cfg.validate();
  const long L = query.context.rows(), H = query.future.rows();
  const long q_lo = query.anchor - L + 1 - cfg.exclusion_margin;
  const long q_hi = query.anchor + H + cfg.exclusion_margin;

  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(kb.size());
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const auto& e = kb.entry(i);
    const long e_lo = e.window.anchor - e.window.context.rows() + 1;
    const long e_hi = e.window.anchor + e.window.future.rows();
    if (e_lo <= q_hi && q_lo <= e_hi) continue;  // overlaps the query span
    scored.emplace_back((query_embedding - e.embedding).norm(), i);
  }
  if (scored.empty()) throw NoNeighborsError(query.anchor);

  const std::size_t keep = std::min<std::size_t>(scored.size(), cfg.k_cand);
  std::partial_sort(scored.begin(), scored.begin() + keep, scored.end());
  scored.resize(keep);

  std::vector<Candidate> out;
  out.reserve(keep);
  for (const auto& [d, i] : scored) {
    Candidate c;
    c.entry_index = i;
    c.embed_distance = d;
    out.push_back(std::move(c));
  }
  return out;
}

// Trailing mean shift over the last m steps (channel-wise).
inline Vector compute_shift(const Matrix& query_context,
                            const Matrix& cand_context, int m) {
  detail::require(m >= 1 && m <= query_context.rows() &&
                      m <= cand_context.rows(),
                  "compute_shift: invalid trailing length");
  const long C = query_context.cols();
  Vector s(C);
  for (long c = 0; c < C; ++c)
    s[c] = query_context.col(c).tail(m).mean() -
           cand_context.col(c).tail(m).mean();
  return s;
}

inline std::pair<Matrix, Matrix> align_candidate(const WindowPair& candidate,
                                                 const Vector& shift) {
  detail::require(shift.size() == candidate.context.cols(),
                  "align_candidate: shift dimension mismatch");
  Matrix ctx = candidate.context;
  Matrix fut = candidate.future;
  ctx.rowwise() += shift.transpose();
  fut.rowwise() += shift.transpose();
  return {std::move(ctx), std::move(fut)};
}

// Re-rank aligned candidates by l1 distance to the query context and keep
// the top K. Ties resolve by smaller embedding distance, then entry index.
inline NeighborSet rerank_truncate(const Matrix& query_context,
                                   std::vector<Candidate> candidates, int k) {
  for (Candidate& c : candidates)
    c.rerank_score = (query_context - c.aligned_context).cwiseAbs().sum();
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) {
                     if (a.rerank_score != b.rerank_score)
                       return a.rerank_score < b.rerank_score;
                     if (a.embed_distance != b.embed_distance)
                       return a.embed_distance < b.embed_distance;
                     return a.entry_index < b.entry_index;
                   });
  NeighborSet out;
  out.effective_k = static_cast<int>(
      std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(k)));
  candidates.resize(out.effective_k);
  out.neighbors = std::move(candidates);
  return out;
}

// Softmax retrieval weights over (optionally median-standardized,
// psi-transformed) embedding distances, with max-subtraction for stability.
inline std::vector<double> retrieval_weights(const std::vector<double>& distances,
                                             RetrievalConfig::Transform psi,
                                             double tau, bool standardize = true) {
  detail::require(!distances.empty(), "retrieval_weights: empty distances");
  detail::require(tau > 0.0, "retrieval_weights: tau must be positive");

  std::vector<double> x = distances;
  if (standardize) {
    std::vector<double> positive;
    for (double d : x)
      if (d > 0.0) positive.push_back(d);
    if (!positive.empty()) {
      std::sort(positive.begin(), positive.end());
      const double med = positive[(positive.size() - 1) / 2];
      for (double& d : x) d /= med;
    }
  }
  if (psi == RetrievalConfig::Transform::squared)
    for (double& d : x) d *= d;

  const double x_min = *std::min_element(x.begin(), x.end());
  double denom = 0.0;
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    w[i] = std::exp(-(x[i] - x_min) / tau);
    denom += w[i];
  }
  for (double& wi : w) wi /= denom;
  return w;
}

// Left weighted empirical quantile: sort values ascending (stable), return
// the first value whose cumulative weight reaches q. This is the smallest
// minimizer of the weighted pinball risk.
inline double weighted_empirical_quantile(const std::vector<double>& values,
                                          const std::vector<double>& weights,
                                          double q) {
  detail::require(!values.empty(), "weighted_empirical_quantile: empty input");
  detail::require(values.size() == weights.size(),
                  "weighted_empirical_quantile: size mismatch");
  detail::require(q > 0.0 && q < 1.0,
                  "weighted_empirical_quantile: q must lie in (0,1)");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return values[a] < values[b];
  });
  double cum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    cum += weights[order[r]];
    if (cum >= q) return values[order[r]];
  }
  return values[order.back()];  // numerical slack: cumulative sum fell short of 1
}

inline double confidence(const std::vector<double>& weights) {
  detail::require(!weights.empty(), "confidence: empty weights");
  return *std::max_element(weights.begin(), weights.end());
}

// Weighted empirical quantiles of the aligned neighbor futures, per level,
// horizon step and channel. Nondecreasing across levels by construction.
inline QuantileForecast aggregate_teacher(const NeighborSet& neighbors,
                                          const std::vector<double>& weights,
                                          const QuantileLevels& levels) {
  detail::require(!neighbors.neighbors.empty(),
                  "aggregate_teacher: empty neighbor set");
  detail::require(neighbors.neighbors.size() == weights.size(),
                  "aggregate_teacher: weight count mismatch");
  const long H = neighbors.neighbors[0].aligned_future.rows();
  const long C = neighbors.neighbors[0].aligned_future.cols();
  const int Q = levels.count();
  const std::size_t K = neighbors.neighbors.size();

  QuantileForecast qf = QuantileForecast::zeros(levels, H, C);
  std::vector<std::pair<double, double>> sorted(K);  // (value, weight)
  for (long h = 0; h < H; ++h) {
    for (long c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < K; ++k)
        sorted[k] = {neighbors.neighbors[k].aligned_future(h, c), weights[k]};
      std::stable_sort(sorted.begin(), sorted.end(),
                       [](const auto& a, const auto& b) {
                         return a.first < b.first;
                       });
      // Single sweep: the level grid is ascending, so the cumulative-weight
      // pointer only moves forward.
      double cum = sorted[0].second;
      std::size_t r = 0;
      for (int j = 0; j < Q; ++j) {
        const double q = levels.levels[j];
        while (cum < q && r + 1 < K) {
          ++r;
          cum += sorted[r].second;
        }
        qf.values[j](h, c) = sorted[r].first;
      }
    }
  }
  return qf;
}

// ---------------------------------------------------------------------------
// Teacher dataset construction (one record per window with >= 1 admissible
// neighbor) and its on-disk container ("TSMT").

struct TeacherRecord {
  long anchor = 0;
  Matrix context;
  Matrix future;
  QuantileForecast teacher_quantiles;
  double confidence = 0.0;
};

struct TeacherDataset {
  std::vector<TeacherRecord> records;
  QuantileLevels levels;
  RetrievalConfig config;
  long skipped = 0;  // windows with no admissible neighbor

  void save(const std::filesystem::path& path) const {
    detail::require(!records.empty(), "TeacherDataset::save: empty dataset");
    const long L = records[0].context.rows();
    const long H = records[0].future.rows();
    const long C = records[0].context.cols();
    ByteWriter w;
    w.magic("TSMT");
    w.u16(1);
    w.u32(static_cast<std::uint32_t>(L));
    w.u32(static_cast<std::uint32_t>(H));
    w.u32(static_cast<std::uint32_t>(C));
    w.u32(static_cast<std::uint32_t>(levels.count()));
    for (double q : levels.levels) w.f64(q);
    config.serialize(w);
    w.u64(records.size());
    for (const TeacherRecord& rec : records) {
      w.i64(rec.anchor);
      for (long r = 0; r < L; ++r)
        for (long c = 0; c < C; ++c) w.f64(rec.context(r, c));
      for (long r = 0; r < H; ++r)
        for (long c = 0; c < C; ++c) w.f64(rec.future(r, c));
      for (const Matrix& m : rec.teacher_quantiles.values)
        for (long r = 0; r < H; ++r)
          for (long c = 0; c < C; ++c) w.f64(m(r, c));
      w.f64(rec.confidence);
    }
    w.save(path);
  }

  static TeacherDataset load(const std::filesystem::path& path) {
    ByteReader r = ByteReader::load(path);
    r.expect_magic("TSMT");
    if (r.u16() != 1)
      throw std::runtime_error("TeacherDataset: unsupported version");
    const long L = r.u32(), H = r.u32(), C = r.u32();
    const int Q = static_cast<int>(r.u32());
    std::vector<double> qs(Q);
    for (double& q : qs) q = r.f64();
    TeacherDataset out;
    out.levels = QuantileLevels::make(std::move(qs));
    out.config = RetrievalConfig::deserialize(r);
    const std::uint64_t count = r.u64();
    out.records.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      TeacherRecord rec;
      rec.anchor = r.i64();
      rec.context = Matrix(L, C);
      for (long rr = 0; rr < L; ++rr)
        for (long c = 0; c < C; ++c) rec.context(rr, c) = r.f64();
      rec.future = Matrix(H, C);
      for (long rr = 0; rr < H; ++rr)
        for (long c = 0; c < C; ++c) rec.future(rr, c) = r.f64();
      rec.teacher_quantiles = QuantileForecast::zeros(out.levels, H, C);
      for (Matrix& m : rec.teacher_quantiles.values)
        for (long rr = 0; rr < H; ++rr)
          for (long c = 0; c < C; ++c) m(rr, c) = r.f64();
      rec.confidence = r.f64();
      out.records.push_back(std::move(rec));
    }
    return out;
  }
};

// Runs the full retrieval pipeline for one query window.
inline TeacherRecord teach_window(const WindowPair& query,
                                  const Vector& query_embedding,
                                  const KnowledgeBase& kb,
                                  const RetrievalConfig& cfg,
                                  const QuantileLevels& levels) {
  auto candidates = retrieve_candidates(query, query_embedding, kb, cfg);
  const int m = cfg.effective_m(query.context.rows());
  for (Candidate& c : candidates) {
    const WindowPair& w = kb.entry(c.entry_index).window;
    c.shift = compute_shift(query.context, w.context, m);
    std::tie(c.aligned_context, c.aligned_future) = align_candidate(w, c.shift);
  }
  NeighborSet neighbors = rerank_truncate(query.context, std::move(candidates), cfg.k);
  std::vector<double> distances(neighbors.neighbors.size());
  for (std::size_t i = 0; i < distances.size(); ++i)
    distances[i] = neighbors.neighbors[i].embed_distance;
  const std::vector<double> weights = retrieval_weights(
      distances, cfg.psi, cfg.tau_ret, cfg.standardize_distances);

  TeacherRecord rec;
  rec.anchor = query.anchor;
  rec.context = query.context;
  rec.future = query.future;
  rec.teacher_quantiles = aggregate_teacher(neighbors, weights, levels);
  rec.confidence = confidence(weights);
  return rec;
}

inline TeacherDataset build_teacher_dataset(
    const std::vector<WindowPair>& train_windows, const KnowledgeBase& kb,
    const Embedder& embedder, const RetrievalConfig& cfg,
    const QuantileLevels& levels, int threads = 1) {
  cfg.validate();
  TeacherDataset out;
  out.levels = levels;
  out.config = cfg;

  std::vector<std::optional<TeacherRecord>> results(train_windows.size());
  parallel_for(train_windows.size(), threads, [&](std::size_t i) {
    try {
      const Vector e = embedder.embed(train_windows[i].context);
      results[i] = teach_window(train_windows[i], e, kb, cfg, levels);
    } catch (const NoNeighborsError&) {
      results[i] = std::nullopt;
    }
  });
  for (auto& r : results) {
    if (r)
      out.records.push_back(std::move(*r));
    else
      ++out.skipped;
  }
  if (out.records.empty())
    throw std::runtime_error("build_teacher_dataset: teacher dataset empty");
  return out;
}

}  // namespace tsmem
