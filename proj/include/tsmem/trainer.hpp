#pragma once

// Deterministic distillation trainer: Adam with bias correction and global
// gradient-norm clipping, seeded per-epoch shuffling, and batch-parallel
// forward/backward with gradients reduced in fixed sample order.

#include "tsmem/backbone.hpp"
#include "tsmem/core.hpp"
#include "tsmem/losses.hpp"
#include "tsmem/parallel.hpp"
#include "tsmem/rng.hpp"
#include "tsmem/student.hpp"
#include "tsmem/teacher.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace tsmem {

struct TrainerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  int batch_size = 64;
  int epochs = 30;
  double clip_norm = 1.0;
  std::uint64_t seed = 7;
  int threads = 1;

  void validate() const {
    detail::require(learning_rate > 0.0, "TrainerConfig: lr must be positive");
    detail::require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
                    "TrainerConfig: betas must lie in (0,1)");
    detail::require(batch_size >= 1, "TrainerConfig: batch size must be >= 1");
    detail::require(epochs >= 1, "TrainerConfig: epochs must be >= 1");
    detail::require(clip_norm > 0.0, "TrainerConfig: clip norm must be positive");
  }
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t n, const TrainerConfig& cfg)
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  // Clips the gradient to the configured global l2 norm, then applies one
  // bias-corrected Adam step.
  void step(std::vector<double>& params, std::vector<double>& grad) {
    double norm_sq = 0.0;
    for (double g : grad) norm_sq += g * g;
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg_.clip_norm) {
      const double scale = cfg_.clip_norm / norm;
      for (double& g : grad) g *= scale;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      const double m_hat = m_[i] / bc1;
      const double v_hat = v_[i] / bc2;
      params[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.eps_opt);
    }
  }

  long step_count() const { return t_; }

 private:
  TrainerConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct EpochStats {
  LossBreakdown mean_loss;
  double val_pinball = 0.0;
  double gate_open_fraction = 0.0;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("TrainReport: cannot open " + path.string());
    out << "epoch,task,align,anchor,cross,total,val_pinball,gate_open_fraction,"
           "wall_seconds\n";
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      const auto& s = epochs[e];
      char buf[320];
      std::snprintf(buf, sizeof buf,
                    "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.3f\n",
                    e + 1, s.mean_loss.task, s.mean_loss.align,
                    s.mean_loss.anchor, s.mean_loss.cross, s.mean_loss.total,
                    s.val_pinball, s.gate_open_fraction, s.wall_seconds);
      out << buf;
    }
  }
};

// Mean pinball of the student on held-out windows.
inline double validation_pinball(const Student& student,
                                 const std::vector<WindowPair>& windows,
                                 int threads = 1) {
  if (windows.empty()) return 0.0;
  std::vector<double> risks(windows.size());
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    risks[i] = pinball_risk(student.forecast(windows[i].context,
                                             windows[i].anchor),
                            windows[i].future);
  });
  double acc = 0.0;
  for (double r : risks) acc += r;
  return acc / static_cast<double>(windows.size());
}

// Trains the memory module on the teacher dataset against cached backbone
// forecasts. Deterministic given the seeds: data order, batch parallelism
// and the optimizer all reduce in fixed order.
inline TrainReport train_student(Student& student,
                                 const TeacherDataset& teacher,
                                 const ForecastCache& cache,
                                 const TrainerConfig& trainer_cfg,
                                 const LossConfig& loss_cfg,
                                 const std::vector<WindowPair>* val_windows =
                                     nullptr) {
  trainer_cfg.validate();
  loss_cfg.validate();
  detail::require(!teacher.records.empty(), "train_student: empty teacher set");

  const QuantileLevels& levels = student.levels();
  const std::size_t n = teacher.records.size();
  const std::size_t param_count = student.param_count();
  const int threads = std::max(1, trainer_cfg.threads);

  // Base forecasts must exist for every record up front.
  for (const TeacherRecord& rec : teacher.records)
    if (!cache.find(rec.anchor))
      throw std::runtime_error(
          "train_student: missing base forecast for anchor " +
          std::to_string(rec.anchor));

  AdamOptimizer adam(param_count, trainer_cfg);
  Rng shuffle_rng(trainer_cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  std::vector<StudentWorkspace> workspaces(threads);
  std::vector<std::vector<double>> sample_grads;
  std::vector<double> batch_grad(param_count);

  for (int epoch = 0; epoch < trainer_cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);

    LossBreakdown epoch_mean;
    double epoch_gate_open = 0.0;
    std::size_t batches = 0;

    for (std::size_t begin = 0; begin < n; begin += trainer_cfg.batch_size) {
      const std::size_t bsz =
          std::min<std::size_t>(trainer_cfg.batch_size, n - begin);
      std::vector<const TeacherRecord*> recs(bsz);
      for (std::size_t i = 0; i < bsz; ++i)
        recs[i] = &teacher.records[order[begin + i]];

      std::vector<QTensor> outputs(bsz);
      parallel_for_workers(bsz, threads, [&](int worker, std::size_t i) {
        outputs[i] = student.forward(recs[i]->context, recs[i]->anchor,
                                     workspaces[worker]);
        // Workspaces are reused across samples, so the backward pass for a
        // sample must run before its worker moves on; see below.
      });

      // One workspace per sample is needed to split forward and backward
      // phases; instead run forward+backward together per sample.
      sample_grads.assign(bsz, std::vector<double>(param_count, 0.0));
      std::vector<SampleLoss> losses(bsz);
      parallel_for_workers(bsz, threads, [&](int worker, std::size_t i) {
        StudentWorkspace& ws = workspaces[worker];
        QTensor out = student.forward(recs[i]->context, recs[i]->anchor, ws);
        LossSample sample;
        sample.anchor = recs[i]->anchor;
        sample.q_mem = &out;
        sample.q_teacher = &recs[i]->teacher_quantiles.values;
        sample.q_base = &cache.find(recs[i]->anchor)->values;
        sample.truth = &recs[i]->future;
        sample.confidence = recs[i]->confidence;
        losses[i] = total_loss_sample(sample, levels, loss_cfg);
        student.backward(losses[i].gradient, ws, sample_grads[i]);
      });

      // NaN guard with the offending anchors.
      std::string bad_anchors;
      for (std::size_t i = 0; i < bsz; ++i)
        if (!std::isfinite(losses[i].breakdown.total))
          bad_anchors += (bad_anchors.empty() ? "" : ",") +
                         std::to_string(recs[i]->anchor);
      if (!bad_anchors.empty())
        throw std::runtime_error("train_student: non-finite loss at anchors " +
                                 bad_anchors);

      // Deterministic reduction: fixed batch order, then the mean scaling.
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      const double inv_b = 1.0 / static_cast<double>(bsz);
      for (std::size_t i = 0; i < bsz; ++i)
        for (std::size_t p = 0; p < param_count; ++p)
          batch_grad[p] += sample_grads[i][p];
      for (double& g : batch_grad) g *= inv_b;

      adam.step(student.params().data_mut(), batch_grad);

      LossBreakdown batch_mean;
      double open = 0.0;
      for (const SampleLoss& s : losses) {
        batch_mean.task += s.breakdown.task * inv_b;
        batch_mean.align += s.breakdown.align * inv_b;
        batch_mean.anchor += s.breakdown.anchor * inv_b;
        batch_mean.cross += s.breakdown.cross * inv_b;
        if (s.gate.open) open += inv_b;
      }
      batch_mean.total =
          batch_mean.task + loss_cfg.lambda_align * batch_mean.align +
          loss_cfg.lambda_reg *
              (batch_mean.anchor + loss_cfg.lambda_cross * batch_mean.cross);
      epoch_mean.task += batch_mean.task;
      epoch_mean.align += batch_mean.align;
      epoch_mean.anchor += batch_mean.anchor;
      epoch_mean.cross += batch_mean.cross;
      epoch_mean.total += batch_mean.total;
      epoch_gate_open += open;
      ++batches;
    }

    EpochStats stats;
    const double inv_batches = 1.0 / static_cast<double>(batches);
    stats.mean_loss.task = epoch_mean.task * inv_batches;
    stats.mean_loss.align = epoch_mean.align * inv_batches;
    stats.mean_loss.anchor = epoch_mean.anchor * inv_batches;
    stats.mean_loss.cross = epoch_mean.cross * inv_batches;
    stats.mean_loss.total = epoch_mean.total * inv_batches;
    stats.gate_open_fraction = epoch_gate_open * inv_batches;
    if (val_windows)
      stats.val_pinball = validation_pinball(student, *val_windows, threads);
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    report.epochs.push_back(stats);
  }
  return report;
}

}  // namespace tsmem
