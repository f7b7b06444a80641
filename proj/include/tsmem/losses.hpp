#pragma once

// Distillation loss stack over the student's quantile output: task pinball,
// confidence-gated teacher alignment (quantile + incremental-median terms),
// backbone anchoring, quantile-crossing penalty, and the composite total.
// Every operation returns its analytic (sub)gradient with respect to the
// student output, with kink conventions fixed for determinism.

#include "tsmem/core.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsmem {

// Q x H x C gradient/operand stored as one H x C matrix per level.
using QTensor = std::vector<Matrix>;

inline QTensor qtensor_zeros(int Q, long H, long C) {
  return QTensor(Q, Matrix::Zero(H, C));
}

struct LossConfig {
  double huber_kappa = 1.0;   // Huber threshold
  double delta_weight = 0.5;  // weight of the incremental-median term
  double lambda_align = 1.0;
  double lambda_reg = 0.1;
  double lambda_cross = 1.0;
  double gate_margin = 0.0;   // teacher must beat the backbone by this much
  double conf_exponent = 1.0;

  void validate() const {
    detail::require(huber_kappa > 0.0, "LossConfig: kappa must be positive");
    detail::require(lambda_align >= 0.0 && lambda_reg >= 0.0 &&
                        lambda_cross >= 0.0,
                    "LossConfig: loss weights must be nonnegative");
  }
};

struct GateResult {
  bool open = false;      // chi
  double omega = 0.0;     // chi * conf^gamma
  double err_teacher = 0.0;
  double err_base = 0.0;
};

struct LossBreakdown {
  double task = 0.0;
  double align = 0.0;   // already omega-weighted
  double anchor = 0.0;  // already (1-omega)-weighted
  double cross = 0.0;
  double total = 0.0;
};

inline double huber(double r, double kappa) {
  const double a = std::abs(r);
  return a <= kappa ? 0.5 * r * r : kappa * (a - 0.5 * kappa);
}

inline double huber_grad(double r, double kappa) {
  if (r > kappa) return kappa;
  if (r < -kappa) return -kappa;
  return r;
}

// Mean pinball over levels, horizon steps and channels.
inline double task_loss(const QTensor& q_mem, const Matrix& truth,
                        const QuantileLevels& levels, QTensor* grad = nullptr) {
  detail::require(q_mem.size() == static_cast<std::size_t>(levels.count()),
                  "task_loss: level count mismatch");
  check_same_shape(q_mem[0], truth, "task_loss");
  const long H = truth.rows(), C = truth.cols();
  const double scale = 1.0 / (static_cast<double>(q_mem.size()) * H * C);
  if (grad) *grad = qtensor_zeros(static_cast<int>(q_mem.size()), H, C);
  double acc = 0.0;
  for (std::size_t j = 0; j < q_mem.size(); ++j) {
    const double q = levels.levels[j];
    for (long h = 0; h < H; ++h) {
      for (long c = 0; c < C; ++c) {
        acc += pinball(q_mem[j](h, c), truth(h, c), q);
        if (grad) (*grad)[j](h, c) = scale * pinball_grad(q_mem[j](h, c), truth(h, c), q);
      }
    }
  }
  return acc * scale;
}

// Mean absolute deviation of the median-level slice from the truth.
inline double median_abs_err(const QTensor& values, const Matrix& truth,
                             int median_index) {
  detail::require(median_index >= 0 &&
                      median_index < static_cast<int>(values.size()),
                  "median_abs_err: invalid median index");
  check_same_shape(values[median_index], truth, "median_abs_err");
  return (truth - values[median_index]).array().abs().mean();
}

// Distillation gate: open iff the teacher beats the backbone by the margin.
inline GateResult gate(double err_teacher, double err_base, double conf,
                       const LossConfig& cfg) {
  GateResult g;
  g.err_teacher = err_teacher;
  g.err_base = err_base;
  g.open = err_teacher + cfg.gate_margin < err_base;
  g.omega = g.open ? std::pow(conf, cfg.conf_exponent) : 0.0;
  return g;
}

// Mean Huber distance between student and teacher quantiles.
inline double dq_loss(const QTensor& q_mem, const QTensor& q_teacher,
                      double kappa, QTensor* grad = nullptr) {
  detail::require(q_mem.size() == q_teacher.size(), "dq_loss: level mismatch");
  check_same_shape(q_mem[0], q_teacher[0], "dq_loss");
  const long H = q_mem[0].rows(), C = q_mem[0].cols();
  const double scale = 1.0 / (static_cast<double>(q_mem.size()) * H * C);
  if (grad) *grad = qtensor_zeros(static_cast<int>(q_mem.size()), H, C);
  double acc = 0.0;
  for (std::size_t j = 0; j < q_mem.size(); ++j) {
    for (long h = 0; h < H; ++h) {
      for (long c = 0; c < C; ++c) {
        const double r = q_mem[j](h, c) - q_teacher[j](h, c);
        acc += huber(r, kappa);
        if (grad) (*grad)[j](h, c) = scale * huber_grad(r, kappa);
      }
    }
  }
  return acc * scale;
}

// Aligns the student's incremental median correction over the backbone with
// the teacher's. Only the median slice of the student output is touched.
inline double delta_align_loss(const QTensor& q_mem, const QTensor& q_teacher,
                               const QTensor& q_base, int median_index,
                               double kappa, QTensor* grad = nullptr) {
  const Matrix& mem = q_mem[median_index];
  const Matrix& teach = q_teacher[median_index];
  const Matrix& base = q_base[median_index];
  check_same_shape(mem, base, "delta_align_loss");
  const long H = mem.rows(), C = mem.cols();
  const double scale = 1.0 / (static_cast<double>(H) * C);
  if (grad) *grad = qtensor_zeros(static_cast<int>(q_mem.size()), H, C);
  double acc = 0.0;
  for (long h = 0; h < H; ++h) {
    for (long c = 0; c < C; ++c) {
      // (mem - base) - (teach - base) == mem - teach; the base shift cancels
      // exactly, but err terms keep the definitional form below readable.
      const double r = (mem(h, c) - base(h, c)) - (teach(h, c) - base(h, c));
      acc += huber(r, kappa);
      if (grad) (*grad)[median_index](h, c) = scale * huber_grad(r, kappa);
    }
  }
  return acc * scale;
}

// Backbone anchoring of the median slice, weighted by (1 - omega).
inline double anchor_loss(const QTensor& q_mem, const QTensor& q_base,
                          int median_index, double omega, double kappa,
                          QTensor* grad = nullptr) {
  const Matrix& mem = q_mem[median_index];
  const Matrix& base = q_base[median_index];
  check_same_shape(mem, base, "anchor_loss");
  const long H = mem.rows(), C = mem.cols();
  const double w = 1.0 - omega;
  const double scale = w / (static_cast<double>(H) * C);
  if (grad) *grad = qtensor_zeros(static_cast<int>(q_mem.size()), H, C);
  double acc = 0.0;
  for (long h = 0; h < H; ++h) {
    for (long c = 0; c < C; ++c) {
      const double r = mem(h, c) - base(h, c);
      acc += huber(r, kappa);
      if (grad) (*grad)[median_index](h, c) = scale * huber_grad(r, kappa);
    }
  }
  return acc * scale;
}

// Hinge on adjacent-level inversions; subgradient 0 at exact equality.
inline double crossing_penalty(const QTensor& q_mem, QTensor* grad = nullptr) {
  const int Q = static_cast<int>(q_mem.size());
  const long H = q_mem[0].rows(), C = q_mem[0].cols();
  if (grad) *grad = qtensor_zeros(Q, H, C);
  if (Q < 2) return 0.0;
  const double scale = 1.0 / (static_cast<double>(Q - 1) * H * C);
  double acc = 0.0;
  for (int j = 0; j + 1 < Q; ++j) {
    for (long h = 0; h < H; ++h) {
      for (long c = 0; c < C; ++c) {
        const double v = q_mem[j](h, c) - q_mem[j + 1](h, c);
        if (v > 0.0) {
          acc += v;
          if (grad) {
            (*grad)[j](h, c) += scale;
            (*grad)[j + 1](h, c) -= scale;
          }
        }
      }
    }
  }
  return acc * scale;
}

// ---------------------------------------------------------------------------
// Per-sample and batch composition.

struct LossSample {
  long anchor = 0;
  const QTensor* q_mem = nullptr;      // student output, raw scale
  const QTensor* q_teacher = nullptr;  // teacher quantiles
  const QTensor* q_base = nullptr;     // frozen backbone quantiles
  const Matrix* truth = nullptr;
  double confidence = 0.0;
};

struct SampleLoss {
  LossBreakdown breakdown;
  GateResult gate;
  QTensor gradient;  // d(total) / d(q_mem)
};

inline SampleLoss total_loss_sample(const LossSample& s,
                                    const QuantileLevels& levels,
                                    const LossConfig& cfg) {
  cfg.validate();
  detail::require(s.q_mem && s.q_teacher && s.truth,
                  "total_loss: incomplete sample at anchor " +
                      std::to_string(s.anchor));
  if (!s.q_base)
    throw std::runtime_error("total_loss: missing base forecast for anchor " +
                             std::to_string(s.anchor));
  const int j_star = levels.median_index;
  const int Q = levels.count();
  const long H = s.truth->rows(), C = s.truth->cols();

  SampleLoss out;
  QTensor g_task, g_dq, g_delta, g_anchor, g_cross;
  out.breakdown.task = task_loss(*s.q_mem, *s.truth, levels, &g_task);

  const double err_teacher = median_abs_err(*s.q_teacher, *s.truth, j_star);
  const double err_base = median_abs_err(*s.q_base, *s.truth, j_star);
  out.gate = gate(err_teacher, err_base, s.confidence, cfg);
  const double omega = out.gate.omega;

  double dq = 0.0, ddelta = 0.0;
  if (omega > 0.0) {
    dq = dq_loss(*s.q_mem, *s.q_teacher, cfg.huber_kappa, &g_dq);
    ddelta = delta_align_loss(*s.q_mem, *s.q_teacher, *s.q_base, j_star,
                              cfg.huber_kappa, &g_delta);
  }
  out.breakdown.align = omega * (dq + cfg.delta_weight * ddelta);

  out.breakdown.anchor = anchor_loss(*s.q_mem, *s.q_base, j_star, omega,
                                     cfg.huber_kappa, &g_anchor);
  out.breakdown.cross = crossing_penalty(*s.q_mem, &g_cross);
  out.breakdown.total =
      out.breakdown.task + cfg.lambda_align * out.breakdown.align +
      cfg.lambda_reg * (out.breakdown.anchor +
                        cfg.lambda_cross * out.breakdown.cross);

  out.gradient = qtensor_zeros(Q, H, C);
  for (int j = 0; j < Q; ++j) {
    out.gradient[j] = g_task[j] + cfg.lambda_reg * (g_anchor[j] +
                      cfg.lambda_cross * g_cross[j]);
    if (omega > 0.0)
      out.gradient[j] += cfg.lambda_align * omega *
                         (g_dq[j] + cfg.delta_weight * g_delta[j]);
  }
  return out;
}

struct BatchLoss {
  LossBreakdown mean;                   // component means; total recomposed
  std::vector<QTensor> sample_grads;    // d(mean total) / d(q_mem of sample)
  double gate_open_fraction = 0.0;
};

inline BatchLoss total_loss(const std::vector<LossSample>& batch,
                            const QuantileLevels& levels,
                            const LossConfig& cfg) {
  detail::require(!batch.empty(), "total_loss: empty batch");
  BatchLoss out;
  out.sample_grads.resize(batch.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  long open = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SampleLoss s = total_loss_sample(batch[i], levels, cfg);
    out.mean.task += s.breakdown.task * inv_b;
    out.mean.align += s.breakdown.align * inv_b;
    out.mean.anchor += s.breakdown.anchor * inv_b;
    out.mean.cross += s.breakdown.cross * inv_b;
    if (s.gate.open) ++open;
    out.sample_grads[i] = std::move(s.gradient);
    for (Matrix& m : out.sample_grads[i]) m *= inv_b;
  }
  out.mean.total = out.mean.task + cfg.lambda_align * out.mean.align +
                   cfg.lambda_reg * (out.mean.anchor +
                                     cfg.lambda_cross * out.mean.cross);
  out.gate_open_fraction = static_cast<double>(open) / batch.size();
  return out;
}

}  // namespace tsmem
