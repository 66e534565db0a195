#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "seqcr/autodiff.hpp"
#include "seqcr/recognizer.hpp"

namespace seqcr {

/// Mean over samples of the per-sample mean of -log P_t[y_t], EOS step
/// included. `trace` must be a teacher-forced decode of `labels`.
Var ce_loss(const BatchTrace& trace, std::span<const std::vector<std::size_t>> labels);

struct CcrBatch {
  Var loss;
  std::size_t gated_in = 0;
};

/// Character-level consistency. Row rows[k] of the student's teacher-forced
/// trace (forced with teacher[k].tokens on the strong view) is compared with
/// the teacher's weak-view distributions:
///   1(S_teacher > tau) * (1/T_w) * sum_i KL(p_teacher_i || p_student_i)
/// and averaged over the gated-in rows. Teacher distributions are constants.
CcrBatch ccr_loss(std::span<const DecodeTrace> teacher, const BatchTrace& student,
                  std::span<const std::size_t> rows, double tau);

/// KL(p || q) for one pair of probability vectors, with a 1e-12 floor inside
/// both logarithms.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct LossWeights {
  double ccr = 1.0;   // lambda_1
  double wvcr = 0.1;  // lambda_2
  double scst = 0.1;  // lambda_3
  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double ccr = 0.0;
  double wvcr = 0.0;
  double scst = 0.0;
  double total = 0.0;
  double gate_pass_fraction = 0.0;
};

/// total = ce + l1*ccr + l2*wvcr + l3*scst; unset terms count as zero.
struct LossTerms {
  Var ce;
  Var ccr;
  Var wvcr;
  Var scst;
};

std::pair<Var, LossBreakdown> total_loss(const LossTerms& terms, const LossWeights& weights,
                                         double gate_pass_fraction);

}  // namespace seqcr
