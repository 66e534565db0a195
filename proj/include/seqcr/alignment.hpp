#pragma once

// Word-level visual consistency: monotone shortest-path alignment between a
// teacher glimpse sequence and a student glimpse sequence.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "seqcr/autodiff.hpp"
#include "seqcr/recognizer.hpp"

namespace seqcr {

struct AlignmentResult {
  Tensor cumulative;                                     // S, same dims as D
  std::vector<std::pair<std::size_t, std::size_t>> path;  // 0-based, (0,0) .. (Tw-1,Ts-1)
  double total = 0.0;                                    // S[Tw-1][Ts-1]
};

/// d_ij = 1 - cos(teacher_i, student_j). Teacher rows are treated as
/// constants; the result is differentiable in the student rows.
Var cosine_distance_matrix(Var teacher, Var student);
Tensor cosine_distance_matrix(const Tensor& teacher, const Tensor& student);

/// Cumulative-cost DP with moves down, right and diagonal. Backtracking
/// prefers diagonal, then up, then left on ties.
AlignmentResult shortest_path(const Tensor& distances);

/// Exhaustive minimum over monotone lattice paths; both dims must be <= 7.
double brute_force_shortest_path(const Tensor& distances);

/// Sum of d_ij along a fixed path, differentiable in the student rows. The
/// path itself is held constant (subgradient of the min).
Var path_cost(Var teacher, Var student,
              std::span<const std::pair<std::size_t, std::size_t>> path);

/// Shortest-path distance between teacher glimpses [Tw, D] and student
/// glimpses [Ts, D]. Both sequences must exclude the EOS step.
Var wvcr_loss(const Tensor& teacher_glimpses, Var student_glimpses);

struct WvcrBatch {
  Var loss;                     // mean over the requested rows
  std::size_t empty_traces = 0; // rows skipped because a side had no character steps
  double mean_distance = 0.0;
};

/// Batched form used in training: row b of `student` (ST-Gumbel greedy
/// decode) is aligned to `teacher[i]` for rows[i] = b. Contributions are
/// averaged over rows.size(); rows with an empty side contribute 0.
WvcrBatch wvcr_loss_batch(std::span<const DecodeTrace> teacher, const BatchTrace& student,
                          std::span<const std::size_t> rows, std::size_t eos);

}  // namespace seqcr
