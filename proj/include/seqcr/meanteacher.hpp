#pragma once

#include <span>
#include <vector>

#include "seqcr/recognizer.hpp"

namespace seqcr {

/// teacher <- retention * teacher + (1 - retention) * student, elementwise.
/// retention must lie in [0, 1).
void ema_update(ModelState& teacher, const ModelState& student, double retention);

/// Euclidean distance between two equally laid out states.
double parameter_distance(const ModelState& a, const ModelState& b);

/// Gradient-free argmax decode of weakly augmented images; the returned
/// traces hold pseudo labels, distributions, glimpses and confidences.
std::vector<DecodeTrace> teacher_predict(const Recognizer& recognizer, const ModelState& teacher,
                                         std::span<const Tensor> weak_images);

}  // namespace seqcr
