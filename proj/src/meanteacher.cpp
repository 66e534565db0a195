#include "seqcr/meanteacher.hpp"

#include <cmath>
#include <stdexcept>

namespace seqcr {

void ema_update(ModelState& teacher, const ModelState& student, double retention) {
  if (!(retention >= 0.0 && retention < 1.0)) {
    throw std::invalid_argument("ema_update: retention must be in [0, 1), got " +
                                std::to_string(retention));
  }
  if (!teacher.same_layout(student)) {
    throw std::invalid_argument("ema_update: teacher and student layouts differ");
  }
  const double keep = retention, take = 1.0 - retention;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher[i].data();
    auto s = student[i].data();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = keep * t[k] + take * s[k];
  }
}

double parameter_distance(const ModelState& a, const ModelState& b) {
  if (!a.same_layout(b)) throw std::invalid_argument("parameter_distance: layouts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      const double d = a[i][k] - b[i][k];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

std::vector<DecodeTrace> teacher_predict(const Recognizer& recognizer, const ModelState& teacher,
                                         std::span<const Tensor> weak_images) {
  return recognizer.predict(teacher, weak_images);
}

}  // namespace seqcr
