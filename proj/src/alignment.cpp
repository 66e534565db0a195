#include "seqcr/alignment.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <stdexcept>

namespace seqcr {

namespace {

void check_pair(const Shape& a, const Shape& b) {
  if (a.size() != 2 || b.size() != 2 || a[1] != b[1]) {
    throw std::invalid_argument("cosine_distance_matrix: expected [Tw,D] and [Ts,D], got " +
                                to_string(a) + " and " + to_string(b));
  }
}

}  // namespace

Var cosine_distance_matrix(Var teacher, Var student) {
  check_pair(teacher.shape(), student.shape());
  const std::size_t tw = teacher.shape()[0], ts = student.shape()[0];
  std::vector<std::size_t> ti, si;
  for (std::size_t i = 0; i < tw; ++i) {
    for (std::size_t j = 0; j < ts; ++j) {
      ti.push_back(i);
      si.push_back(j);
    }
  }
  Var t = gather_rows(detach(teacher), ti);
  Var s = gather_rows(student, si);
  return reshape(shift(scale(cosine_similarity(t, s, 1), -1.0), 1.0), {tw, ts});
}

Tensor cosine_distance_matrix(const Tensor& teacher, const Tensor& student) {
  Tape tape;
  return cosine_distance_matrix(tape.constant(teacher), tape.constant(student)).value();
}

AlignmentResult shortest_path(const Tensor& d) {
  if (d.rank() != 2) {
    throw std::invalid_argument("shortest_path: expected a matrix, got " + to_string(d.shape()));
  }
  const std::size_t tw = d.dim(0), ts = d.dim(1);
  AlignmentResult r;
  r.cumulative = Tensor({tw, ts});
  Tensor& s = r.cumulative;
  for (std::size_t i = 0; i < tw; ++i) {
    for (std::size_t j = 0; j < ts; ++j) {
      double prev;
      if (i == 0 && j == 0) {
        prev = 0.0;
      } else if (j == 0) {
        prev = s.at(i - 1, 0);
      } else if (i == 0) {
        prev = s.at(0, j - 1);
      } else {
        prev = std::min({s.at(i - 1, j), s.at(i, j - 1), s.at(i - 1, j - 1)});
      }
      s.at(i, j) = prev + d.at(i, j);
    }
  }
  r.total = s.at(tw - 1, ts - 1);

  std::size_t i = tw - 1, j = ts - 1;
  r.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i == 0) {
      --j;
    } else if (j == 0) {
      --i;
    } else {
      const double diag = s.at(i - 1, j - 1), up = s.at(i - 1, j), left = s.at(i, j - 1);
      if (diag <= up && diag <= left) {
        --i;
        --j;
      } else if (up <= left) {
        --i;
      } else {
        --j;
      }
    }
    r.path.emplace_back(i, j);
  }
  std::reverse(r.path.begin(), r.path.end());
  return r;
}

double brute_force_shortest_path(const Tensor& d) {
  if (d.rank() != 2) {
    throw std::invalid_argument("brute_force_shortest_path: expected a matrix");
  }
  const std::size_t tw = d.dim(0), ts = d.dim(1);
  if (tw > 7 || ts > 7) {
    throw std::invalid_argument("brute_force_shortest_path: " + to_string(d.shape()) +
                                " exceeds the 7x7 enumeration limit");
  }
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> costs;
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t i, std::size_t j) {
    costs.push_back(d.at(i, j));
    if (i == tw - 1 && j == ts - 1) {
      double total = 0.0;
      for (double c : costs) total += c;
      best = std::min(best, total);
    } else {
      if (i + 1 < tw) walk(i + 1, j);
      if (j + 1 < ts) walk(i, j + 1);
      if (i + 1 < tw && j + 1 < ts) walk(i + 1, j + 1);
    }
    costs.pop_back();
  };
  walk(0, 0);
  return best;
}

Var path_cost(Var teacher, Var student,
              std::span<const std::pair<std::size_t, std::size_t>> path) {
  check_pair(teacher.shape(), student.shape());
  if (path.empty()) throw std::invalid_argument("path_cost: empty path");
  std::vector<std::size_t> ti, si;
  for (auto [i, j] : path) {
    ti.push_back(i);
    si.push_back(j);
  }
  Var cos = cosine_similarity(gather_rows(detach(teacher), ti), gather_rows(student, si), 1);
  return shift(scale(sum(cos), -1.0), static_cast<double>(path.size()));
}

Var wvcr_loss(const Tensor& teacher_glimpses, Var student_glimpses) {
  check_pair(teacher_glimpses.shape(), student_glimpses.shape());
  const AlignmentResult a =
      shortest_path(cosine_distance_matrix(teacher_glimpses, student_glimpses.value()));
  Tape& tape = student_glimpses.tape();
  return path_cost(tape.constant(teacher_glimpses), student_glimpses, a.path);
}

WvcrBatch wvcr_loss_batch(std::span<const DecodeTrace> teacher, const BatchTrace& student,
                          std::span<const std::size_t> rows, std::size_t eos) {
  if (teacher.size() != rows.size()) {
    throw std::invalid_argument("wvcr_loss_batch: teacher/rows size mismatch");
  }
  if (student.steps() == 0) throw std::invalid_argument("wvcr_loss_batch: empty student trace");
  Tape& tape = student.glimpses[0].tape();
  WvcrBatch out;
  const double denom = static_cast<double>(std::max<std::size_t>(rows.size(), 1));

  // For every student step j: which batch rows and which teacher glimpse
  // vectors lie on an optimal path cell (i, j).
  const std::size_t D = student.glimpses[0].shape()[1];
  std::vector<std::vector<std::size_t>> step_rows(student.steps());
  std::vector<std::vector<double>> step_teacher(student.steps());
  double constant = 0.0;
  double distance_sum = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t b = rows[k];
    const std::size_t tw = teacher[k].char_steps(eos);
    const std::size_t ts = char_steps(student.tokens[b], eos);
    if (tw == 0 || ts == 0) {
      ++out.empty_traces;
      continue;
    }
    Tensor zs({ts, D});
    for (std::size_t j = 0; j < ts; ++j) {
      auto src = student.glimpses[j].value().row(b);
      std::copy(src.begin(), src.end(), zs.row(j).begin());
    }
    Tensor zt({tw, D});
    for (std::size_t i = 0; i < tw; ++i) {
      auto src = teacher[k].glimpses.row(i);
      std::copy(src.begin(), src.end(), zt.row(i).begin());
    }
    const AlignmentResult a = shortest_path(cosine_distance_matrix(zt, zs));
    distance_sum += a.total;
    constant += static_cast<double>(a.path.size());
    for (auto [i, j] : a.path) {
      step_rows[j].push_back(b);
      auto tr = zt.row(i);
      step_teacher[j].insert(step_teacher[j].end(), tr.begin(), tr.end());
    }
  }

  // loss = (1/denom) * sum over path cells of (1 - cos)
  std::vector<Var> terms;
  for (std::size_t j = 0; j < student.steps(); ++j) {
    if (step_rows[j].empty()) continue;
    const std::size_t n = step_rows[j].size();
    Var zt = tape.constant(Tensor({n, D}, std::move(step_teacher[j])));
    Var zs = gather_rows(student.glimpses[j], step_rows[j]);
    terms.push_back(sum(cosine_similarity(zt, zs, 1)));
  }
  Var total;
  if (terms.empty()) {
    total = tape.constant(Tensor::scalar(0.0));
  } else {
    total = terms[0];
    for (std::size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
    total = shift(scale(total, -1.0), constant);
  }
  out.loss = scale(total, 1.0 / denom);
  out.mean_distance = distance_sum / denom;
  return out;
}

}  // namespace seqcr
