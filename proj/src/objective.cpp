#include "seqcr/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace seqcr {

Var ce_loss(const BatchTrace& trace, std::span<const std::vector<std::size_t>> labels) {
  const std::size_t B = trace.batch_size();
  if (labels.size() != B) {
    throw std::invalid_argument("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(B) + " traces");
  }
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b].size() != trace.length(b) || labels[b].size() > trace.steps()) {
      throw std::invalid_argument("ce_loss: label length " + std::to_string(labels[b].size()) +
                                  " does not match trace length " +
                                  std::to_string(trace.length(b)));
    }
  }
  Tape& tape = trace.log_probs.at(0).tape();
  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < trace.steps(); ++t) {
    std::vector<std::size_t> tokens(B, 0);
    Tensor w({B}, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      if (t < labels[b].size()) {
        tokens[b] = labels[b][t];
        w[b] = -1.0 / (static_cast<double>(labels[b].size()) * static_cast<double>(B));
      }
    }
    total = add(total, sum(mul(pick(trace.log_probs[t], tokens), tape.constant(std::move(w)))));
  }
  return total;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  constexpr double kFloor = 1e-12;
  double kl = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] <= 0.0) continue;
    kl += p[c] * (std::log(std::max(p[c], kFloor)) - std::log(std::max(q[c], kFloor)));
  }
  return kl;
}

CcrBatch ccr_loss(std::span<const DecodeTrace> teacher, const BatchTrace& student,
                  std::span<const std::size_t> rows, double tau) {
  if (teacher.size() != rows.size()) {
    throw std::invalid_argument("ccr_loss: teacher/rows size mismatch");
  }
  if (student.steps() == 0) throw std::invalid_argument("ccr_loss: empty student trace");
  Tape& tape = student.log_probs[0].tape();
  const std::size_t B = student.batch_size();
  const std::size_t V = student.log_probs[0].shape()[1];

  CcrBatch out;
  std::vector<double> row_weight(B, 0.0);
  std::vector<const DecodeTrace*> row_teacher(B, nullptr);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const DecodeTrace& tr = teacher[k];
    const std::size_t b = rows[k];
    if (tr.length() != student.length(b) || tr.probs.dim(1) != V) {
      throw std::invalid_argument("ccr_loss: teacher length " + std::to_string(tr.length()) +
                                  " does not match student length " +
                                  std::to_string(student.length(b)));
    }
    if (tr.confidence > tau) {
      ++out.gated_in;
      row_weight[b] = 1.0 / static_cast<double>(tr.length());
      row_teacher[b] = &tr;
    }
  }
  if (out.gated_in == 0) {
    out.loss = tape.constant(Tensor::scalar(0.0));
    return out;
  }
  const double denom = static_cast<double>(out.gated_in);

  // KL = sum p log p  -  sum p log q ; the first sum is constant.
  double constant = 0.0;
  Var cross = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < student.steps(); ++t) {
    Tensor w({B, V}, 0.0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
      if (!row_teacher[b] || t >= row_teacher[b]->length()) continue;
      auto p = row_teacher[b]->probs.row(t);
      for (std::size_t c = 0; c < V; ++c) {
        if (p[c] <= 0.0) continue;
        w.at(b, c) = -row_weight[b] * p[c] / denom;
        constant += row_weight[b] * p[c] * std::log(std::max(p[c], 1e-12)) / denom;
      }
      any = true;
    }
    if (any) cross = add(cross, sum(mul(student.log_probs[t], tape.constant(std::move(w)))));
  }
  out.loss = shift(cross, constant);
  return out;
}

void LossWeights::validate() const {
  if (ccr < 0.0 || wvcr < 0.0 || scst < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

std::pair<Var, LossBreakdown> total_loss(const LossTerms& terms, const LossWeights& weights,
                                         double gate_pass_fraction) {
  weights.validate();
  if (!terms.ce.valid()) throw std::invalid_argument("total_loss: missing ce term");
  LossBreakdown br;
  br.gate_pass_fraction = gate_pass_fraction;
  br.ce = terms.ce.value().item();
  Var total = terms.ce;
  auto add_term = [&](Var term, double lambda, double& slot) {
    if (!term.valid()) return;
    slot = term.value().item();
    if (lambda != 0.0) total = add(total, scale(term, lambda));
  };
  add_term(terms.ccr, weights.ccr, br.ccr);
  add_term(terms.wvcr, weights.wvcr, br.wvcr);
  add_term(terms.scst, weights.scst, br.scst);
  br.total = br.ce + weights.ccr * br.ccr + weights.wvcr * br.wvcr + weights.scst * br.scst;
  return {total, br};
}

}  // namespace seqcr
