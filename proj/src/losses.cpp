#include "s2sd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "s2sd/errors.hpp"

namespace s2sd {

namespace {

Var zero_like(Var anchor) { return anchor.graph().constant(Tensor::scalar(0.0)); }

void check_normalized(const Tensor& e, std::string_view op) {
  for (std::size_t i = 0; i < e.rows(); ++i) {
    double sq = 0.0;
    for (double v : e.row_span(i)) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(i) +
                                  " is not unit-normalized (norm " + std::to_string(std::sqrt(sq)) + ")");
    }
  }
}

void check_tuples(std::span<const Triplet> tuples, std::size_t batch) {
  for (const auto& t : tuples) {
    if (t.anchor >= batch || t.positive >= batch || t.negative >= batch) {
      throw std::invalid_argument("tuple index out of range for batch of " + std::to_string(batch));
    }
  }
}

// Distances for (anchor, positive) and (anchor, negative) of every tuple.
std::pair<Var, Var> tuple_distances(Var embeddings, std::span<const Triplet> tuples) {
  const std::size_t b = embeddings.rows();
  check_tuples(tuples, b);
  Var dist = pairwise_euclidean(embeddings);
  std::vector<std::size_t> ap, an;
  ap.reserve(tuples.size());
  an.reserve(tuples.size());
  for (const auto& t : tuples) {
    ap.push_back(t.anchor * b + t.positive);
    an.push_back(t.anchor * b + t.negative);
  }
  return {gather(dist, ap), gather(dist, an)};
}

}  // namespace

Var pairwise_cosine(Var embeddings) {
  check_normalized(embeddings.value(), "pairwise_cosine");
  return matmul_nt(embeddings, embeddings);
}

Var pairwise_euclidean(Var embeddings) {
  Var d = pairwise_cosine(embeddings);
  const std::size_t b = d.rows();
  Tensor off_diagonal({b, b}, 1.0);
  for (std::size_t i = 0; i < b; ++i) off_diagonal(i, i) = 0.0;
  // The mask pins the diagonal to exactly 0, where 2 - 2 D_ii would leave rounding residue.
  return mul(sqrt(maximum(add_scalar(scale(d, -2.0), 2.0), 0.0)), d.graph().constant(std::move(off_diagonal)));
}

LossResult triplet_loss(Var embeddings, std::span<const Triplet> tuples, double margin) {
  if (tuples.empty()) return {zero_like(embeddings), true};
  auto [d_ap, d_an] = tuple_distances(embeddings, tuples);
  return {mean(relu(add_scalar(sub(d_ap, d_an), margin))), false};
}

LossResult margin_loss(Var embeddings, std::span<const Triplet> tuples, Var beta, double margin,
                       std::span<const std::size_t> beta_slot) {
  if (!beta.valid()) throw std::invalid_argument("margin_loss: beta parameter missing");
  if (tuples.empty()) return {zero_like(embeddings), true};
  auto [d_ap, d_an] = tuple_distances(embeddings, tuples);
  Var b = beta;
  if (beta.value().size() > 1) {
    if (beta_slot.size() != embeddings.rows()) {
      throw std::invalid_argument("margin_loss: per-class beta needs one slot per sample");
    }
    std::vector<std::size_t> idx;
    idx.reserve(tuples.size());
    for (const auto& t : tuples) idx.push_back(beta_slot[t.anchor]);
    b = gather(beta, idx);
  }
  Var pos = relu(add_scalar(sub(d_ap, b), margin));
  Var neg = relu(add_scalar(sub(b, d_an), margin));
  return {mean(add(pos, neg)), false};
}

LossResult multisimilarity_loss(Var similarity, std::span<const Label> labels,
                                const MultiSimilarityParams& params) {
  const Tensor d = similarity.value();  // copied: recording below may move graph storage
  const std::size_t b = d.rows();
  if (d.rank() != 2 || d.cols() != b) {
    throw ShapeError("multisimilarity_loss: similarity must be square, got " + shape_string(d.shape()));
  }
  if (labels.size() != b) throw ShapeError("multisimilarity_loss: label count mismatch");

  std::vector<Var> terms;
  bool any_complete_anchor = false;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t k = 0; k < b; ++k) {
      if (k == i) continue;
      (labels[k] == labels[i] ? pos : neg).push_back(k);
    }
    if (pos.empty()) continue;
    any_complete_anchor = any_complete_anchor || !neg.empty();

    std::vector<std::size_t> mined_pos, mined_neg;
    if (neg.empty()) {
      for (auto k : pos) mined_pos.push_back(i * b + k);
    } else {
      double hardest_neg = d(i, neg[0]);
      for (auto k : neg) hardest_neg = std::max(hardest_neg, d(i, k));
      double hardest_pos = d(i, pos[0]);
      for (auto k : pos) hardest_pos = std::min(hardest_pos, d(i, k));
      for (auto k : pos)
        if (d(i, k) < hardest_neg + params.epsilon) mined_pos.push_back(i * b + k);
      for (auto k : neg)
        if (d(i, k) > hardest_pos - params.epsilon) mined_neg.push_back(i * b + k);
      if (mined_neg.empty()) continue;
    }
    if (mined_pos.empty()) continue;

    Var p = gather(similarity, mined_pos);
    Var pos_term = scale(log(add_scalar(sum(exp(scale(add_scalar(p, -params.lambda), -params.alpha))), 1.0)),
                         1.0 / params.alpha);
    if (!mined_neg.empty()) {
      Var n = gather(similarity, mined_neg);
      Var neg_term = scale(log(add_scalar(sum(exp(scale(add_scalar(n, -params.lambda), params.beta))), 1.0)),
                           1.0 / params.beta);
      terms.push_back(add(pos_term, neg_term));
    } else {
      terms.push_back(pos_term);
    }
  }
  if (terms.empty()) return {zero_like(similarity), true};
  Var total = terms[0];
  for (std::size_t t = 1; t < terms.size(); ++t) total = add(total, terms[t]);
  return {scale(total, 1.0 / static_cast<double>(terms.size())), !any_complete_anchor};
}

std::vector<std::size_t> class_balanced_batch(std::span<const Label> labels_pool,
                                              std::size_t n_classes, std::size_t n_per_class,
                                              Rng& rng) {
  if (n_classes == 0 || n_per_class == 0) {
    throw std::invalid_argument("class_balanced_batch: batch composition must be positive");
  }
  std::map<Label, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels_pool.size(); ++i) by_class[labels_pool[i]].push_back(i);
  std::vector<const std::vector<std::size_t>*> eligible;
  for (const auto& [label, members] : by_class) {
    if (members.size() >= n_per_class) eligible.push_back(&members);
  }
  if (eligible.size() < n_classes) {
    throw std::invalid_argument("class_balanced_batch: pool has " + std::to_string(eligible.size()) +
                                " classes with >= " + std::to_string(n_per_class) +
                                " samples, need " + std::to_string(n_classes));
  }
  // Partial Fisher-Yates: first n_classes slots become the chosen classes.
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::swap(eligible[c], eligible[c + rng.index(eligible.size() - c)]);
  }
  std::vector<std::size_t> batch;
  batch.reserve(n_classes * n_per_class);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<std::size_t> members = *eligible[c];
    for (std::size_t s = 0; s < n_per_class; ++s) {
      std::swap(members[s], members[s + rng.index(members.size() - s)]);
      batch.push_back(members[s]);
    }
  }
  return batch;
}

std::vector<double> distance_weights(std::span<const double> distances,
                                     std::span<const Label> labels, std::size_t anchor,
                                     std::size_t embed_dim, const DistanceSampling& sampling) {
  if (distances.size() != labels.size() || anchor >= labels.size()) {
    throw std::invalid_argument("distance_weights: distances/labels/anchor inconsistent");
  }
  const double n = static_cast<double>(embed_dim);
  std::vector<double> log_w(labels.size(), 0.0);
  std::vector<bool> in_band(labels.size(), false);
  bool any_negative = false;
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == labels[anchor]) continue;
    any_negative = true;
    if (distances[k] >= sampling.upper_cutoff) continue;
    const double dist = std::max(distances[k], sampling.lower_cutoff);
    // log(1/q(d)) with q(d) ~ d^(n-2) (1 - d^2/4)^((n-3)/2)
    log_w[k] = -(n - 2.0) * std::log(dist) - 0.5 * (n - 3.0) * std::log(1.0 - 0.25 * dist * dist);
    in_band[k] = true;
    peak = std::max(peak, log_w[k]);
  }
  if (!any_negative) {
    throw std::invalid_argument("distance_weighted_negative: anchor " + std::to_string(anchor) +
                                " has no negative in the batch");
  }
  std::vector<double> w(labels.size(), 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (!in_band[k]) continue;
    w[k] = std::max(std::exp(log_w[k] - peak), sampling.clip);
    total += w[k];
  }
  if (total == 0.0) {
    // Every negative lies beyond the upper cutoff: fall back to uniform.
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (labels[k] != labels[anchor]) {
        w[k] = 1.0;
        total += 1.0;
      }
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

std::size_t distance_weighted_negative(std::span<const double> distances,
                                       std::span<const Label> labels, std::size_t anchor,
                                       std::size_t embed_dim, Rng& rng,
                                       const DistanceSampling& sampling) {
  const auto w = distance_weights(distances, labels, anchor, embed_dim, sampling);
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (w[k] <= 0.0) continue;
    acc += w[k];
    last = k;
    if (u < acc) return k;
  }
  return last;
}

BatchTuples sample_tuples(const Tensor& distances, std::span<const Label> labels,
                          std::size_t embed_dim, Rng& rng, const DistanceSampling& sampling) {
  const std::size_t b = labels.size();
  if (distances.rows() != b || distances.cols() != b) {
    throw ShapeError("sample_tuples: distance matrix " + shape_string(distances.shape()) +
                     " for " + std::to_string(b) + " labels");
  }
  BatchTuples tuples;
  for (std::size_t a = 0; a < b; ++a) {
    bool has_negative = false;
    for (std::size_t k = 0; k < b; ++k) has_negative = has_negative || labels[k] != labels[a];
    if (!has_negative) continue;
    for (std::size_t p = 0; p < b; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      const std::size_t n = distance_weighted_negative(distances.row_span(a), labels, a, embed_dim, rng, sampling);
      tuples.push_back({a, p, n});
    }
  }
  return tuples;
}

DmlKind parse_dml_kind(const std::string& name) {
  if (name == "multisimilarity") return DmlKind::multisimilarity;
  if (name == "margin") return DmlKind::margin;
  if (name == "triplet") return DmlKind::triplet;
  throw std::invalid_argument("unknown DML loss '" + name + "'");
}

std::string to_string(DmlKind kind) {
  switch (kind) {
    case DmlKind::multisimilarity: return "multisimilarity";
    case DmlKind::margin: return "margin";
    case DmlKind::triplet: return "triplet";
  }
  return "?";
}

LossResult dml_loss(const DmlConfig& config, Var embeddings, std::span<const Label> labels,
                    Rng& rng, Var beta, std::span<const std::size_t> beta_slot) {
  if (config.kind == DmlKind::multisimilarity) {
    return multisimilarity_loss(pairwise_cosine(embeddings), labels, config.multisimilarity);
  }
  Graph scratch;
  const Tensor dist = pairwise_euclidean(scratch.constant(embeddings.value())).value();
  const auto tuples = sample_tuples(dist, labels, embeddings.cols(), rng, config.sampling);
  if (config.kind == DmlKind::triplet) return triplet_loss(embeddings, tuples, config.triplet_margin);
  return margin_loss(embeddings, tuples, beta, config.margin, beta_slot);
}

}  // namespace s2sd
