#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "s2sd/autodiff.hpp"
#include "s2sd/heads.hpp"
#include "s2sd/rng.hpp"

namespace s2sd {

/// A loss value plus a flag raised when the batch held nothing to optimize.
struct LossResult {
  Var value;
  bool warning = false;
};

/// D = E E^T for row-normalized E. Throws if any row norm is off by more than 1e-6.
Var pairwise_cosine(Var embeddings);
/// d_ij = sqrt(2 - 2 D_ij) clamped at 0, with an exactly zero diagonal.
Var pairwise_euclidean(Var embeddings);

struct Triplet {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;
};
using BatchTuples = std::vector<Triplet>;

/// Mean over tuples of [d_ap - d_an + margin]_+.
LossResult triplet_loss(Var embeddings, std::span<const Triplet> tuples, double margin);

/// Mean over tuples of [d_ap - beta + m]_+ + [beta - d_an + m]_+. `beta` is a
/// 1x1 parameter, or 1xK with `beta_slot[i]` naming the entry for sample i.
LossResult margin_loss(Var embeddings, std::span<const Triplet> tuples, Var beta, double margin,
                       std::span<const std::size_t> beta_slot = {});

struct MultiSimilarityParams {
  double alpha = 2.0;    // positive scale
  double beta = 40.0;    // negative scale
  double lambda = 0.5;   // similarity threshold
  double epsilon = 0.1;  // mining margin
};

/// Multisimilarity loss with in-batch pair mining, averaged over contributing anchors.
LossResult multisimilarity_loss(Var similarity, std::span<const Label> labels,
                                const MultiSimilarityParams& params);

/// n_classes distinct classes, n_per_class distinct samples each, grouped by class.
std::vector<std::size_t> class_balanced_batch(std::span<const Label> labels_pool,
                                              std::size_t n_classes, std::size_t n_per_class,
                                              Rng& rng);

struct DistanceSampling {
  double lower_cutoff = 0.5;
  double upper_cutoff = 1.4;
  /// Floor on a negative's weight relative to the heaviest in-band negative.
  double clip = 0.01;
};

/// Normalized selection probabilities over `distances` (zero for non-negatives).
std::vector<double> distance_weights(std::span<const double> distances,
                                     std::span<const Label> labels, std::size_t anchor,
                                     std::size_t embed_dim, const DistanceSampling& sampling = {});

/// Draws one negative for `anchor` with probability proportional to the
/// clipped inverse of the unit-sphere distance density.
std::size_t distance_weighted_negative(std::span<const double> distances,
                                       std::span<const Label> labels, std::size_t anchor,
                                       std::size_t embed_dim, Rng& rng,
                                       const DistanceSampling& sampling = {});

/// Every in-batch (anchor, positive) pair with one distance-weighted negative.
BatchTuples sample_tuples(const Tensor& distances, std::span<const Label> labels,
                          std::size_t embed_dim, Rng& rng, const DistanceSampling& sampling = {});

enum class DmlKind { multisimilarity, margin, triplet };

DmlKind parse_dml_kind(const std::string& name);
std::string to_string(DmlKind kind);

struct DmlConfig {
  DmlKind kind = DmlKind::multisimilarity;
  MultiSimilarityParams multisimilarity;
  double margin = 0.2;
  double margin_beta0 = 0.6;
  bool margin_beta_per_class = false;
  double triplet_margin = 0.2;
  DistanceSampling sampling;
};

/// The configured DML objective on one embedding space. Tuple-based losses
/// draw negatives from `rng`; `beta` is only read by the margin loss.
LossResult dml_loss(const DmlConfig& config, Var embeddings, std::span<const Label> labels,
                    Rng& rng, Var beta = {}, std::span<const std::size_t> beta_slot = {});

}  // namespace s2sd
