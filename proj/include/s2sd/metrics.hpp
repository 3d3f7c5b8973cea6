#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "s2sd/heads.hpp"
#include "s2sd/tensor.hpp"

namespace s2sd {

/// Fraction of queries with a same-class sample among their k nearest
/// neighbours by cosine similarity (self excluded, ties to the lower index).
std::map<std::size_t, double> recall_at_k(const Tensor& embeddings, std::span<const Label> labels,
                                          std::span<const std::size_t> ks);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  Tensor centers;
  std::vector<double> inertia;  // after each assignment step
};

/// Lloyd's algorithm with k-means++ seeding; empty clusters are reseeded at
/// the point farthest from its current center.
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters = 100);

/// I(A; L) / sqrt(H(A) H(L)) in nats; 1 when both entropies vanish.
double nmi(std::span<const std::size_t> assignment, std::span<const Label> labels);

/// Mean intra-class pairwise distance over mean distance between
/// sphere-normalized class centers.
double embedding_density(const Tensor& embeddings, std::span<const Label> labels);

/// Singular values in descending order, from a cyclic Jacobi eigensolve of
/// the d x d Gram matrix.
std::vector<double> singular_values(const Tensor& matrix);

/// Symmetric eigenvalues (descending) by cyclic Jacobi rotations.
std::vector<double> jacobi_eigenvalues(const Tensor& symmetric);

/// KL(U || s) between the uniform distribution and the normalized singular
/// value spectrum, after dropping the `skip` leading singular values.
double spectral_decay(const Tensor& embeddings, std::size_t skip = 0);

struct MetricsRecord {
  std::map<std::size_t, double> recall_at;
  double nmi = 0.0;
  double density_ratio = 0.0;
  double spectral_decay = 0.0;
  std::string split = "test";
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

/// Leading singular values left out of the reported spectral decay: the
/// fraction 10/128, rounded up, and never the whole spectrum.
std::size_t spectral_skip(std::size_t dim);

/// R@1, R@2, NMI (k-means with k = number of classes), density and
/// spectral_decay(embeddings, spectral_skip(d)).
MetricsRecord compute_metrics(const Tensor& embeddings, std::span<const Label> labels,
                              std::uint64_t seed, std::size_t step = 0,
                              std::string split = "test");

}  // namespace s2sd
