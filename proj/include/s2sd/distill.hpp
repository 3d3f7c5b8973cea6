#pragma once

// Simultaneous similarity-based self-distillation objectives.
//
// Every objective combines a DML bracket over all embedding spaces with
// distillation terms that pull a lower-dimensional (student) similarity matrix
// toward a higher-dimensional (teacher) one. The teacher side of every term is
// wrapped in stop_gradient, so distillation never updates a teacher branch.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "s2sd/autodiff.hpp"
#include "s2sd/heads.hpp"

namespace s2sd {

enum class Topology { dual, multi, nested, chained };
enum class DistillVariant { rowwise_kl, full_kl, rowmean_kl, cosine_match, euclidean_match };

Topology parse_topology(const std::string& name);
DistillVariant parse_distill_variant(const std::string& name);
std::string to_string(Topology t);
std::string to_string(DistillVariant v);

struct DistillConfig {
  double gamma = 50.0;
  double temperature = 1.0;
  Topology topology = Topology::multi;
  std::vector<std::size_t> target_dims{512, 1024, 1536, 2048};
  bool feature_distill = false;
  std::size_t warmup_n = 1000;
  PoolingMode pooling = PoolingMode::avg;
  DistillVariant variant = DistillVariant::rowwise_kl;

  /// Throws std::invalid_argument on gamma < 0, T <= 0, or target dims not
  /// strictly ascending and above `base_dim`.
  void validate(std::size_t base_dim) const;
};

/// softmax(D_i,: / T) for every row.
Var row_softmax(Var similarity, double temperature);

/// sum_i KL(softmax(Ds_i/T) || softmax(Dt_i/T)); the teacher is gradient-stopped.
Var kl_rowwise(Var student, Var teacher, double temperature);

/// One of the five similarity-matching terms; the teacher is gradient-stopped.
Var distill_variant(Var student, Var teacher, double temperature, DistillVariant variant);

/// L_DML for the space at `space` (0 is the base space, then targets ascending).
using DmlFn = std::function<Var(Var embeddings, std::size_t space)>;

/// (student, teacher) space indices over which a topology distills. For the
/// dual and multi topologies the student is always the base space.
std::vector<std::pair<std::size_t, std::size_t>> distill_pairs(Topology topology,
                                                                std::size_t n_spaces);

struct ObjectiveBreakdown {
  std::vector<double> dml;  // per space
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> distill;  // per pair, unweighted
  double dml_term = 0.0;        // the bracketed DML mean
  double distill_term = 0.0;    // weighted pair sum
  double feature_term = 0.0;    // weighted feature term, 0 while inactive
  bool feature_active = false;
  double total = 0.0;
};

struct Objective {
  Var total;
  ObjectiveBreakdown parts;
};

/// 1/2 [L(f) + L(g)] + gamma * L_dist(D^f, D^g).
Objective dsd_loss(Var base, Var target, const DmlFn& dml, const DistillConfig& config);

/// 1/2 [L(f) + 1/m sum L(g_i)] + gamma/m sum L_dist(D^f, D^g_i).
Objective msd_loss(Var base, std::span<const Var> targets, const DmlFn& dml,
                   const DistillConfig& config);

/// MSD plus gamma * L_dist(D^f, D^phi) once step >= warmup_n. `features` are
/// the row-normalized pooled inputs.
Objective msdf_loss(Var base, std::span<const Var> targets, Var features, const DmlFn& dml,
                    const DistillConfig& config, std::size_t step);

/// Distills each space into every lower-dimensional one, normalized by m.
Objective nested_loss(std::span<const Var> spaces, const DmlFn& dml, const DistillConfig& config);

/// Distills each space only into its nearest lower-dimensional neighbour.
Objective chained_loss(std::span<const Var> spaces, const DmlFn& dml, const DistillConfig& config);

/// Dispatches on config.topology; adds the feature term when
/// config.feature_distill is set, `features` is given and step >= warmup_n.
Objective s2sd_objective(std::span<const Var> spaces, std::optional<Var> features,
                         const DmlFn& dml, const DistillConfig& config, std::size_t step);

}  // namespace s2sd
