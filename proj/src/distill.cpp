#include "s2sd/distill.hpp"

#include <stdexcept>

#include "s2sd/errors.hpp"
#include "s2sd/losses.hpp"

namespace s2sd {

Topology parse_topology(const std::string& name) {
  if (name == "dual") return Topology::dual;
  if (name == "multi") return Topology::multi;
  if (name == "nested") return Topology::nested;
  if (name == "chained") return Topology::chained;
  throw std::invalid_argument("unknown topology '" + name + "'");
}

DistillVariant parse_distill_variant(const std::string& name) {
  if (name == "rowwise_kl") return DistillVariant::rowwise_kl;
  if (name == "full_kl") return DistillVariant::full_kl;
  if (name == "rowmean_kl") return DistillVariant::rowmean_kl;
  if (name == "cosine_match") return DistillVariant::cosine_match;
  if (name == "euclidean_match") return DistillVariant::euclidean_match;
  throw std::invalid_argument("unknown distillation variant '" + name + "'");
}

std::string to_string(Topology t) {
  switch (t) {
    case Topology::dual: return "dual";
    case Topology::multi: return "multi";
    case Topology::nested: return "nested";
    case Topology::chained: return "chained";
  }
  return "?";
}

std::string to_string(DistillVariant v) {
  switch (v) {
    case DistillVariant::rowwise_kl: return "rowwise_kl";
    case DistillVariant::full_kl: return "full_kl";
    case DistillVariant::rowmean_kl: return "rowmean_kl";
    case DistillVariant::cosine_match: return "cosine_match";
    case DistillVariant::euclidean_match: return "euclidean_match";
  }
  return "?";
}

void DistillConfig::validate(std::size_t base_dim) const {
  if (!(gamma >= 0.0)) throw std::invalid_argument("gamma must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (target_dims.empty()) throw std::invalid_argument("target_dims must not be empty");
  std::size_t prev = base_dim;
  for (auto d : target_dims) {
    if (d <= prev) {
      throw std::invalid_argument("target_dims must be strictly ascending and above the base dim " +
                                  std::to_string(base_dim));
    }
    prev = d;
  }
  if (topology == Topology::dual && target_dims.size() != 1) {
    throw std::invalid_argument("dual topology takes exactly one target dim");
  }
}

Var row_softmax(Var similarity, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("row_softmax: temperature must be > 0");
  return softmax_rows(scale(similarity, 1.0 / temperature));
}

Var kl_rowwise(Var student, Var teacher, double temperature) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("kl_rowwise: student " + shape_string(student.shape()) + " vs teacher " +
                     shape_string(teacher.shape()));
  }
  Var p = row_softmax(student, temperature);
  Var q = row_softmax(stop_gradient(teacher), temperature);
  return sum(mul(p, sub(log(p), log(q))));
}

Var distill_variant(Var student, Var teacher, double temperature, DistillVariant variant) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("distill_variant: student " + shape_string(student.shape()) + " vs teacher " +
                     shape_string(teacher.shape()));
  }
  Var t = stop_gradient(teacher);
  const std::size_t b = student.rows();
  const Shape flat{1, student.value().size()};
  switch (variant) {
    case DistillVariant::rowwise_kl:
      return kl_rowwise(student, t, temperature);
    case DistillVariant::full_kl:
      return kl_rowwise(reshape(student, flat), reshape(t, flat), temperature);
    case DistillVariant::rowmean_kl: {
      const double inv = 1.0 / static_cast<double>(student.cols());
      return kl_rowwise(reshape(scale(row_sums(student), inv), {1, b}),
                        reshape(scale(row_sums(t), inv), {1, b}), temperature);
    }
    case DistillVariant::cosine_match: {
      Var dot = sum(mul(student, t));
      Var norms = mul(sqrt(sum(mul(student, student))), sqrt(sum(mul(t, t))));
      return add_scalar(scale(div(dot, norms), -1.0), 1.0);
    }
    case DistillVariant::euclidean_match: {
      Var diff = sub(student, t);
      return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(student.value().size()));
    }
  }
  throw std::invalid_argument("distill_variant: unknown variant");
}

std::vector<std::pair<std::size_t, std::size_t>> distill_pairs(Topology topology,
                                                                std::size_t n_spaces) {
  if (n_spaces < 2) throw std::invalid_argument("distillation needs at least two spaces");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  switch (topology) {
    case Topology::dual:
    case Topology::multi:
      for (std::size_t j = 1; j < n_spaces; ++j) pairs.emplace_back(0, j);
      break;
    case Topology::nested:
      for (std::size_t i = 0; i < n_spaces; ++i)
        for (std::size_t j = i + 1; j < n_spaces; ++j) pairs.emplace_back(i, j);
      break;
    case Topology::chained:
      for (std::size_t i = 0; i + 1 < n_spaces; ++i) pairs.emplace_back(i, i + 1);
      break;
  }
  return pairs;
}

namespace {

void check_space_order(std::span<const Var> spaces) {
  if (spaces.size() < 2) throw std::invalid_argument("objective needs a base and at least one target space");
  for (std::size_t i = 1; i < spaces.size(); ++i) {
    if (spaces[i].rows() != spaces[0].rows()) {
      throw ShapeError("objective: space " + std::to_string(i) + " has a different batch size");
    }
    if (spaces[i].cols() < spaces[i - 1].cols()) {
      throw std::invalid_argument("objective: embedding dims must ascend from the base space (space " +
                                  std::to_string(i) + " has dim " + std::to_string(spaces[i].cols()) +
                                  " < " + std::to_string(spaces[i - 1].cols()) + ")");
    }
  }
}

// Shared assembly: DML bracket, weighted pair sum, optional feature term.
Objective compose(std::span<const Var> spaces, const DmlFn& dml, const DistillConfig& config,
                  const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double pair_norm,
                  std::optional<Var> features) {
  check_space_order(spaces);
  const std::size_t m = spaces.size() - 1;
  Objective out;
  auto& parts = out.parts;

  std::vector<Var> dml_vars;
  for (std::size_t s = 0; s < spaces.size(); ++s) {
    dml_vars.push_back(dml(spaces[s], s));
    parts.dml.push_back(dml_vars.back().item());
  }
  Var targets_dml = dml_vars[1];
  for (std::size_t s = 2; s < dml_vars.size(); ++s) targets_dml = add(targets_dml, dml_vars[s]);
  Var bracket = scale(add(dml_vars[0], scale(targets_dml, 1.0 / static_cast<double>(m))), 0.5);
  parts.dml_term = bracket.item();

  std::vector<Var> sims;
  sims.reserve(spaces.size());
  for (const Var& s : spaces) sims.push_back(pairwise_cosine(s));

  parts.pairs = pairs;
  Var pair_sum;
  for (const auto& [student, teacher] : pairs) {
    Var term = distill_variant(sims[student], sims[teacher], config.temperature, config.variant);
    parts.distill.push_back(term.item());
    pair_sum = pair_sum.valid() ? add(pair_sum, term) : term;
  }
  Var distill = scale(pair_sum, config.gamma / pair_norm);
  parts.distill_term = distill.item();
  Var total = add(bracket, distill);

  if (features) {
    Var feature_sim = pairwise_cosine(*features);
    Var term = scale(distill_variant(sims[0], feature_sim, config.temperature, config.variant), config.gamma);
    parts.feature_term = term.item();
    parts.feature_active = true;
    total = add(total, term);
  }
  parts.total = total.item();
  out.total = total;
  return out;
}

std::vector<Var> join(Var base, std::span<const Var> targets) {
  std::vector<Var> spaces{base};
  spaces.insert(spaces.end(), targets.begin(), targets.end());
  return spaces;
}

}  // namespace

Objective dsd_loss(Var base, Var target, const DmlFn& dml, const DistillConfig& config) {
  const Var spaces[] = {base, target};
  return compose(spaces, dml, config, distill_pairs(Topology::dual, 2), 1.0, std::nullopt);
}

Objective msd_loss(Var base, std::span<const Var> targets, const DmlFn& dml,
                   const DistillConfig& config) {
  const auto spaces = join(base, targets);
  const double m = static_cast<double>(targets.size());
  return compose(spaces, dml, config, distill_pairs(Topology::multi, spaces.size()), m, std::nullopt);
}

Objective msdf_loss(Var base, std::span<const Var> targets, Var features, const DmlFn& dml,
                    const DistillConfig& config, std::size_t step) {
  const auto spaces = join(base, targets);
  const double m = static_cast<double>(targets.size());
  std::optional<Var> feat;
  if (step >= config.warmup_n) feat = features;
  return compose(spaces, dml, config, distill_pairs(Topology::multi, spaces.size()), m, feat);
}

Objective nested_loss(std::span<const Var> spaces, const DmlFn& dml, const DistillConfig& config) {
  // binom(m, m - 1) == m
  const double m = static_cast<double>(spaces.size() - 1);
  return compose(spaces, dml, config, distill_pairs(Topology::nested, spaces.size()), m, std::nullopt);
}

Objective chained_loss(std::span<const Var> spaces, const DmlFn& dml, const DistillConfig& config) {
  const double m = static_cast<double>(spaces.size() - 1);
  return compose(spaces, dml, config, distill_pairs(Topology::chained, spaces.size()), m, std::nullopt);
}

Objective s2sd_objective(std::span<const Var> spaces, std::optional<Var> features,
                         const DmlFn& dml, const DistillConfig& config, std::size_t step) {
  if (spaces.size() < 2) throw std::invalid_argument("s2sd_objective: needs target spaces");
  const double m = static_cast<double>(spaces.size() - 1);
  std::optional<Var> feat;
  if (config.feature_distill && features && step >= config.warmup_n) feat = features;
  return compose(spaces, dml, config, distill_pairs(config.topology, spaces.size()), m, feat);
}

}  // namespace s2sd
