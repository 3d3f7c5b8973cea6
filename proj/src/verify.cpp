#include "s2sd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "s2sd/distill.hpp"
#include "s2sd/gradcheck.hpp"
#include "s2sd/heads.hpp"
#include "s2sd/losses.hpp"
#include "s2sd/rng.hpp"

namespace s2sd {

namespace {

constexpr std::size_t kInDim = 10;
constexpr std::size_t kBaseDim = 4;
constexpr std::size_t kHidden = 6;
const std::size_t kTargetDims[] = {5, 6, 8, 10};

constexpr double kHingeMargin = 0.2;
constexpr double kBetaInit = 0.6;
// Fixtures are redrawn until every kink is at least this far away.
constexpr double kKinkClearance = 2e-3;

struct Fixture {
  Tensor features;
  std::vector<Label> labels;
  std::vector<HeadParams> heads;  // base then targets
  BatchTuples tuples;
};

Tensor cosine(const Tensor& e) {
  const std::size_t n = e.rows();
  Tensor d({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < e.cols(); ++k) dot += e(i, k) * e(j, k);
      d(i, j) = dot;
    }
  }
  return d;
}

// Smallest distance from any ReLU, hinge or mining threshold.
double clearance(const Fixture& fx) {
  const std::size_t n = fx.labels.size();
  double m = std::numeric_limits<double>::infinity();
  const double eps = MultiSimilarityParams{}.epsilon;
  for (const auto& head : fx.heads) {
    for (std::size_t l = 0; l + 1 < head.depth(); ++l) {
      const Layer& layer = head.layers[l];
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < layer.weight.rows(); ++o) {
          double z = layer.bias(0, o);
          for (std::size_t k = 0; k < kInDim; ++k) z += layer.weight(o, k) * fx.features(i, k);
          m = std::min(m, std::abs(z));
        }
      }
    }
    const Tensor d = cosine(embed(fx.features, head).embeddings);
    for (std::size_t i = 0; i < n; ++i) {
      double hardest_neg = -2.0, hardest_pos = 2.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) continue;
        if (fx.labels[k] == fx.labels[i]) hardest_pos = std::min(hardest_pos, d(i, k));
        else hardest_neg = std::max(hardest_neg, d(i, k));
      }
      for (std::size_t k = 0; k < n; ++k) {
        if (k == i) continue;
        const double edge = fx.labels[k] == fx.labels[i] ? hardest_neg + eps : hardest_pos - eps;
        m = std::min(m, std::abs(d(i, k) - edge));
      }
    }
  }
  const Tensor d = cosine(embed(fx.features, fx.heads[0]).embeddings);
  auto dist = [&](std::size_t i, std::size_t j) { return std::sqrt(std::max(2.0 - 2.0 * d(i, j), 0.0)); };
  for (const auto& t : fx.tuples) {
    const double ap = dist(t.anchor, t.positive), an = dist(t.anchor, t.negative);
    m = std::min({m, std::abs(ap - an + kHingeMargin), std::abs(ap - kBetaInit + kHingeMargin),
                  std::abs(kBetaInit - an + kHingeMargin)});
  }
  return m;
}

Fixture make_fixture(std::uint64_t seed, std::size_t batch) {
  Rng rng(seed);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Fixture fx{Tensor({batch, kInDim}), {}, {}, {}};
    for (auto& v : fx.features.data()) v = rng.normal();
    for (std::size_t i = 0; i < batch; ++i) fx.labels.push_back(static_cast<Label>(i % (batch / 2)));
    fx.heads.push_back(init_head(kInDim, kBaseDim, 1, 0, rng.next(), "base"));
    for (std::size_t d : kTargetDims) fx.heads.push_back(init_head(kInDim, d, 2, kHidden, rng.next()));
    // Random biases keep ReLU units away from the all-zero start.
    for (auto& h : fx.heads)
      for (auto& l : h.layers)
        for (auto& b : l.bias.data()) b = 0.3 * rng.normal();
    const Tensor base = embed(fx.features, fx.heads[0]).embeddings;
    Tensor dist = cosine(base);
    for (auto& v : dist.data()) v = std::sqrt(std::max(2.0 - 2.0 * v, 0.0));
    fx.tuples = sample_tuples(dist, fx.labels, kBaseDim, rng);
    if (clearance(fx) >= kKinkClearance) return fx;
  }
  throw std::runtime_error("gradient suite: no kink-free fixture found");
}

std::vector<Tensor> flatten(const Fixture& fx, std::size_t n_heads) {
  std::vector<Tensor> params{fx.features};
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (const auto& l : fx.heads[h].layers) {
      params.push_back(l.weight);
      params.push_back(l.bias);
    }
  }
  return params;
}

// Embeddings of heads [0, n_heads) from params laid out by flatten().
std::vector<Var> spaces(std::span<const Var> p, const Fixture& fx, std::size_t n_heads) {
  std::vector<Var> out;
  std::size_t at = 1;
  for (std::size_t h = 0; h < n_heads; ++h) {
    HeadVars hv;
    for (std::size_t l = 0; l < fx.heads[h].depth(); ++l) {
      hv.weights.push_back(p[at++]);
      hv.biases.push_back(p[at++]);
    }
    out.push_back(embed(p[0], hv));
  }
  return out;
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::size_t n_seeds, double h) {
  std::vector<GradCheckResult> results;
  for (std::uint64_t seed = 0; seed < n_seeds; ++seed) {
    const std::size_t batch = std::min<std::size_t>(8 + 2 * seed, 16);
    const Fixture fx = make_fixture(seed, batch);
    const std::span<const Label> labels(fx.labels);

    auto check = [&](const std::string& name, std::size_t n_heads, std::vector<Tensor> extra,
                     const LossFn& loss) {
      std::vector<Tensor> params = flatten(fx, n_heads);
      for (auto& t : extra) params.push_back(std::move(t));
      const auto analytic = value_and_grad(loss, params);
      const auto numeric = finite_difference_grad(loss, params, h);
      results.push_back({name, seed, batch, analytic.value, max_relative_error(analytic.grads, numeric)});
    };

    std::vector<std::size_t> slots(fx.labels.begin(), fx.labels.end());

    check("triplet", 1, {}, [&](Graph&, std::span<const Var> p) {
      return triplet_loss(spaces(p, fx, 1)[0], fx.tuples, kHingeMargin).value;
    });
    check("margin", 1, {Tensor::scalar(kBetaInit)}, [&](Graph&, std::span<const Var> p) {
      return margin_loss(spaces(p, fx, 1)[0], fx.tuples, p.back(), kHingeMargin).value;
    });
    check("margin_per_class", 1, {Tensor({1, batch / 2}, kBetaInit)}, [&](Graph&, std::span<const Var> p) {
      return margin_loss(spaces(p, fx, 1)[0], fx.tuples, p.back(), kHingeMargin, slots).value;
    });
    check("multisimilarity", 1, {}, [&](Graph&, std::span<const Var> p) {
      return multisimilarity_loss(pairwise_cosine(spaces(p, fx, 1)[0]), labels, {}).value;
    });

    const MultiSimilarityParams ms;
    DmlFn dml = [&](Var e, std::size_t) { return multisimilarity_loss(pairwise_cosine(e), labels, ms).value; };
    DistillConfig cfg;
    cfg.gamma = 5.0;
    cfg.temperature = 1.0;

    check("kl_rowwise", 2, {}, [&](Graph&, std::span<const Var> p) {
      auto s = spaces(p, fx, 2);
      return kl_rowwise(pairwise_cosine(s[0]), pairwise_cosine(s[1]), 1.0);
    });
    check("dsd", 2, {}, [&](Graph&, std::span<const Var> p) {
      auto s = spaces(p, fx, 2);
      return dsd_loss(s[0], s[1], dml, cfg).total;
    });
    check("msd", 5, {}, [&](Graph&, std::span<const Var> p) {
      auto s = spaces(p, fx, 5);
      return msd_loss(s[0], std::span<const Var>(s).subspan(1), dml, cfg).total;
    });
    check("msdf", 5, {}, [&](Graph&, std::span<const Var> p) {
      auto s = spaces(p, fx, 5);
      Var feat = l2_normalize_rows(p[0]);
      return msdf_loss(s[0], std::span<const Var>(s).subspan(1), feat, dml, cfg, cfg.warmup_n).total;
    });
    check("nested", 4, {}, [&](Graph&, std::span<const Var> p) {
      return nested_loss(spaces(p, fx, 4), dml, cfg).total;
    });
    check("chained", 4, {}, [&](Graph&, std::span<const Var> p) {
      return chained_loss(spaces(p, fx, 4), dml, cfg).total;
    });
    for (DistillVariant v : {DistillVariant::rowwise_kl, DistillVariant::full_kl, DistillVariant::rowmean_kl,
                             DistillVariant::cosine_match, DistillVariant::euclidean_match}) {
      check("variant_" + to_string(v), 2, {}, [&, v](Graph&, std::span<const Var> p) {
        auto s = spaces(p, fx, 2);
        return distill_variant(pairwise_cosine(s[0]), pairwise_cosine(s[1]), 1.0, v);
      });
    }
  }
  return results;
}

}  // namespace s2sd
