#include "s2sd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "s2sd/errors.hpp"
#include "s2sd/rng.hpp"

namespace s2sd {

namespace {

double sq_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_labels(const Tensor& e, std::span<const Label> labels, const char* op) {
  if (e.rank() != 2) throw ShapeError(std::string(op) + ": expected an N x d matrix");
  if (labels.size() != e.rows()) throw ShapeError(std::string(op) + ": label count mismatch");
}

}  // namespace

std::map<std::size_t, double> recall_at_k(const Tensor& embeddings, std::span<const Label> labels,
                                          std::span<const std::size_t> ks) {
  check_labels(embeddings, labels, "recall_at_k");
  const std::size_t n = embeddings.rows();
  if (ks.empty()) throw std::invalid_argument("recall_at_k: no k given");
  const std::size_t k_max = *std::max_element(ks.begin(), ks.end());
  for (auto k : ks) {
    if (k == 0 || k >= n) {
      throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) + " needs 1 <= k < N=" + std::to_string(n));
    }
  }
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : embeddings.row_span(i)) s += v * v;
    norms[i] = std::sqrt(std::max(s, 1e-24));
  }
  std::map<std::size_t, double> hits;
  for (auto k : ks) hits[k] = 0.0;

  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  for (std::size_t q = 0; q < n; ++q) {
    const auto qrow = embeddings.row_span(q);
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == q) continue;
      const auto jrow = embeddings.row_span(j);
      double dot = 0.0;
      for (std::size_t t = 0; t < qrow.size(); ++t) dot += qrow[t] * jrow[t];
      cand[c++] = {-dot / (norms[q] * norms[j]), j};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_max), cand.end());
    // First rank (1-based) at which a same-class neighbour appears.
    std::size_t first_hit = std::numeric_limits<std::size_t>::max();
    for (std::size_t r = 0; r < k_max; ++r) {
      if (labels[cand[r].second] == labels[q]) {
        first_hit = r + 1;
        break;
      }
    }
    for (auto& [k, h] : hits) {
      if (first_hit <= k) h += 1.0;
    }
  }
  for (auto& [k, h] : hits) h /= static_cast<double>(n);
  return hits;
}

KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iters) {
  if (points.rank() != 2) throw ShapeError("kmeans: expected an N x d matrix");
  const std::size_t n = points.rows(), d = points.cols();
  if (k == 0 || k > n) throw std::invalid_argument("kmeans: need 1 <= k <= N");
  Rng rng(seed);

  // k-means++ seeding.
  std::vector<std::size_t> chosen{rng.index(n)};
  std::vector<bool> taken(n, false);
  taken[chosen[0]] = true;
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < k) {
    const auto last = points.row_span(chosen.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_distance(points.row_span(i), last));
      if (!taken[i]) total += best[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i] || best[i] <= 0.0) continue;
        acc += best[i];
        pick = i;
        if (u < acc) break;
      }
    }
    if (pick == n) {
      // Remaining points coincide with chosen centers; take one uniformly.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[rng.index(free.size())];
    }
    taken[pick] = true;
    chosen.push_back(pick);
  }

  KMeansResult res;
  res.centers = Tensor({k, d});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < d; ++j) res.centers(c, j) = points(chosen[c], j);
  res.assignment.assign(n, k);

  std::vector<double> dist(n);
  for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iters, 1); ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_distance(points.row_span(i), res.centers.row_span(c));
        if (dd < bd) {
          bd = dd;
          arg = c;
        }
      }
      changed = changed || res.assignment[i] != arg;
      res.assignment[i] = arg;
      dist[i] = bd;
      inertia += bd;
    }
    res.inertia.push_back(inertia);
    if (!changed && iter > 0) break;

    Tensor sums({k, d}, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) sums(res.assignment[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        for (std::size_t j = 0; j < d; ++j) res.centers(c, j) = points(far, j);
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) res.centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  }
  return res;
}

double nmi(std::span<const std::size_t> assignment, std::span<const Label> labels) {
  if (assignment.empty()) throw std::invalid_argument("nmi: empty input");
  if (assignment.size() != labels.size()) throw std::invalid_argument("nmi: length mismatch");
  const double n = static_cast<double>(assignment.size());
  std::map<std::size_t, double> ca;
  std::map<Label, double> cl;
  std::map<std::pair<std::size_t, Label>, double> joint;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    ca[assignment[i]] += 1.0;
    cl[labels[i]] += 1.0;
    joint[{assignment[i], labels[i]}] += 1.0;
  }
  auto entropy = [n](const auto& counts) {
    double h = 0.0;
    for (const auto& [key, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double ha = entropy(ca), hl = entropy(cl);
  if (ha == 0.0 && hl == 0.0) return 1.0;
  if (ha == 0.0 || hl == 0.0) return 0.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    mi += (c / n) * std::log((c * n) / (ca[key.first] * cl[key.second]));
  }
  return std::clamp(mi / std::sqrt(ha * hl), 0.0, 1.0);
}

double embedding_density(const Tensor& embeddings, std::span<const Label> labels) {
  check_labels(embeddings, labels, "embedding_density");
  std::map<Label, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw std::invalid_argument("embedding_density: need at least 2 classes");
  const std::size_t d = embeddings.cols();

  double intra = 0.0;
  Tensor centers({by_class.size(), d}, 0.0);
  std::size_t c = 0;
  for (const auto& [label, members] : by_class) {
    if (members.size() < 2) {
      throw std::invalid_argument("embedding_density: class " + std::to_string(label) + " has fewer than 2 samples");
    }
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        total += std::sqrt(sq_distance(embeddings.row_span(members[a]), embeddings.row_span(members[b])));
        ++pairs;
      }
      for (std::size_t j = 0; j < d; ++j) centers(c, j) += embeddings(members[a], j);
    }
    intra += total / static_cast<double>(pairs);
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += centers(c, j) * centers(c, j);
    norm = std::sqrt(std::max(norm, 1e-24));
    for (std::size_t j = 0; j < d; ++j) centers(c, j) /= norm;
    ++c;
  }
  intra /= static_cast<double>(by_class.size());

  double inter = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < by_class.size(); ++a) {
    for (std::size_t b = a + 1; b < by_class.size(); ++b) {
      inter += std::sqrt(sq_distance(centers.row_span(a), centers.row_span(b)));
      ++pairs;
    }
  }
  inter /= static_cast<double>(pairs);
  if (inter <= 0.0) throw std::invalid_argument("embedding_density: class centers coincide");
  return intra / inter;
}

std::vector<double> jacobi_eigenvalues(const Tensor& symmetric) {
  if (symmetric.rank() != 2 || symmetric.rows() != symmetric.cols()) {
    throw ShapeError("jacobi_eigenvalues: expected a square matrix, got " + shape_string(symmetric.shape()));
  }
  const std::size_t n = symmetric.rows();
  Tensor a = symmetric;
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * scale * scale || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = a(r, p), arq = a(r, q);
          a(r, p) = c * arp - s * arq;
          a(r, q) = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = a(p, r), aqr = a(q, r);
          a(p, r) = c * apr - s * aqr;
          a(q, r) = s * apr + c * aqr;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

std::vector<double> singular_values(const Tensor& matrix) {
  if (matrix.rank() != 2) throw ShapeError("singular_values: expected a matrix");
  const std::size_t n = matrix.rows(), d = matrix.cols();
  Tensor gram({d, d}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = matrix.row_span(i);
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p; q < d; ++q) gram(p, q) += row[p] * row[q];
  }
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = 0; q < p; ++q) gram(p, q) = gram(q, p);
  auto eig = jacobi_eigenvalues(gram);
  for (auto& v : eig) v = std::sqrt(std::max(v, 0.0));
  return eig;
}

double spectral_decay(const Tensor& embeddings, std::size_t skip) {
  if (embeddings.rank() != 2) throw ShapeError("spectral_decay: expected a matrix");
  if (embeddings.rows() < embeddings.cols()) {
    throw std::invalid_argument("spectral_decay: need N >= d");
  }
  auto s = singular_values(embeddings);
  if (skip >= s.size()) throw std::invalid_argument("spectral_decay: skip leaves no singular values");
  s.erase(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(skip));
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  const double u = 1.0 / static_cast<double>(s.size());
  double kl = 0.0;
  for (double v : s) {
    const double p = total > 0.0 ? v / total : 0.0;
    kl += u * std::log(u / std::max(p, 1e-12));
  }
  return std::max(kl, 0.0);
}

std::size_t spectral_skip(std::size_t dim) {
  if (dim < 2) return 0;
  return std::min((dim * 10 + 127) / 128, dim - 1);
}

MetricsRecord compute_metrics(const Tensor& embeddings, std::span<const Label> labels,
                              std::uint64_t seed, std::size_t step, std::string split) {
  MetricsRecord rec;
  const std::size_t ks[] = {1, 2};
  rec.recall_at = recall_at_k(embeddings, labels, ks);
  const std::set<Label> classes(labels.begin(), labels.end());
  rec.nmi = nmi(kmeans(embeddings, classes.size(), seed).assignment, labels);
  rec.density_ratio = embedding_density(embeddings, labels);
  const std::size_t d = embeddings.cols();
  rec.spectral_decay = embeddings.rows() >= d ? spectral_decay(embeddings, spectral_skip(d)) : 0.0;
  rec.split = std::move(split);
  rec.seed = seed;
  rec.step = step;
  return rec;
}

}  // namespace s2sd
