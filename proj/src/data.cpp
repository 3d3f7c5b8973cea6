#include "s2sd/data.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "io_util.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/rng.hpp"

namespace s2sd {

void SyntheticSpec::validate() const {
  if (n_classes_train < 2 || n_classes_test < 2) throw std::invalid_argument("synthetic: need >= 2 train and test classes");
  if (samples_per_class < 2) throw std::invalid_argument("synthetic: need >= 2 samples per class");
  if (feature_dim == 0 || height == 0 || width == 0) throw std::invalid_argument("synthetic: feature extents must be positive");
  if (subspace_dim > feature_dim) throw std::invalid_argument("synthetic: subspace_dim exceeds feature_dim");
  if (!(noise_sigma > 0.0)) throw std::invalid_argument("synthetic: noise_sigma must be > 0");
  if (!(prototype_scale >= 0.0) || !(subspace_scale >= 0.0) || !(spatial_jitter >= 0.0)) {
    throw std::invalid_argument("synthetic: scales must be non-negative");
  }
}

namespace {

using Basis = std::vector<std::vector<double>>;

// Orthonormal columns (stored as rows of a rank x dim matrix) by Gram-Schmidt.
Basis random_basis(std::size_t rank, std::size_t dim, Rng& rng) {
  Basis basis;
  while (basis.size() < rank) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

FeatureBatch generate_split(const SyntheticSpec& spec, std::size_t first_class, std::size_t n_classes,
                            const Basis* shared, Rng& rng) {
  const std::size_t c = spec.feature_dim, cells = spec.height * spec.width;
  const std::size_t n = n_classes * spec.samples_per_class;
  std::vector<double> maps;
  maps.reserve(n * cells * c);
  std::vector<Label> labels;
  labels.reserve(n);
  const double jitter = spec.spatial_jitter * spec.noise_sigma;
  std::vector<double> sample(c);
  for (std::size_t k = 0; k < n_classes; ++k) {
    std::vector<double> proto(c);
    for (auto& v : proto) v = spec.prototype_scale * rng.normal();
    Basis own;
    if (!shared) own = random_basis(spec.subspace_dim, c, rng);
    const Basis& basis = shared ? *shared : own;
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      sample = proto;
      for (const auto& b : basis) {
        const double z = spec.subspace_scale * rng.normal();
        for (std::size_t i = 0; i < c; ++i) sample[i] += z * b[i];
      }
      for (auto& v : sample) v += spec.noise_sigma * rng.normal();
      for (std::size_t cell = 0; cell < cells; ++cell) {
        for (std::size_t i = 0; i < c; ++i) {
          maps.push_back(sample[i] + (jitter > 0.0 ? jitter * rng.normal() : 0.0));
        }
      }
      labels.push_back(static_cast<Label>(first_class + k));
    }
  }
  return FeatureBatch{Tensor({n, spec.height, spec.width, c}, std::move(maps)), std::move(labels)};
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Rng train_rng = rng.split(1);
  Rng test_rng = rng.split(2);
  Rng basis_rng = rng.split(3);
  const Basis common = random_basis(spec.subspace_dim, spec.feature_dim, basis_rng);
  const Basis* shared = spec.shared_subspace ? &common : nullptr;
  SyntheticDataset ds;
  ds.train = generate_split(spec, 0, spec.n_classes_train, shared, train_rng);
  ds.test = generate_split(spec, spec.n_classes_train, spec.n_classes_test, shared, test_rng);
  return ds;
}

std::string encode_features(const FeatureBatch& batch) {
  batch.validate();
  std::vector<char> out(kFeatureMagic, kFeatureMagic + 8);
  detail::put_le(out, kFeatureVersion);
  for (auto e : {batch.size(), batch.height(), batch.width(), batch.channels()}) {
    if (e > 0xffffffffu) throw IoError("feature file: extent exceeds u32");
    detail::put_le(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + batch.maps.size() * 4 + batch.labels.size() * 4);
  for (double v : batch.maps.data()) detail::put_le(out, static_cast<float>(v));
  for (Label l : batch.labels) {
    if (l > kMaxLabel) throw IoError("feature file: label " + std::to_string(l) + " out of range");
    detail::put_le(out, l);
  }
  return std::string(out.begin(), out.end());
}

FeatureBatch decode_features(std::string_view bytes, const std::string& origin) {
  constexpr std::size_t kHeader = 8 + 5 * 4;
  if (bytes.size() < kHeader) {
    throw IoError(origin + ": truncated header (expected " + std::to_string(kHeader) + " bytes, got " +
                  std::to_string(bytes.size()) + ")");
  }
  if (bytes.substr(0, 8) != std::string_view(kFeatureMagic, 8)) throw IoError(origin + ": bad magic");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kFeatureVersion) {
    throw IoError(origin + ": unsupported version " + std::to_string(version) + " (supported: " +
                  std::to_string(kFeatureVersion) + ")");
  }
  const std::size_t n = detail::get_le<std::uint32_t>(bytes.data() + 12);
  const std::size_t h = detail::get_le<std::uint32_t>(bytes.data() + 16);
  const std::size_t w = detail::get_le<std::uint32_t>(bytes.data() + 20);
  const std::size_t c = detail::get_le<std::uint32_t>(bytes.data() + 24);
  if (n == 0 || h == 0 || w == 0 || c == 0) throw IoError(origin + ": zero extent in header");
  const std::size_t values = n * h * w * c;
  const std::size_t expected = kHeader + values * 4 + n * 4;
  if (bytes.size() != expected) {
    throw IoError(origin + ": truncated payload (expected " + std::to_string(expected) +
                  " bytes, got " + std::to_string(bytes.size()) + ")");
  }
  std::vector<double> maps(values);
  const char* p = bytes.data() + kHeader;
  for (auto& v : maps) {
    v = static_cast<double>(detail::get_le<float>(p));
    p += 4;
  }
  std::vector<Label> labels(n);
  for (auto& l : labels) {
    l = detail::get_le<std::uint32_t>(p);
    p += 4;
    if (l > kMaxLabel) throw IoError(origin + ": label " + std::to_string(l) + " out of range");
  }
  Tensor t({n, h, w, c}, std::move(maps));
  if (!t.all_finite()) throw IoError(origin + ": non-finite feature value");
  return FeatureBatch{std::move(t), std::move(labels)};
}

void save_features(const FeatureBatch& batch, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_features(batch));
}

FeatureBatch load_features(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_features(std::string_view(bytes.data(), bytes.size()), path.string());
}

}  // namespace s2sd
