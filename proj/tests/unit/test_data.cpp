#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>

#include "s2sd/data.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/heads.hpp"
#include "s2sd/metrics.hpp"
#include "test_support.hpp"

using namespace s2sd;
namespace fs = std::filesystem;

namespace {

fs::path fixtures() {
  const char* env = std::getenv("S2SD_FIXTURES");
  return env ? fs::path(env) : fs::path("tests/fixtures");
}

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / "s2sd_data_test";
  fs::create_directories(dir);
  return dir;
}

const std::vector<double> kGoldenValues{0.5, -1.25, 3.0, 0.0010000000474974513, -0.0, 65504.0};

}  // namespace

TEST_CASE("generation is deterministic with disjoint splits") {
  SyntheticSpec spec;
  spec.seed = 4;
  auto a = generate_synthetic(spec);
  auto b = generate_synthetic(spec);
  CHECK(a.train.maps == b.train.maps);
  CHECK(a.test.maps == b.test.maps);
  CHECK(a.train.labels == b.train.labels);
  spec.seed = 5;
  CHECK_FALSE(generate_synthetic(spec).train.maps == a.train.maps);

  CHECK(a.train.maps.shape() == Shape{20 * 25, 1, 1, 64});
  CHECK(a.test.maps.shape() == Shape{20 * 25, 1, 1, 64});
  std::set<Label> tr(a.train.labels.begin(), a.train.labels.end());
  std::set<Label> te(a.test.labels.begin(), a.test.labels.end());
  CHECK(tr.size() == 20);
  CHECK(te.size() == 20);
  for (Label l : te) CHECK(tr.count(l) == 0);
}

TEST_CASE("spatial grids") {
  SyntheticSpec spec;
  spec.height = 2;
  spec.width = 2;
  spec.n_classes_train = 3;
  spec.n_classes_test = 2;
  spec.samples_per_class = 4;
  auto ds = generate_synthetic(spec);
  CHECK(ds.train.maps.shape() == Shape{12, 2, 2, 64});
  CHECK(pool(ds.train, PoolingMode::avg_plus_max).shape() == Shape{12, 128});
}

TEST_CASE("invalid specs") {
  SyntheticSpec spec;
  spec.noise_sigma = 0.0;
  CHECK_THROWS(generate_synthetic(spec));
  spec = {};
  spec.n_classes_test = 0;
  CHECK_THROWS(generate_synthetic(spec));
  spec = {};
  spec.subspace_dim = 65;
  CHECK_THROWS(generate_synthetic(spec));
  spec = {};
  spec.samples_per_class = 1;
  CHECK_THROWS(generate_synthetic(spec));
}

TEST_CASE("collapse case retrieves perfectly at any dimension") {
  SyntheticSpec spec;
  spec.noise_sigma = 1e-12;
  spec.subspace_dim = 0;
  auto ds = generate_synthetic(spec);
  for (std::size_t i = 1; i < 25; ++i)
    for (std::size_t c = 0; c < 64; ++c)
      CHECK(std::abs(ds.test.maps.data()[i * 64 + c] - ds.test.maps.data()[c]) < 1e-9);
  const std::size_t ks[] = {1, 2};
  for (std::size_t d : {2, 8, 32}) {
    EmbeddingBatch e = embed(pool(ds.test, PoolingMode::avg), init_head(64, d, 1, 0, d));
    auto r = recall_at_k(e.embeddings, ds.test.labels, ks);
    CHECK(r[1] == 1.0);
    CHECK(r[2] == 1.0);
  }
}

TEST_CASE("separation over spread matches the generating scales") {
  SyntheticSpec spec;
  spec.seed = 11;
  auto ds = generate_synthetic(spec);
  std::vector<Tensor> parts{pool(ds.train, PoolingMode::avg), pool(ds.test, PoolingMode::avg)};
  const std::size_t c = spec.feature_dim, n = spec.samples_per_class;
  std::vector<std::vector<double>> means;
  double within = 0.0;
  std::size_t within_count = 0;
  for (const auto& x : parts) {
    for (std::size_t k = 0; k < x.rows() / n; ++k) {
      std::vector<double> mu(c, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) mu[j] += x(k * n + i, j) / n;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double dv = x(k * n + i, j) - mu[j];
          within += dv * dv;
        }
      }
      within_count += n - 1;
      means.push_back(std::move(mu));
    }
  }
  within /= static_cast<double>(within_count);  // unbiased E||x - mu||^2
  double between = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      for (std::size_t j = 0; j < c; ++j) between += (means[a][j] - means[b][j]) * (means[a][j] - means[b][j]);
      ++pairs;
    }
  }
  between = between / pairs - 2.0 * within / n;  // remove the sampling noise in the means
  const double measured = std::sqrt(between / within);
  const double s = spec.prototype_scale, sigma = spec.noise_sigma, tau = spec.subspace_scale;
  const double spread = c * sigma * sigma * (1.0 + spec.spatial_jitter * spec.spatial_jitter) +
                        spec.subspace_dim * tau * tau;
  const double analytic = std::sqrt(2.0 * c * s * s / spread);
  CAPTURE(measured);
  CAPTURE(analytic);
  CHECK(std::abs(measured / analytic - 1.0) < 0.10);
}

TEST_CASE("within-class variation spans one shared or many private subspaces") {
  // Rank of the class-centered samples once the isotropic noise is negligible.
  auto centered_rank = [](const SyntheticSpec& spec) {
    const auto ds = generate_synthetic(spec);
    const Tensor x = pool(ds.train, PoolingMode::avg);
    const std::size_t n = spec.samples_per_class, c = spec.feature_dim;
    Tensor centered(x.shape());
    for (std::size_t k = 0; k < x.rows() / n; ++k) {
      for (std::size_t j = 0; j < c; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += x(k * n + i, j) / n;
        for (std::size_t i = 0; i < n; ++i) centered(k * n + i, j) = x(k * n + i, j) - mu;
      }
    }
    const auto sv = singular_values(centered);
    std::size_t rank = 0;
    for (double v : sv) rank += v > 1e-6 * sv.front();
    return rank;
  };
  SyntheticSpec spec;
  spec.noise_sigma = 1e-12;
  spec.spatial_jitter = 0.0;
  spec.n_classes_train = 4;
  spec.seed = 5;
  CHECK(centered_rank(spec) == spec.subspace_dim);
  spec.shared_subspace = false;
  CHECK(centered_rank(spec) == 4 * spec.subspace_dim);
}

TEST_CASE("feature file round trip") {
  SyntheticSpec spec;
  spec.height = 2;
  spec.width = 2;
  spec.n_classes_train = 3;
  spec.samples_per_class = 3;
  auto ds = generate_synthetic(spec);
  // Values must be f32-representable for an exact round trip.
  for (auto& v : ds.train.maps.data()) v = static_cast<float>(v);
  const auto dir = scratch_dir();
  save_features(ds.train, dir / "train.feat");
  CHECK_FALSE(fs::exists(dir / "train.feat.tmp"));
  auto back = load_features(dir / "train.feat");
  CHECK(back.maps == ds.train.maps);
  CHECK(back.labels == ds.train.labels);
  save_features(back, dir / "again.feat");
  CHECK(s2sd::testing::read_bytes(dir / "train.feat") == s2sd::testing::read_bytes(dir / "again.feat"));
  fs::remove_all(dir);
}

TEST_CASE("feature file errors") {
  FeatureBatch b{Tensor({2, 1, 1, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}), {0, 1}};
  const std::string bytes = encode_features(b);
  CHECK(bytes.size() == 28 + 6 * 4 + 2 * 4);

  try {
    decode_features(bytes.substr(0, bytes.size() - 5));
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string what = e.what();
    CHECK(what.find("truncated payload") != std::string::npos);
    CHECK(what.find("expected 60") != std::string::npos);
    CHECK(what.find("got 55") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_features(bytes.substr(0, 10)), IoError);

  std::string bad_version = bytes;
  bad_version[8] = 2;
  try {
    decode_features(bad_version);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("unsupported version 2") != std::string::npos);
  }
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_features(bad_magic), IoError);

  std::string big_label = bytes;
  big_label[big_label.size() - 1] = static_cast<char>(0x80);
  try {
    decode_features(big_label);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("label") != std::string::npos);
  }
  CHECK_THROWS_AS(load_features(scratch_dir() / "does_not_exist.feat"), IoError);
}

TEST_CASE("golden two-sample file") {
  const auto path = fixtures() / "golden_2sample.feat";
  REQUIRE(fs::exists(path));
  FeatureBatch g = load_features(path);
  CHECK(g.maps.shape() == Shape{2, 1, 1, 3});
  CHECK(g.labels == std::vector<Label>{0, 7});
  for (std::size_t i = 0; i < kGoldenValues.size(); ++i) CHECK(g.maps.data()[i] == kGoldenValues[i]);
  CHECK(std::signbit(g.maps.data()[4]));
  const auto raw = s2sd::testing::read_bytes(path);
  const std::string encoded = encode_features(g);
  CHECK(std::string(raw.begin(), raw.end()) == encoded);
}
