#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "s2sd/errors.hpp"
#include "s2sd/heads.hpp"
#include "test_support.hpp"

using namespace s2sd;
using s2sd::testing::random_tensor;

namespace {

FeatureBatch make_batch(std::size_t b, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
  FeatureBatch batch{random_tensor({b, h, w, c}, rng), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<Label>(i % 2));
  return batch;
}

}  // namespace

TEST_CASE("pooling a 1x1 grid is the identity") {
  Rng rng(1);
  FeatureBatch batch = make_batch(3, 1, 1, 5, rng);
  Tensor pooled = pool(batch, PoolingMode::avg);
  CHECK(pooled.shape() == Shape{3, 5});
  CHECK(s2sd::testing::values(pooled) == s2sd::testing::values(batch.maps));
}

TEST_CASE("pooling a hand-sized map") {
  FeatureBatch batch{Tensor({2, 2, 2, 1}, std::vector<double>{1, 3, 5, 7, 0, 0, 0, 0}), {0, 1}};
  Tensor avg = pool(batch, PoolingMode::avg);
  CHECK(avg(0, 0) == 4.0);
  Tensor both = pool(batch, PoolingMode::avg_plus_max);
  CHECK(both.shape() == Shape{2, 2});
  CHECK(both(0, 0) == 4.0);
  CHECK(both(0, 1) == 7.0);
}

TEST_CASE("pooling matches a scalar loop and ignores spatial order") {
  Rng rng(7);
  FeatureBatch batch = make_batch(2, 4, 4, 3, rng);
  Tensor both = pool(batch, PoolingMode::avg_plus_max);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, m = -1e300;
      for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
          const double v = batch.maps.data()[((b * 4 + y) * 4 + x) * 3 + c];
          s += v;
          m = std::max(m, v);
        }
      }
      CHECK(std::abs(both(b, c) - s / 16.0) < 1e-12);
      CHECK(both(b, 3 + c) == m);
    }
  }
  FeatureBatch flipped = batch;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 16; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        flipped.maps.data()[(b * 16 + p) * 3 + c] = batch.maps.data()[(b * 16 + 15 - p) * 3 + c];
  Tensor again = pool(flipped, PoolingMode::avg_plus_max);
  for (std::size_t i = 0; i < again.size(); ++i) CHECK(std::abs(again.data()[i] - both.data()[i]) < 1e-12);
}

TEST_CASE("feature batch validation") {
  FeatureBatch single{Tensor({1, 1, 1, 2}, 0.5), {0}};
  CHECK_THROWS_AS(single.validate(), ShapeError);
  FeatureBatch mismatched{Tensor({2, 1, 1, 2}, 0.5), {0}};
  CHECK_THROWS_AS(mismatched.validate(), ShapeError);
}

TEST_CASE("head initialization") {
  HeadParams h = init_head(4, 2, 1, 0, 3);
  REQUIRE(h.depth() == 1);
  CHECK(h.layers[0].weight.shape() == Shape{2, 4});
  CHECK(s2sd::testing::values(h.layers[0].bias) == std::vector<double>{0, 0});
  const double bound = std::sqrt(6.0 / 4.0);
  for (double w : h.layers[0].weight.data()) CHECK(std::abs(w) <= bound);

  HeadParams again = init_head(4, 2, 1, 0, 3);
  CHECK(again.layers[0].weight == h.layers[0].weight);
  CHECK_FALSE(init_head(4, 2, 1, 0, 4).layers[0].weight == h.layers[0].weight);

  HeadParams deep = init_head(10, 8, 2, 64, 1);
  CHECK(deep.layers[0].weight.shape() == Shape{64, 10});
  CHECK(deep.layers[1].weight.shape() == Shape{8, 64});
  CHECK(deep.parameter_count() == 64 * 10 + 64 + 8 * 64 + 8);
  CHECK_THROWS(init_head(4, 2, 4, 8, 0));
}

TEST_CASE("embedding normalizes rows") {
  HeadParams id{"id", {{Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor({1, 2}, 0.0)}}};
  EmbeddingBatch e = embed(Tensor::matrix(1, 2, {3, 4}), id);
  CHECK(e.normalized);
  CHECK(std::abs(e.embeddings(0, 0) - 0.6) < 1e-15);
  CHECK(std::abs(e.embeddings(0, 1) - 0.8) < 1e-15);
  CHECK_THROWS_AS(embed(Tensor::matrix(1, 3, {1, 2, 3}), id), ShapeError);

  Rng rng(5);
  HeadParams h = init_head(6, 3, 2, 32, 9);
  EmbeddingBatch r = embed(random_tensor({20, 6}, rng, 10.0), h);
  for (std::size_t i = 0; i < 20; ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < 3; ++j) n += r.embeddings(i, j) * r.embeddings(i, j);
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
  }
}

TEST_CASE("depth-2 forward matches an element loop") {
  Rng rng(21);
  HeadParams h = init_head(5, 3, 2, 7, 21);
  for (auto& l : h.layers)
    for (auto& b : l.bias.data()) b = rng.normal();
  Tensor x = random_tensor({4, 5}, rng);
  EmbeddingBatch e = embed(x, h);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> hidden(7), out(3);
    for (std::size_t o = 0; o < 7; ++o) {
      double s = h.layers[0].bias.data()[o];
      for (std::size_t k = 0; k < 5; ++k) s += h.layers[0].weight(o, k) * x(i, k);
      hidden[o] = s > 0.0 ? s : 0.0;
    }
    double norm = 0.0;
    for (std::size_t o = 0; o < 3; ++o) {
      double s = h.layers[1].bias.data()[o];
      for (std::size_t k = 0; k < 7; ++k) s += h.layers[1].weight(o, k) * hidden[k];
      out[o] = s;
      norm += s * s;
    }
    for (std::size_t o = 0; o < 3; ++o)
      CHECK(std::abs(e.embeddings(i, o) - out[o] / std::sqrt(norm)) < 1e-12);
  }
}

TEST_CASE("graph embed agrees with tensor embed and differentiates") {
  Rng rng(8);
  HeadParams h = init_head(6, 4, 2, 5, 2);
  Tensor x = random_tensor({5, 6}, rng);
  Graph g;
  HeadVars hv = bind_head(g, h, true);
  Var e = embed(g.constant(x), hv);
  EmbeddingBatch ref = embed(x, h);
  for (std::size_t i = 0; i < ref.embeddings.size(); ++i)
    CHECK(std::abs(e.value().data()[i] - ref.embeddings.data()[i]) < 1e-14);

  std::vector<Tensor> params = s2sd::testing::head_tensors(h);
  params.push_back(x);
  const std::size_t depth = h.depth();
  auto loss = [depth](Graph&, std::span<const Var> p) {
    Var z = embed(p.back(), s2sd::testing::head_vars(p, 0, depth));
    return sum(mul(z, z.graph().constant(Tensor({5, 4}, std::vector<double>(20, 0.3)))));
  };
  CHECK(s2sd::testing::gradient_error(loss, params) < 1e-6);
}

TEST_CASE("normalize_features") {
  EmbeddingBatch e = normalize_features(Tensor::matrix(1, 2, {3, 4}));
  CHECK(std::abs(e.embeddings(0, 0) - 0.6) < 1e-15);
  EmbeddingBatch same = normalize_features(e.embeddings);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(std::abs(same.embeddings.data()[i] - e.embeddings.data()[i]) < 1e-15);

  Rng rng(4);
  std::vector<Tensor> params{random_tensor({4, 3}, rng)};
  auto loss = [](Graph& g, std::span<const Var> p) {
    Var n = l2_normalize_rows(p[0]);
    return sum(mul(n, g.constant(Tensor({4, 3}, std::vector<double>{1, 2, 3, -1, 0, 1, 2, 2, -2, 0.5, 1, 0}))));
  };
  CHECK(s2sd::testing::gradient_error(loss, params) < 1e-6);
}

TEST_CASE("checkpoint round trip is byte exact") {
  const auto dir = std::filesystem::temp_directory_path() / "s2sd_heads_test";
  std::filesystem::create_directories(dir);
  std::vector<HeadParams> heads{init_head(6, 4, 1, 0, 1, "base"),
                                init_head(6, 16, 2, 32, 2, "target_16")};
  save_heads(dir / "a.bin", heads);
  auto loaded = load_heads(dir / "a.bin");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[1].branch_id == "target_16");
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t l = 0; l < heads[h].depth(); ++l) {
      CHECK(loaded[h].layers[l].weight == heads[h].layers[l].weight);
      CHECK(loaded[h].layers[l].bias == heads[h].layers[l].bias);
    }
  }
  save_heads(dir / "b.bin", loaded);
  CHECK(s2sd::testing::read_bytes(dir / "a.bin") == s2sd::testing::read_bytes(dir / "b.bin"));

  auto bytes = s2sd::testing::read_bytes(dir / "a.bin");
  bytes.resize(bytes.size() - 3);
  s2sd::testing::write_bytes(dir / "c.bin", bytes);
  CHECK_THROWS_AS(load_heads(dir / "c.bin"), IoError);
  CHECK_THROWS_AS(load_heads(dir / "missing.bin"), IoError);
  std::filesystem::remove_all(dir);
}
