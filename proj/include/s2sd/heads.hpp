#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "s2sd/autodiff.hpp"
#include "s2sd/tensor.hpp"

namespace s2sd {

using Label = std::uint32_t;

/// Fixed input feature maps, B x H x W x C, with one class id per sample.
struct FeatureBatch {
  Tensor maps;
  std::vector<Label> labels;

  std::size_t size() const { return maps.dim(0); }
  std::size_t height() const { return maps.dim(1); }
  std::size_t width() const { return maps.dim(2); }
  std::size_t channels() const { return maps.dim(3); }

  /// Throws ShapeError unless maps is rank 4 with one label per sample and B >= 2.
  void validate() const;
  FeatureBatch select(std::span<const std::size_t> indices) const;
};

enum class PoolingMode { avg, avg_plus_max };

/// Global pooling over the spatial grid: B x C for avg, B x 2C (mean then max) otherwise.
Tensor pool(const FeatureBatch& features, PoolingMode mode);

struct Layer {
  Tensor weight;  // out x in
  Tensor bias;    // 1 x out
};

/// One embedding branch: linear (depth 1) or an MLP with ReLU between layers.
struct HeadParams {
  std::string branch_id;
  std::vector<Layer> layers;

  std::size_t in_dim() const { return layers.front().weight.cols(); }
  std::size_t out_dim() const { return layers.back().weight.rows(); }
  std::size_t depth() const { return layers.size(); }
  std::size_t parameter_count() const;
  void validate() const;
};

/// Kaiming-uniform weights in +-sqrt(6 / fan_in), zero biases. Hidden layers
/// are `hidden_dim` wide; depth must be 1, 2 or 3.
HeadParams init_head(std::size_t in_dim, std::size_t out_dim, std::size_t depth,
                     std::size_t hidden_dim, std::uint64_t seed,
                     std::string branch_id = "head");

struct EmbeddingBatch {
  Tensor embeddings;  // B x d
  std::string branch_id;
  bool normalized = false;
};

EmbeddingBatch embed(const Tensor& pooled, const HeadParams& head);
EmbeddingBatch normalize_features(const Tensor& pooled);

/// A head's parameters bound into a graph, one Var per weight and bias.
struct HeadVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

HeadVars bind_head(Graph& graph, const HeadParams& head, bool trainable);
/// Differentiable forward pass followed by row-wise L2 normalization.
Var embed(Var pooled, const HeadVars& head);

// Checkpoints: each head is a text line
//   "head <branch_id> in=<in> out=<out> depth=<depth>\n"
// followed, per layer, by u32 rows and u32 cols then rows*cols f64 weights and
// rows f64 biases, all little-endian.
void save_heads(const std::filesystem::path& path, std::span<const HeadParams> heads);
std::vector<HeadParams> load_heads(const std::filesystem::path& path);

}  // namespace s2sd
