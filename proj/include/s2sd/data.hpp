#pragma once

#include <cstdint>
#include <filesystem>

#include "s2sd/heads.hpp"

namespace s2sd {

/// Synthetic zero-shot dataset: disjoint train and test classes drawn from the
/// same generative process.
///
/// Each class gets a prototype ~ N(0, prototype_scale^2 I_C). A random
/// orthonormal basis U of rank `subspace_dim` is drawn once per dataset when
/// `shared_subspace` is set, otherwise once per class. A sample is
///   prototype + subspace_scale * U z + noise_sigma * e,   z, e standard normal,
/// and every spatial cell of its H x W map adds independent jitter with
/// standard deviation spatial_jitter * noise_sigma.
struct SyntheticSpec {
  std::size_t n_classes_train = 20;
  std::size_t n_classes_test = 20;
  std::size_t samples_per_class = 25;
  std::size_t feature_dim = 64;
  std::size_t height = 1;
  std::size_t width = 1;
  double prototype_scale = 1.0;
  double noise_sigma = 0.25;
  std::size_t subspace_dim = 8;
  double subspace_scale = 3.0;
  bool shared_subspace = true;
  double spatial_jitter = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  FeatureBatch train;
  FeatureBatch test;
};

/// Train classes are labelled 0..n_train-1, test classes n_train..n_train+n_test-1.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// FeatureFile layout, little-endian throughout:
//   "S2SDFEAT" | u32 version (1) | u32 N | u32 H | u32 W | u32 C
//   | N*H*W*C f32 feature values | N u32 labels
// Labels must be below 2^31.
inline constexpr char kFeatureMagic[8] = {'S', '2', 'S', 'D', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kMaxLabel = 0x7fffffffu;

/// Serialized bytes of `batch`; features are rounded to f32.
std::string encode_features(const FeatureBatch& batch);
FeatureBatch decode_features(std::string_view bytes, const std::string& origin = "<memory>");

/// Atomic write through a temp file in the same directory.
void save_features(const FeatureBatch& batch, const std::filesystem::path& path);
FeatureBatch load_features(const std::filesystem::path& path);

}  // namespace s2sd
