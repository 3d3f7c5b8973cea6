#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "s2sd/data.hpp"
#include "s2sd/distill.hpp"
#include "s2sd/losses.hpp"

namespace s2sd {

enum class RunMode { baseline, s2sd, two_stage_teacher, two_stage_student };

RunMode parse_run_mode(const std::string& name);
std::string to_string(RunMode mode);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Everything a training or evaluation run needs. Every field maps to one
/// key of the flat JSON config; see README.md for the key table.
struct RunConfig {
  // Data: feature files when both paths are set, else the synthetic generator.
  std::filesystem::path train_features;
  std::filesystem::path test_features;
  SyntheticSpec synthetic;
  std::optional<std::uint64_t> data_seed;  // defaults to `seed`

  std::size_t base_dim = 8;
  std::size_t base_depth = 1;
  std::size_t target_depth = 2;
  std::size_t target_hidden = 0;  // 0: widest target dim

  DmlConfig dml;
  std::optional<double> beta_lr;  // margin beta; defaults to optimizer.lr

  DistillConfig distill{.gamma = 50.0,
                        .temperature = 1.0,
                        .topology = Topology::multi,
                        .target_dims = {16, 32, 64},
                        .feature_distill = false,
                        .warmup_n = 200,
                        .pooling = PoolingMode::avg,
                        .variant = DistillVariant::rowwise_kl};
  AdamConfig optimizer;

  std::size_t classes_per_batch = 8;
  std::size_t samples_per_class_batch = 4;
  std::size_t iterations = 2000;
  std::size_t eval_every = 500;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;  // empty: nothing is written
  RunMode mode = RunMode::s2sd;
  std::filesystem::path teacher_checkpoint;

  bool uses_feature_files() const { return !train_features.empty(); }
  std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
  std::size_t hidden_width() const;
  /// Cross-field checks; throws ConfigError naming the offending key.
  void validate() const;
};

/// Parses a flat JSON object. Unknown keys, type mismatches and constraint
/// violations throw ConfigError naming the key.
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);

/// Applies `key = value` on top of `config`; `value` is JSON text, or a bare
/// string when it does not parse as JSON.
void apply_override(RunConfig& config, const std::string& key, const std::string& value);

/// The config as a flat JSON object with every key present.
std::string config_to_json(const RunConfig& config);

}  // namespace s2sd
