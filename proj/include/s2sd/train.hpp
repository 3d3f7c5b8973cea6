#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "s2sd/config.hpp"
#include "s2sd/heads.hpp"
#include "s2sd/metrics.hpp"

namespace s2sd {

struct StepLog {
  std::size_t step = 0;  // 1-based
  double total = 0.0;
  double dml_term = 0.0;
  double distill_term = 0.0;
  double feature_term = 0.0;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<MetricsRecord> metrics;  // ordered by step
  std::vector<StepLog> steps;
  std::vector<HeadParams> heads;       // final parameters; heads[0] is the base branch
  std::filesystem::path checkpoint;    // empty when nothing was written
  double mean_step_seconds = 0.0;
  /// mean_step_seconds relative to a baseline run, once attach_overhead is called.
  std::optional<double> overhead_ratio;

  const MetricsRecord& final_metrics() const { return metrics.back(); }
};

struct Dataset {
  FeatureBatch train;
  FeatureBatch test;
};

/// Feature files when configured, else the synthetic generator seeded by data_seed.
Dataset load_dataset(const RunConfig& config);

/// Trains the configured objective. For two_stage_student the frozen teacher
/// is `teacher` when given, else the "base" head of config.teacher_checkpoint.
/// Writes metrics.jsonl, summary.csv, losses.csv, checkpoint.bin and
/// report.json under config.output_dir unless it is empty.
TrainReport train(const RunConfig& config, const Dataset& data,
                  const HeadParams* teacher = nullptr);
TrainReport train(const RunConfig& config);

struct TwoStageReport {
  TrainReport teacher;
  TrainReport student;
};

/// Stage 1 trains the teacher with the plain DML loss; stage 2 distills it,
/// frozen, into the student.
TwoStageReport train_two_stage(const RunConfig& teacher_config, const RunConfig& student_config);

/// Base-head metrics of a head set on a feature split (avg pooling).
MetricsRecord evaluate(std::span<const HeadParams> heads, const FeatureBatch& features,
                       std::uint64_t seed, std::size_t step = 0, const std::string& split = "test");
MetricsRecord evaluate(const std::filesystem::path& checkpoint, const FeatureBatch& features,
                       std::uint64_t seed, const std::string& split = "test");

void attach_overhead(TrainReport& report, const TrainReport& baseline);

std::string metrics_json_line(const MetricsRecord& record);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& record);

}  // namespace s2sd
