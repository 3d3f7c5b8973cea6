// Command-line driver: generate, train, train-two-stage, evaluate, grad-check.
//
// Every subcommand that reads a config also accepts `--<key> <value>` for any
// config key; overrides are applied in order on top of the file (or defaults).

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "s2sd/config.hpp"
#include "s2sd/data.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/train.hpp"
#include "s2sd/verify.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kConfigError = 2;
constexpr int kNumericalAbort = 3;
constexpr int kIoError = 4;

s2sd::RunConfig build_config(const std::string& path, const std::vector<std::string>& extras) {
  s2sd::RunConfig cfg = path.empty() ? s2sd::parse_config("{}") : s2sd::load_config(path);
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string flag = extras[i];
    if (flag.rfind("--", 0) != 0) throw s2sd::ConfigError(flag, "expected --<key> <value>");
    flag = flag.substr(2);
    std::string value;
    if (auto eq = flag.find('='); eq != std::string::npos) {
      value = flag.substr(eq + 1);
      flag = flag.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw s2sd::ConfigError(flag, "missing value");
      value = extras[++i];
    }
    for (auto& ch : flag)
      if (ch == '-') ch = '_';
    s2sd::apply_override(cfg, flag, value);
  }
  cfg.validate();
  return cfg;
}

void print_final(const s2sd::TrainReport& report) {
  std::cout << s2sd::metrics_json_line(report.final_metrics()) << '\n';
  if (!report.checkpoint.empty()) std::cerr << "checkpoint: " << report.checkpoint.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale similarity self-distillation for metric learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  auto* gen = app.add_subcommand("generate", "write synthetic train.feat / test.feat");
  gen->add_option("-c,--config", config_path, "JSON config file");
  gen->add_option("-o,--out", out_dir, "output directory")->required();
  gen->allow_extras();

  auto* tr = app.add_subcommand("train", "train one run");
  tr->add_option("-c,--config", config_path, "JSON config file");
  tr->allow_extras();

  std::string teacher_path;
  std::size_t teacher_dim = 0;
  auto* two = app.add_subcommand("train-two-stage", "train a teacher, then distill it into the student");
  two->add_option("-c,--config", config_path, "student JSON config file");
  two->add_option("--teacher-config", teacher_path, "teacher JSON config file");
  two->add_option("--teacher-dim", teacher_dim, "teacher embedding dim (default: widest target dim)");
  two->allow_extras();

  std::string checkpoint, features;
  std::uint64_t eval_seed = 0;
  auto* ev = app.add_subcommand("evaluate", "base-head metrics of a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint.bin")->required();
  ev->add_option("--features", features, "feature file (default: the config's test split)");
  ev->add_option("-c,--config", config_path, "JSON config file");
  ev->add_option("--eval-seed", eval_seed, "k-means seed");
  ev->allow_extras();

  std::size_t n_seeds = 5;
  double tolerance = 1e-4;
  auto* gc = app.add_subcommand("grad-check", "gradient suite against central differences");
  gc->add_option("--seeds", n_seeds, "seeded batches per loss");
  gc->add_option("--tolerance", tolerance, "max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) {
      auto cfg = build_config(config_path, gen->remaining());
      auto spec = cfg.synthetic;
      spec.seed = cfg.effective_data_seed();
      auto ds = s2sd::generate_synthetic(spec);
      std::filesystem::create_directories(out_dir);
      s2sd::save_features(ds.train, std::filesystem::path(out_dir) / "train.feat");
      s2sd::save_features(ds.test, std::filesystem::path(out_dir) / "test.feat");
      std::cout << "train " << ds.train.size() << " samples, test " << ds.test.size() << " samples -> "
                << out_dir << '\n';
    } else if (*tr) {
      auto cfg = build_config(config_path, tr->remaining());
      print_final(s2sd::train(cfg));
    } else if (*two) {
      auto student = build_config(config_path, two->remaining());
      s2sd::RunConfig teacher;
      if (teacher_path.empty()) {
        teacher = student;
        teacher.base_dim = teacher_dim ? teacher_dim : student.distill.target_dims.back();
        if (!student.output_dir.empty()) teacher.output_dir = student.output_dir / "teacher";
      } else {
        teacher = build_config(teacher_path, {});
      }
      teacher.mode = s2sd::RunMode::two_stage_teacher;
      student.mode = s2sd::RunMode::two_stage_student;
      if (!student.output_dir.empty()) student.output_dir /= "student";
      teacher.validate();
      auto report = s2sd::train_two_stage(teacher, student);
      std::cout << "teacher " << s2sd::metrics_json_line(report.teacher.final_metrics()) << '\n';
      std::cout << "student " << s2sd::metrics_json_line(report.student.final_metrics()) << '\n';
    } else if (*ev) {
      auto cfg = build_config(config_path, ev->remaining());
      s2sd::FeatureBatch batch = features.empty() ? s2sd::load_dataset(cfg).test : s2sd::load_features(features);
      std::cout << s2sd::metrics_json_line(s2sd::evaluate(checkpoint, batch, eval_seed)) << '\n';
    } else if (*gc) {
      bool ok = true;
      for (const auto& r : s2sd::run_gradient_suite(n_seeds)) {
        const bool pass = r.error < tolerance;
        ok = ok && pass;
        std::printf("%-26s seed=%llu B=%2zu rel_err=%.3e %s\n", r.loss.c_str(),
                    static_cast<unsigned long long>(r.seed), r.batch, r.error, pass ? "ok" : "FAIL");
      }
      return ok ? kOk : kCheckFailed;
    }
  } catch (const s2sd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const s2sd::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kNumericalAbort;
  } catch (const s2sd::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
