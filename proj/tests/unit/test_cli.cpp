// Config parsing, the optimizer, and the training driver.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>

#include "s2sd/config.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/optim.hpp"
#include "s2sd/train.hpp"
#include "test_support.hpp"

using namespace s2sd;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(RunMode mode) {
  RunConfig c = parse_config("{}");
  c.synthetic.n_classes_train = 6;
  c.synthetic.n_classes_test = 4;
  c.synthetic.samples_per_class = 6;
  c.synthetic.feature_dim = 16;
  c.base_dim = 4;
  c.distill.target_dims = {8, 16};
  c.classes_per_batch = 3;
  c.samples_per_class_batch = 3;
  c.iterations = 30;
  c.eval_every = 10;
  c.mode = mode;
  return c;
}

std::string key_of(const std::string& json) {
  try {
    parse_config(json);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("config defaults and keys") {
  RunConfig c = parse_config("{}");
  CHECK(c.base_dim == 8);
  CHECK(c.distill.gamma == 50.0);
  CHECK(c.distill.temperature == 1.0);
  CHECK(c.distill.target_dims == std::vector<std::size_t>{16, 32, 64});
  CHECK(c.distill.warmup_n == 200);
  CHECK(c.optimizer.lr == 1e-3);
  CHECK(c.mode == RunMode::s2sd);
  CHECK(c.dml.kind == DmlKind::multisimilarity);
  CHECK(c.synthetic.subspace_dim == 8);
  CHECK(c.synthetic.noise_sigma == 0.25);
  CHECK(c.synthetic.subspace_scale == 3.0);
  CHECK(c.synthetic.shared_subspace);

  RunConfig p = parse_config(R"({"gamma": 50, "temperature": 1})");
  CHECK(p.distill.gamma == 50.0);
  CHECK(p.distill.temperature == 1.0);
  RunConfig t = parse_config(R"({"target_dims": [512, 1024, 1536, 2048], "feature_dim": 2048})");
  CHECK(t.distill.target_dims == std::vector<std::size_t>{512, 1024, 1536, 2048});

  RunConfig all = parse_config(config_to_json(p));
  CHECK(config_to_json(all) == config_to_json(p));
}

TEST_CASE("config errors name the key") {
  CHECK(key_of(R"({"gamma_typo": 1})") == "gamma_typo");
  CHECK(key_of(R"({"gamma": "high"})") == "gamma");
  CHECK(key_of(R"({"temperature": 0})") == "temperature");
  CHECK(key_of(R"({"target_dims": [64, 32]})") == "target_dims");
  CHECK(key_of(R"({"base_dim": 32})") == "target_dims");
  CHECK(key_of(R"({"mode": "two_stage_student"})") == "teacher_checkpoint");
  CHECK(key_of(R"({"topology": "star"})") == "topology");
  CHECK(key_of(R"({"iterations": -1})") == "iterations");
  CHECK_THROWS_AS(parse_config("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(parse_config("{"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("overrides") {
  RunConfig c = parse_config("{}");
  apply_override(c, "gamma", "5");
  apply_override(c, "topology", "nested");
  apply_override(c, "target_dims", "[12, 24]");
  apply_override(c, "output_dir", "/tmp/run");
  apply_override(c, "shared_subspace", "false");
  CHECK(c.distill.gamma == 5.0);
  CHECK(c.distill.topology == Topology::nested);
  CHECK(c.distill.target_dims == std::vector<std::size_t>{12, 24});
  CHECK(c.output_dir == fs::path("/tmp/run"));
  CHECK_FALSE(c.synthetic.shared_subspace);
  CHECK_THROWS_AS(apply_override(c, "no_such_key", "1"), ConfigError);
}

TEST_CASE("adam closed forms") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<Tensor> p{Tensor::row(std::vector<double>{1.0, -2.0})};
  std::vector<Tensor> zero{Tensor({1, 2}, 0.0)};
  AdamState st;
  adam_step(p, zero, st, cfg);
  CHECK(s2sd::testing::values(p[0]) == std::vector<double>{1.0, -2.0});

  AdamConfig sign{0.1, 0.0, 0.0, 1e-8, 0.0};
  std::vector<Tensor> q{Tensor::row(std::vector<double>{1.0, -2.0})};
  std::vector<Tensor> g{Tensor::row(std::vector<double>{0.5, -3.0})};
  AdamState st2;
  adam_step(q, g, st2, sign);
  CHECK(std::abs(q[0][0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))) < 1e-15);
  CHECK(std::abs(q[0][1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))) < 1e-15);

  // Scalar recurrence on f(p) = p^2.
  std::vector<Tensor> s{Tensor::scalar(1.0)};
  AdamState st3;
  double m = 0.0, v = 0.0, ref = 1.0;
  for (int t = 1; t <= 100; ++t) {
    std::vector<Tensor> grad{Tensor::scalar(2.0 * s[0].item())};
    adam_step(s, grad, st3, cfg);
    const double gr = 2.0 * ref;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(std::abs(s[0].item()) < 0.05);
  CHECK(std::abs(s[0].item() - ref) < 1e-12);

  AdamConfig wd = cfg;
  wd.weight_decay = 0.5;
  std::vector<Tensor> w{Tensor::scalar(1.0)};
  std::vector<Tensor> nog{Tensor::scalar(0.0)};
  AdamState st4;
  adam_step(w, nog, st4, wd);
  CHECK(w[0].item() < 1.0);
}

TEST_CASE("training is deterministic and logs every term") {
  RunConfig c = small_config(RunMode::s2sd);
  const Dataset data = load_dataset(c);
  TrainReport a = train(c, data);
  TrainReport b = train(c, data);
  REQUIRE(a.metrics.size() == 3);
  CHECK(a.metrics[0].step == 10);
  CHECK(a.metrics.back().step == 30);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(metrics_json_line(a.metrics[i]) == metrics_json_line(b.metrics[i]));
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].total == b.steps[i].total);
    CHECK(a.steps[i].wall_seconds > 0.0);
    CHECK(a.steps[i].distill_term > 0.0);
  }
  REQUIRE(a.heads.size() == 3);
  CHECK(a.heads[0].branch_id == "base");
  CHECK(a.heads[2].branch_id == "target_16");
  CHECK(a.heads[1].layers[0].weight.rows() == 16);  // hidden width defaults to the widest target
}

TEST_CASE("baseline never builds targets and gamma zero logs no distillation") {
  RunConfig c = small_config(RunMode::baseline);
  TrainReport base = train(c);
  CHECK(base.heads.size() == 1);
  for (const auto& s : base.steps) {
    CHECK(s.distill_term == 0.0);
    CHECK(s.total == s.dml_term);
  }
  RunConfig g0 = small_config(RunMode::s2sd);
  g0.distill.gamma = 0.0;
  for (const auto& s : train(g0).steps) CHECK(s.distill_term == 0.0);
}

TEST_CASE("every topology, variant and loss trains") {
  for (const char* topo : {"dual", "multi", "nested", "chained"}) {
    RunConfig c = small_config(RunMode::s2sd);
    c.distill.topology = parse_topology(topo);
    if (c.distill.topology == Topology::dual) c.distill.target_dims = {16};
    c.iterations = 5;
    CHECK_NOTHROW(train(c));
  }
  for (const char* v : {"full_kl", "rowmean_kl", "cosine_match", "euclidean_match"}) {
    RunConfig c = small_config(RunMode::s2sd);
    c.distill.variant = parse_distill_variant(v);
    c.iterations = 5;
    CHECK_NOTHROW(train(c));
  }
  for (const char* loss : {"margin", "triplet"}) {
    RunConfig c = small_config(RunMode::s2sd);
    c.dml.kind = parse_dml_kind(loss);
    c.dml.margin_beta_per_class = true;
    c.iterations = 5;
    CHECK_NOTHROW(train(c));
  }
  RunConfig f = small_config(RunMode::s2sd);
  f.synthetic.height = 2;
  f.synthetic.width = 2;
  f.distill.pooling = PoolingMode::avg_plus_max;
  f.distill.feature_distill = true;
  f.distill.warmup_n = 3;
  f.iterations = 6;
  TrainReport r = train(f);
  CHECK(r.heads[1].in_dim() == 32);
  CHECK(r.steps[1].feature_term == 0.0);
  CHECK(r.steps[4].feature_term > 0.0);
}

TEST_CASE("numerical abort names step and term") {
  RunConfig c = small_config(RunMode::baseline);
  Dataset data = load_dataset(c);
  for (auto& v : data.train.maps.data()) v = std::numeric_limits<double>::infinity();
  try {
    train(c, data);
    FAIL("expected NumericalAbort");
  } catch (const NumericalAbort& e) {
    CHECK(e.step() == 1);
    CHECK(e.term() == "embedding");
  }
}

TEST_CASE("outputs, checkpoints and evaluation") {
  const fs::path dir = fs::temp_directory_path() / "s2sd_cli_test";
  fs::remove_all(dir);
  RunConfig c = small_config(RunMode::s2sd);
  c.output_dir = dir;
  const Dataset data = load_dataset(c);
  TrainReport r = train(c, data);
  for (const char* f : {"metrics.jsonl", "summary.csv", "losses.csv", "checkpoint.bin", "report.json"})
    CHECK(fs::exists(dir / f));
  std::ifstream jl(dir / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(jl, line)) {
    auto doc = nlohmann::json::parse(line);
    CHECK(doc.contains("recall_at_1"));
    CHECK(doc.contains("spectral_decay"));
    ++lines;
  }
  CHECK(lines == r.metrics.size());
  auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(report["final_metrics"]["step"] == 30);

  MetricsRecord from_disk = evaluate(r.checkpoint, data.test, c.seed);
  MetricsRecord in_memory = evaluate(r.heads, data.test, c.seed);
  CHECK(metrics_json_line(from_disk) == metrics_json_line(in_memory));
  CHECK(from_disk.recall_at == r.final_metrics().recall_at);

  RunConfig again = c;
  again.output_dir = dir / "again";
  train(again, data);
  CHECK(slurp(dir / "metrics.jsonl") == slurp(dir / "again" / "metrics.jsonl"));
  CHECK(s2sd::testing::read_bytes(dir / "checkpoint.bin") == s2sd::testing::read_bytes(dir / "again" / "checkpoint.bin"));
  fs::remove_all(dir);
}

TEST_CASE("evaluation edge cases") {
  RunConfig c = small_config(RunMode::baseline);
  c.synthetic.noise_sigma = 1e-12;
  c.synthetic.subspace_dim = 0;
  const Dataset data = load_dataset(c);
  std::vector<HeadParams> heads{init_head(16, 4, 1, 0, 1, "base")};
  MetricsRecord m = evaluate(heads, data.test, 0);
  CHECK(m.recall_at.at(1) == 1.0);
  CHECK(m.recall_at.at(2) == 1.0);
  CHECK(m.nmi == doctest::Approx(1.0));
  std::vector<HeadParams> wrong{init_head(8, 4, 1, 0, 1, "base")};
  CHECK_THROWS_AS(evaluate(wrong, data.test, 0), ShapeError);
}

TEST_CASE("random heads sit near the class prior") {
  RunConfig c = parse_config("{}");
  const Dataset data = load_dataset(c);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::vector<HeadParams> heads{init_head(64, 8, 1, 0, s, "base")};
    mean += evaluate(heads, data.test, 0).recall_at.at(1) / 5.0;
  }
  // 20 balanced test classes: a uniform neighbour matches with probability 24/499.
  CHECK(mean < 0.9);
  CHECK(mean > 24.0 / 499.0);
}

TEST_CASE("two-stage freezes the teacher") {
  RunConfig teacher = small_config(RunMode::two_stage_teacher);
  teacher.base_dim = 16;
  RunConfig student = small_config(RunMode::two_stage_student);
  student.teacher_checkpoint = "<in-memory>";
  auto out = train_two_stage(teacher, student);
  CHECK(out.teacher.heads.size() == 1);
  CHECK(out.student.heads.size() == 1);
  CHECK(out.teacher.heads[0].out_dim() == 16);
  CHECK(out.student.heads[0].out_dim() == 4);

  const HeadParams before = out.teacher.heads[0];
  const Dataset data = load_dataset(student);
  train(student, data, &out.teacher.heads[0]);
  for (std::size_t l = 0; l < before.depth(); ++l)
    CHECK(out.teacher.heads[0].layers[l].weight == before.layers[l].weight);
}

TEST_CASE("gamma zero student tracks the baseline") {
  RunConfig base = small_config(RunMode::baseline);
  RunConfig teacher = small_config(RunMode::two_stage_teacher);
  RunConfig student = small_config(RunMode::two_stage_student);
  student.teacher_checkpoint = "<in-memory>";
  student.distill.gamma = 0.0;
  const Dataset data = load_dataset(base);
  TrainReport b = train(base, data);
  TrainReport t = train(teacher, data);
  TrainReport s = train(student, data, &t.heads[0]);
  CHECK(s.final_metrics().recall_at == b.final_metrics().recall_at);
  // Halving the loss changes Adam only through epsilon.
  double worst = 0.0;
  for (std::size_t i = 0; i < b.heads[0].layers[0].weight.size(); ++i)
    worst = std::max(worst, std::abs(b.heads[0].layers[0].weight[i] - s.heads[0].layers[0].weight[i]));
  CHECK(worst < 1e-5);
}
