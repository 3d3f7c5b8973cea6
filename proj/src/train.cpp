#include "s2sd/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "io_util.hpp"
#include "s2sd/distill.hpp"
#include "s2sd/errors.hpp"
#include "s2sd/losses.hpp"
#include "s2sd/optim.hpp"

namespace s2sd {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t head_seed(std::uint64_t run_seed, std::uint64_t branch) {
  return Rng(run_seed).split(100 + branch).next();
}

// All trainable heads with their optimizer state.
struct Trainable {
  std::vector<HeadParams> heads;
  std::vector<AdamState> adam;
};

void step_head(HeadParams& head, const HeadVars& vars, AdamState& state, const AdamConfig& cfg) {
  std::vector<Tensor> params, grads;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    params.push_back(std::move(head.layers[l].weight));
    params.push_back(std::move(head.layers[l].bias));
    grads.push_back(vars.weights[l].grad());
    grads.push_back(vars.biases[l].grad());
  }
  adam_step(params, grads, state, cfg);
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    head.layers[l].weight = std::move(params[2 * l]);
    head.layers[l].bias = std::move(params[2 * l + 1]);
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

HeadParams teacher_from_checkpoint(const std::filesystem::path& path) {
  auto heads = load_heads(path);
  for (auto& h : heads) {
    if (h.branch_id == "base") return h;
  }
  throw IoError("checkpoint " + path.string() + ": no 'base' head to use as teacher");
}

class OutputWriter {
public:
  explicit OutputWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (dir_.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string());
    metrics_.open(dir_ / "metrics.jsonl", std::ios::trunc);
    if (!metrics_) throw IoError("cannot open " + (dir_ / "metrics.jsonl").string());
  }

  bool enabled() const { return !dir_.empty(); }
  const std::filesystem::path& dir() const { return dir_; }

  void metrics(const MetricsRecord& rec) {
    if (!enabled()) return;
    metrics_ << metrics_json_line(rec) << '\n';
    metrics_.flush();
  }

  void finish(const TrainReport& report, const RunConfig& config) {
    if (!enabled()) return;
    std::string csv = metrics_csv_header() + "\n";
    for (const auto& m : report.metrics) csv += metrics_csv_row(m) + "\n";
    detail::write_file_atomic(dir_ / "summary.csv", csv);

    std::string losses = "step,total,dml,distill,feature,wall_seconds\n";
    for (const auto& s : report.steps) {
      losses += std::to_string(s.step) + "," + fmt(s.total) + "," + fmt(s.dml_term) + "," +
                fmt(s.distill_term) + "," + fmt(s.feature_term) + "," + fmt(s.wall_seconds) + "\n";
    }
    detail::write_file_atomic(dir_ / "losses.csv", losses);

    nlohmann::json doc;
    doc["config"] = nlohmann::json::parse(config_to_json(config));
    doc["checkpoint"] = report.checkpoint.string();
    doc["mean_step_seconds"] = report.mean_step_seconds;
    doc["overhead_ratio"] = report.overhead_ratio ? nlohmann::json(*report.overhead_ratio) : nlohmann::json(nullptr);
    doc["final_metrics"] = nlohmann::json::parse(metrics_json_line(report.final_metrics()));
    detail::write_file_atomic(dir_ / "report.json", doc.dump(2) + "\n");
  }

private:
  std::filesystem::path dir_;
  std::ofstream metrics_;
};

}  // namespace

Dataset load_dataset(const RunConfig& config) {
  if (config.uses_feature_files()) {
    Dataset d{load_features(config.train_features), load_features(config.test_features)};
    d.train.validate();
    d.test.validate();
    return d;
  }
  SyntheticSpec spec = config.synthetic;
  spec.seed = config.effective_data_seed();
  auto ds = generate_synthetic(spec);
  return {std::move(ds.train), std::move(ds.test)};
}

TrainReport train(const RunConfig& config) { return train(config, load_dataset(config)); }

TrainReport train(const RunConfig& config, const Dataset& data, const HeadParams* teacher) {
  config.validate();
  data.train.validate();
  const std::size_t channels = data.train.channels();
  if (data.test.channels() != channels) throw ShapeError("train: train/test channel counts differ");

  const bool s2sd_mode = config.mode == RunMode::s2sd;
  const bool student_mode = config.mode == RunMode::two_stage_student;
  const bool a_variant = s2sd_mode && config.distill.pooling == PoolingMode::avg_plus_max;

  HeadParams frozen_teacher;
  if (student_mode) {
    frozen_teacher = teacher ? *teacher : teacher_from_checkpoint(config.teacher_checkpoint);
    if (frozen_teacher.in_dim() != channels) {
      throw ShapeError("train: teacher expects " + std::to_string(frozen_teacher.in_dim()) +
                       " input channels, data has " + std::to_string(channels));
    }
  }

  Trainable model;
  model.heads.push_back(init_head(channels, config.base_dim, config.base_depth, config.hidden_width(),
                                  head_seed(config.seed, 0), "base"));
  if (s2sd_mode) {
    const std::size_t target_in = a_variant ? 2 * channels : channels;
    for (std::size_t k = 0; k < config.distill.target_dims.size(); ++k) {
      const std::size_t dim = config.distill.target_dims[k];
      model.heads.push_back(init_head(target_in, dim, config.target_depth, config.hidden_width(),
                                      head_seed(config.seed, k + 1), "target_" + std::to_string(dim)));
    }
  }
  model.adam.resize(model.heads.size());

  // Learnable margin beta: one global entry or one per training class.
  const bool uses_beta = config.dml.kind == DmlKind::margin;
  std::map<Label, std::size_t> class_slot;
  for (Label l : data.train.labels) class_slot.emplace(l, class_slot.size());
  const std::size_t n_spaces = model.heads.size();
  std::vector<Tensor> betas;
  std::vector<AdamState> beta_adam(n_spaces);
  if (uses_beta) {
    const std::size_t width = config.dml.margin_beta_per_class ? class_slot.size() : 1;
    betas.assign(n_spaces, Tensor({1, width}, config.dml.margin_beta0));
  }
  AdamConfig beta_opt = config.optimizer;
  beta_opt.lr = config.beta_lr.value_or(config.optimizer.lr);
  beta_opt.weight_decay = 0.0;

  Rng root(config.seed);
  Rng batch_rng = root.split(1);
  Rng tuple_rng = root.split(2);

  OutputWriter writer(config.output_dir);
  TrainReport report;
  double step_time_total = 0.0;

  for (std::size_t step = 0; step < config.iterations; ++step) {
    const auto t0 = Clock::now();
    const auto idx = class_balanced_batch(data.train.labels, config.classes_per_batch,
                                          config.samples_per_class_batch, batch_rng);
    const FeatureBatch batch = data.train.select(idx);
    const std::vector<Label>& labels = batch.labels;
    std::vector<std::size_t> slots;
    for (Label l : labels) slots.push_back(class_slot.at(l));

    Graph g;
    std::vector<HeadVars> vars;
    for (const auto& h : model.heads) vars.push_back(bind_head(g, h, true));
    std::vector<Var> beta_vars;
    for (const auto& b : betas) beta_vars.push_back(g.parameter(b));

    std::string term = "embedding";
    StepLog log;
    log.step = step + 1;
    Var total;
    try {
      Var x_base = g.constant(pool(batch, PoolingMode::avg));
      Var x_target = a_variant ? g.constant(pool(batch, PoolingMode::avg_plus_max)) : x_base;
      std::vector<Var> spaces;
      spaces.push_back(embed(x_base, vars[0]));
      for (std::size_t k = 1; k < vars.size(); ++k) spaces.push_back(embed(x_target, vars[k]));

      auto dml = [&](Var emb, std::size_t space) {
        term = "dml[" + model.heads[space].branch_id + "]";
        Var beta = uses_beta ? beta_vars[space] : Var{};
        Var v = dml_loss(config.dml, emb, labels, tuple_rng, beta, slots).value;
        term = "distill";
        return v;
      };

      if (s2sd_mode) {
        std::optional<Var> features;
        if (config.distill.feature_distill) features = l2_normalize_rows(x_target);
        const Objective obj = s2sd_objective(spaces, features, dml, config.distill, step);
        total = obj.total;
        log.dml_term = obj.parts.dml_term;
        log.distill_term = obj.parts.distill_term;
        log.feature_term = obj.parts.feature_term;
      } else if (student_mode) {
        Var d_base = dml(spaces[0], 0);
        term = "distill";
        Var teacher_emb = embed(x_base, bind_head(g, frozen_teacher, false));
        Var dist = scale(distill_variant(pairwise_cosine(spaces[0]), pairwise_cosine(teacher_emb),
                                         config.distill.temperature, config.distill.variant),
                         config.distill.gamma);
        Var half = scale(d_base, 0.5);
        total = add(half, dist);
        log.dml_term = half.item();
        log.distill_term = dist.item();
      } else {
        total = dml(spaces[0], 0);
        log.dml_term = total.item();
      }
      log.total = total.item();
      term = "backward";
      g.backward(total);
    } catch (const NonFiniteError& e) {
      throw NumericalAbort(step + 1, term,
                           "numerical abort at step " + std::to_string(step + 1) + " in " + term + ": " + e.what());
    }

    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      step_head(model.heads[h], vars[h], model.adam[h], config.optimizer);
    }
    for (std::size_t s = 0; s < betas.size(); ++s) {
      Tensor grad = beta_vars[s].grad();
      std::vector<Tensor> p{std::move(betas[s])};
      std::vector<Tensor> gr{std::move(grad)};
      adam_step(p, gr, beta_adam[s], beta_opt);
      betas[s] = std::move(p[0]);
      for (auto& v : betas[s].data()) v = std::max(v, 1e-6);
    }

    log.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    step_time_total += log.wall_seconds;
    report.steps.push_back(log);

    if ((step + 1) % config.eval_every == 0 || step + 1 == config.iterations) {
      auto rec = evaluate(model.heads, data.test, config.seed, step + 1, "test");
      writer.metrics(rec);
      report.metrics.push_back(std::move(rec));
    }
  }

  report.mean_step_seconds = step_time_total / static_cast<double>(config.iterations);
  report.heads = model.heads;
  if (writer.enabled()) {
    report.checkpoint = writer.dir() / "checkpoint.bin";
    save_heads(report.checkpoint, report.heads);
  }
  writer.finish(report, config);
  return report;
}

TwoStageReport train_two_stage(const RunConfig& teacher_config, const RunConfig& student_config) {
  RunConfig tc = teacher_config;
  tc.mode = RunMode::two_stage_teacher;
  const Dataset data = load_dataset(tc);
  TwoStageReport out;
  out.teacher = train(tc, data);

  RunConfig sc = student_config;
  sc.mode = RunMode::two_stage_student;
  if (sc.teacher_checkpoint.empty()) {
    sc.teacher_checkpoint = out.teacher.checkpoint.empty() ? std::filesystem::path("<in-memory>")
                                                           : out.teacher.checkpoint;
  }
  const Dataset student_data = load_dataset(sc);
  out.student = train(sc, student_data, &out.teacher.heads.front());
  return out;
}

MetricsRecord evaluate(std::span<const HeadParams> heads, const FeatureBatch& features,
                       std::uint64_t seed, std::size_t step, const std::string& split) {
  const HeadParams* base = nullptr;
  for (const auto& h : heads) {
    if (h.branch_id == "base") {
      base = &h;
      break;
    }
  }
  if (!base) {
    if (heads.empty()) throw std::invalid_argument("evaluate: no heads");
    base = &heads.front();
  }
  if (base->in_dim() != features.channels()) {
    throw ShapeError("evaluate: head expects " + std::to_string(base->in_dim()) + " channels, features have " +
                     std::to_string(features.channels()));
  }
  const auto emb = embed(pool(features, PoolingMode::avg), *base);
  return compute_metrics(emb.embeddings, features.labels, seed, step, split);
}

MetricsRecord evaluate(const std::filesystem::path& checkpoint, const FeatureBatch& features,
                       std::uint64_t seed, const std::string& split) {
  const auto heads = load_heads(checkpoint);
  return evaluate(heads, features, seed, 0, split);
}

void attach_overhead(TrainReport& report, const TrainReport& baseline) {
  if (baseline.mean_step_seconds > 0.0) report.overhead_ratio = report.mean_step_seconds / baseline.mean_step_seconds;
}

std::string metrics_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json doc;
  doc["step"] = r.step;
  doc["split"] = r.split;
  doc["seed"] = r.seed;
  for (const auto& [k, v] : r.recall_at) doc["recall_at_" + std::to_string(k)] = v;
  doc["nmi"] = r.nmi;
  doc["density_ratio"] = r.density_ratio;
  doc["spectral_decay"] = r.spectral_decay;
  return doc.dump();
}

std::string metrics_csv_header() {
  return "step,split,seed,recall_at_1,recall_at_2,nmi,density_ratio,spectral_decay";
}

std::string metrics_csv_row(const MetricsRecord& r) {
  auto recall = [&](std::size_t k) {
    auto it = r.recall_at.find(k);
    return it == r.recall_at.end() ? std::string() : fmt(it->second);
  };
  return std::to_string(r.step) + "," + r.split + "," + std::to_string(r.seed) + "," + recall(1) + "," +
         recall(2) + "," + fmt(r.nmi) + "," + fmt(r.density_ratio) + "," + fmt(r.spectral_decay);
}

}  // namespace s2sd
