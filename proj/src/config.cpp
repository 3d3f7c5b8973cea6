#include "s2sd/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "s2sd/errors.hpp"

namespace s2sd {

using nlohmann::json;

RunMode parse_run_mode(const std::string& name) {
  if (name == "baseline") return RunMode::baseline;
  if (name == "s2sd") return RunMode::s2sd;
  if (name == "two_stage_teacher") return RunMode::two_stage_teacher;
  if (name == "two_stage_student") return RunMode::two_stage_student;
  throw std::invalid_argument("unknown mode '" + name + "'");
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::baseline: return "baseline";
    case RunMode::s2sd: return "s2sd";
    case RunMode::two_stage_teacher: return "two_stage_teacher";
    case RunMode::two_stage_student: return "two_stage_student";
  }
  return "?";
}

std::size_t RunConfig::hidden_width() const {
  if (target_hidden > 0) return target_hidden;
  std::size_t widest = base_dim;
  for (auto d : distill.target_dims) widest = std::max(widest, d);
  return widest;
}

namespace {

struct Field {
  std::function<void(RunConfig&, const json&, const std::string&)> set;
  std::function<json(const RunConfig&)> get;
};

[[noreturn]] void type_error(const std::string& key, const char* expected, const json& v) {
  throw ConfigError(key, "config key '" + key + "': expected " + expected + ", got " + v.dump());
}

std::size_t as_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) type_error(key, "a non-negative integer", v);
  return v.get<std::size_t>();
}

double as_real(const json& v, const std::string& key) {
  if (!v.is_number()) type_error(key, "a number", v);
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) type_error(key, "a boolean", v);
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) type_error(key, "a string", v);
  return v.get<std::string>();
}

// Runs a parser on a string value and rewraps its failure as a ConfigError.
template <typename Parse>
auto as_enum(const json& v, const std::string& key, Parse parse) {
  const std::string s = as_string(v, key);
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, "config key '" + key + "': " + e.what());
  }
}

#define COUNT_FIELD(name, member)                                                         \
  {                                                                                       \
    name, {[](RunConfig& c, const json& v, const std::string& k) { c.member = as_count(v, k); }, \
           [](const RunConfig& c) { return json(c.member); } }                            \
  }
#define REAL_FIELD(name, member)                                                          \
  {                                                                                       \
    name, {[](RunConfig& c, const json& v, const std::string& k) { c.member = as_real(v, k); }, \
           [](const RunConfig& c) { return json(c.member); } }                            \
  }
#define BOOL_FIELD(name, member)                                                          \
  {                                                                                       \
    name, {[](RunConfig& c, const json& v, const std::string& k) { c.member = as_bool(v, k); }, \
           [](const RunConfig& c) { return json(c.member); } }                            \
  }
#define PATH_FIELD(name, member)                                                            \
  {                                                                                         \
    name, {[](RunConfig& c, const json& v, const std::string& k) { c.member = as_string(v, k); }, \
           [](const RunConfig& c) { return json(c.member.string()); } }                     \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      PATH_FIELD("train_features", train_features),
      PATH_FIELD("test_features", test_features),
      COUNT_FIELD("n_classes_train", synthetic.n_classes_train),
      COUNT_FIELD("n_classes_test", synthetic.n_classes_test),
      COUNT_FIELD("samples_per_class", synthetic.samples_per_class),
      COUNT_FIELD("feature_dim", synthetic.feature_dim),
      COUNT_FIELD("spatial_h", synthetic.height),
      COUNT_FIELD("spatial_w", synthetic.width),
      REAL_FIELD("prototype_scale", synthetic.prototype_scale),
      REAL_FIELD("noise_sigma", synthetic.noise_sigma),
      COUNT_FIELD("subspace_dim", synthetic.subspace_dim),
      REAL_FIELD("subspace_scale", synthetic.subspace_scale),
      BOOL_FIELD("shared_subspace", synthetic.shared_subspace),
      REAL_FIELD("spatial_jitter", synthetic.spatial_jitter),
      {"data_seed",
       {[](RunConfig& c, const json& v, const std::string& k) {
          if (v.is_null()) c.data_seed.reset();
          else c.data_seed = as_count(v, k);
        },
        [](const RunConfig& c) { return c.data_seed ? json(*c.data_seed) : json(nullptr); }}},
      COUNT_FIELD("base_dim", base_dim),
      COUNT_FIELD("base_depth", base_depth),
      COUNT_FIELD("target_depth", target_depth),
      COUNT_FIELD("target_hidden", target_hidden),
      {"dml_loss",
       {[](RunConfig& c, const json& v, const std::string& k) { c.dml.kind = as_enum(v, k, parse_dml_kind); },
        [](const RunConfig& c) { return json(to_string(c.dml.kind)); }}},
      REAL_FIELD("ms_alpha", dml.multisimilarity.alpha),
      REAL_FIELD("ms_beta", dml.multisimilarity.beta),
      REAL_FIELD("ms_lambda", dml.multisimilarity.lambda),
      REAL_FIELD("ms_epsilon", dml.multisimilarity.epsilon),
      REAL_FIELD("margin", dml.margin),
      REAL_FIELD("margin_beta0", dml.margin_beta0),
      BOOL_FIELD("margin_beta_per_class", dml.margin_beta_per_class),
      {"beta_lr",
       {[](RunConfig& c, const json& v, const std::string& k) {
          if (v.is_null()) c.beta_lr.reset();
          else c.beta_lr = as_real(v, k);
        },
        [](const RunConfig& c) { return c.beta_lr ? json(*c.beta_lr) : json(nullptr); }}},
      REAL_FIELD("triplet_margin", dml.triplet_margin),
      REAL_FIELD("sampling_lower_cutoff", dml.sampling.lower_cutoff),
      REAL_FIELD("sampling_upper_cutoff", dml.sampling.upper_cutoff),
      REAL_FIELD("sampling_clip", dml.sampling.clip),
      REAL_FIELD("gamma", distill.gamma),
      REAL_FIELD("temperature", distill.temperature),
      {"topology",
       {[](RunConfig& c, const json& v, const std::string& k) { c.distill.topology = as_enum(v, k, parse_topology); },
        [](const RunConfig& c) { return json(to_string(c.distill.topology)); }}},
      {"target_dims",
       {[](RunConfig& c, const json& v, const std::string& k) {
          if (!v.is_array()) type_error(k, "an array of positive integers", v);
          std::vector<std::size_t> dims;
          for (const auto& e : v) {
            if (!e.is_number_integer() || e.get<long long>() <= 0) type_error(k, "an array of positive integers", v);
            dims.push_back(e.get<std::size_t>());
          }
          c.distill.target_dims = std::move(dims);
        },
        [](const RunConfig& c) { return json(c.distill.target_dims); }}},
      BOOL_FIELD("feature_distill", distill.feature_distill),
      COUNT_FIELD("warmup_n", distill.warmup_n),
      {"pooling",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.distill.pooling = as_enum(v, k, [](const std::string& s) {
            if (s == "avg") return PoolingMode::avg;
            if (s == "avg_plus_max") return PoolingMode::avg_plus_max;
            throw std::invalid_argument("unknown pooling '" + s + "'");
          });
        },
        [](const RunConfig& c) {
          return json(c.distill.pooling == PoolingMode::avg ? "avg" : "avg_plus_max");
        }}},
      {"distill_variant",
       {[](RunConfig& c, const json& v, const std::string& k) {
          c.distill.variant = as_enum(v, k, parse_distill_variant);
        },
        [](const RunConfig& c) { return json(to_string(c.distill.variant)); }}},
      REAL_FIELD("lr", optimizer.lr),
      REAL_FIELD("adam_beta1", optimizer.beta1),
      REAL_FIELD("adam_beta2", optimizer.beta2),
      REAL_FIELD("adam_eps", optimizer.eps),
      REAL_FIELD("weight_decay", optimizer.weight_decay),
      COUNT_FIELD("classes_per_batch", classes_per_batch),
      COUNT_FIELD("samples_per_class_batch", samples_per_class_batch),
      COUNT_FIELD("iterations", iterations),
      COUNT_FIELD("eval_every", eval_every),
      COUNT_FIELD("seed", seed),
      PATH_FIELD("output_dir", output_dir),
      {"mode",
       {[](RunConfig& c, const json& v, const std::string& k) { c.mode = as_enum(v, k, parse_run_mode); },
        [](const RunConfig& c) { return json(to_string(c.mode)); }}},
      PATH_FIELD("teacher_checkpoint", teacher_checkpoint),
  };
  return table;
}

#undef COUNT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef PATH_FIELD

void set_field(RunConfig& config, const std::string& key, const json& value) {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key, "unknown config key '" + key + "'");
  it->second.set(config, value, key);
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, "config key '" + key + "': " + what);
}

}  // namespace

void RunConfig::validate() const {
  if (!uses_feature_files()) {
    try {
      synthetic.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("synthetic", std::string("synthetic data: ") + e.what());
    }
  } else {
    require(!test_features.empty(), "test_features", "required when train_features is set");
  }
  require(train_features.empty() == test_features.empty(), "train_features",
          "train_features and test_features must be set together");
  require(base_dim > 0, "base_dim", "must be positive");
  require(base_depth >= 1 && base_depth <= 3, "base_depth", "must be 1, 2 or 3");
  require(target_depth >= 1 && target_depth <= 3, "target_depth", "must be 1, 2 or 3");
  require(distill.gamma >= 0.0, "gamma", "must be >= 0");
  require(distill.temperature > 0.0, "temperature", "must be > 0");
  if (mode == RunMode::s2sd) {
    require(!distill.target_dims.empty(), "target_dims", "must not be empty");
    std::size_t prev = base_dim;
    for (auto d : distill.target_dims) {
      require(d > prev, "target_dims", "must be strictly ascending and above base_dim");
      prev = d;
    }
    require(distill.topology != Topology::dual || distill.target_dims.size() == 1, "topology",
            "dual takes exactly one target dim");
  }
  require(dml.multisimilarity.alpha > 0.0, "ms_alpha", "must be > 0");
  require(dml.multisimilarity.beta > 0.0, "ms_beta", "must be > 0");
  require(dml.margin_beta0 > 0.0, "margin_beta0", "must be > 0");
  require(dml.sampling.lower_cutoff < dml.sampling.upper_cutoff, "sampling_upper_cutoff",
          "must exceed sampling_lower_cutoff");
  require(dml.sampling.clip >= 0.0 && dml.sampling.clip <= 1.0, "sampling_clip", "must lie in [0, 1]");
  require(!beta_lr || *beta_lr > 0.0, "beta_lr", "must be > 0");
  require(optimizer.lr > 0.0, "lr", "must be > 0");
  require(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(optimizer.eps > 0.0, "adam_eps", "must be > 0");
  require(optimizer.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(classes_per_batch >= 2, "classes_per_batch", "must be >= 2");
  require(samples_per_class_batch >= 2, "samples_per_class_batch", "must be >= 2");
  if (!uses_feature_files()) {
    require(classes_per_batch <= synthetic.n_classes_train, "classes_per_batch",
            "exceeds n_classes_train");
    require(samples_per_class_batch <= synthetic.samples_per_class, "samples_per_class_batch",
            "exceeds samples_per_class");
  }
  require(iterations >= 1, "iterations", "must be >= 1");
  require(eval_every >= 1, "eval_every", "must be >= 1");
  require(mode != RunMode::two_stage_student || !teacher_checkpoint.empty(), "teacher_checkpoint",
          "required for mode two_stage_student");
}

RunConfig parse_config(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("", "config must be a flat JSON object");
  RunConfig config;
  for (const auto& [key, value] : doc.items()) set_field(config, key, value);
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void apply_override(RunConfig& config, const std::string& key, const std::string& value) {
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  set_field(config, key, parsed);
}

std::string config_to_json(const RunConfig& config) {
  json doc = json::object();
  for (const auto& [key, field] : fields()) doc[key] = field.get(config);
  return doc.dump(2);
}

}  // namespace s2sd
