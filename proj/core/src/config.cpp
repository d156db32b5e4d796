#include "gbnlab/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "gbnlab/error.hpp"

namespace gbnlab {

namespace {

[[noreturn]] void fail(const YAML::Node& node, const std::string& message) {
  const YAML::Mark mark = node.Mark();
  throw ConfigError(message, mark.line, mark.column);
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& key) {
  if (!node.IsScalar()) fail(node, key + " must be a scalar");
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    fail(node, "bad value '" + node.Scalar() + "' for " + key);
  }
}

std::uint64_t unsigned_value(const YAML::Node& node, const std::string& key) {
  const std::string text = scalar<std::string>(node, key);
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    fail(node, key + " must be a non-negative integer, got '" + text + "'");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    fail(node, key + " is out of range");
  }
}

using Handler = std::function<void(const YAML::Node&)>;

// Visits every entry of a mapping; keys without a handler are rejected.
void visit(const YAML::Node& map, const std::string& section,
           const std::map<std::string, Handler>& handlers) {
  if (!map.IsMap()) fail(map, section + " must be a mapping");
  std::set<std::string> seen;
  for (const auto& entry : map) {
    const std::string key = entry.first.as<std::string>();
    const auto it = handlers.find(key);
    if (it == handlers.end()) {
      fail(entry.first, "unknown key '" + key + "' in " + section);
    }
    if (!seen.insert(key).second) fail(entry.first, "duplicate key '" + key + "' in " + section);
    it->second(entry.second);
  }
}

template <typename Fn>
auto converted(const YAML::Node& node, const std::string& key, Fn&& fn) {
  const std::string text = scalar<std::string>(node, key);
  try {
    return fn(text);
  } catch (const UsageError& e) {
    fail(node, e.what());
  }
}

AttackSpec parse_attack(const YAML::Node& node, const std::string& section, std::string* name,
                        AttackKind* kind, int* trials, int* branch) {
  AttackSpec spec;
  bool has_norm = false, has_eps = false, has_step = false, has_iter = false;
  std::map<std::string, Handler> handlers = {
      {"norm",
       [&](const YAML::Node& n) {
         spec.norm = converted(n, "norm", parse_norm);
         has_norm = true;
       }},
      {"epsilon",
       [&](const YAML::Node& n) {
         spec.epsilon = scalar<double>(n, "epsilon");
         has_eps = true;
       }},
      {"step_size",
       [&](const YAML::Node& n) {
         spec.step_size = scalar<double>(n, "step_size");
         has_step = true;
       }},
      {"iterations",
       [&](const YAML::Node& n) {
         spec.iterations = scalar<int>(n, "iterations");
         has_iter = true;
       }},
      {"restarts", [&](const YAML::Node& n) { spec.restarts = scalar<int>(n, "restarts"); }},
      {"random_start",
       [&](const YAML::Node& n) { spec.random_start = scalar<bool>(n, "random_start"); }},
      {"decay", [&](const YAML::Node& n) { spec.decay = scalar<double>(n, "decay"); }},
  };
  if (name) {
    handlers["name"] = [&](const YAML::Node& n) { *name = scalar<std::string>(n, "name"); };
    handlers["kind"] = [&](const YAML::Node& n) {
      *kind = converted(n, "kind", parse_attack_kind);
    };
    handlers["trials"] = [&](const YAML::Node& n) { *trials = scalar<int>(n, "trials"); };
    handlers["branch"] = [&](const YAML::Node& n) { *branch = scalar<int>(n, "branch"); };
  }
  visit(node, section, handlers);
  if (!has_norm || !has_eps) fail(node, section + " needs norm and epsilon");
  const bool one_shot = kind && (*kind == AttackKind::Fgsm || *kind == AttackKind::GaussianNoise);
  if (!one_shot && (!has_step || !has_iter)) {
    fail(node, section + " needs step_size and iterations");
  }
  try {
    spec.validate();
  } catch (const UsageError& e) {
    fail(node, e.what());
  }
  return spec;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& text) {
  const std::filesystem::path p(text);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

}  // namespace

void ExperimentConfig::override_seed(std::uint64_t s) {
  seed = s;
  model.init_seed = s;
  train.seed = s;
  eval.options.seed = s;
}

ExperimentConfig parse_experiment_config(const std::string& text,
                                         const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("YAML syntax error: " + e.msg, e.mark.line, e.mark.column);
  }
  ExperimentConfig cfg;
  cfg.source_text = text;
  if (!root.IsMap()) throw ConfigError("experiment config must be a mapping", 0, 0);

  bool has_model_seed = false, has_train_seed = false, has_eval_seed = false;
  visit(root, "config", {
      {"run_id", [&](const YAML::Node& n) { cfg.run_id = scalar<std::string>(n, "run_id"); }},
      {"seed", [&](const YAML::Node& n) { cfg.seed = unsigned_value(n, "seed"); }},
      {"output_dir",
       [&](const YAML::Node& n) {
         cfg.output_dir = resolve(base_dir, scalar<std::string>(n, "output_dir"));
       }},
      {"data",
       [&](const YAML::Node& n) {
         auto path = [&](std::filesystem::path& dst, const char* key) {
           return [&dst, &base_dir, key](const YAML::Node& v) {
             dst = resolve(base_dir, scalar<std::string>(v, key));
           };
         };
         visit(n, "data", {
             {"train_images", path(cfg.data.train_images, "train_images")},
             {"train_labels", path(cfg.data.train_labels, "train_labels")},
             {"test_images", path(cfg.data.test_images, "test_images")},
             {"test_labels", path(cfg.data.test_labels, "test_labels")},
             {"train_limit",
              [&](const YAML::Node& v) { cfg.data.train_limit = unsigned_value(v, "train_limit"); }},
             {"test_limit",
              [&](const YAML::Node& v) { cfg.data.test_limit = unsigned_value(v, "test_limit"); }},
         });
       }},
      {"model",
       [&](const YAML::Node& n) {
         auto& m = cfg.model;
         auto size = [](std::size_t& dst, const char* key) {
           return [&dst, key](const YAML::Node& v) { dst = unsigned_value(v, key); };
         };
         visit(n, "model", {
             {"norm",
              [&](const YAML::Node& v) { m.norm = converted(v, "norm", parse_norm_kind); }},
             {"branches", size(m.num_branches, "branches")},
             {"conv1_channels", size(m.conv1_channels, "conv1_channels")},
             {"conv2_channels", size(m.conv2_channels, "conv2_channels")},
             {"hidden", size(m.hidden, "hidden")},
             {"gate_hidden_channels", size(m.gate_hidden_channels, "gate_hidden_channels")},
             {"fc_gate_hidden", size(m.fc_gate_hidden, "fc_gate_hidden")},
             {"bn_xi", [&](const YAML::Node& v) { m.bn.xi = scalar<double>(v, "bn_xi"); }},
             {"bn_alpha",
              [&](const YAML::Node& v) { m.bn.alpha = scalar<double>(v, "bn_alpha"); }},
             {"init_seed",
              [&](const YAML::Node& v) {
                m.init_seed = unsigned_value(v, "init_seed");
                has_model_seed = true;
              }},
         });
       }},
      {"train",
       [&](const YAML::Node& n) {
         auto& t = cfg.train;
         visit(n, "train", {
             {"defense",
              [&](const YAML::Node& v) { t.defense = converted(v, "defense", parse_defense); }},
             {"epochs", [&](const YAML::Node& v) { t.epochs = scalar<int>(v, "epochs"); }},
             {"batch_size",
              [&](const YAML::Node& v) { t.batch_size = unsigned_value(v, "batch_size"); }},
             {"learning_rate",
              [&](const YAML::Node& v) { t.learning_rate = scalar<double>(v, "learning_rate"); }},
             {"gate_learning_rate",
              [&](const YAML::Node& v) {
                t.gate_learning_rate = scalar<double>(v, "gate_learning_rate");
              }},
             {"weight_decay",
              [&](const YAML::Node& v) { t.weight_decay = scalar<double>(v, "weight_decay"); }},
             {"seed",
              [&](const YAML::Node& v) {
                t.seed = unsigned_value(v, "seed");
                has_train_seed = true;
              }},
             {"domains",
              [&](const YAML::Node& v) {
                if (!v.IsSequence()) fail(v, "train.domains must be a list");
                t.domains.clear();
                for (const auto& d : v) t.domains.push_back(scalar<int>(d, "domain"));
              }},
             {"attacks",
              [&](const YAML::Node& v) {
                if (!v.IsSequence()) fail(v, "train.attacks must be a list");
                t.attack_specs.clear();
                for (const auto& a : v) {
                  t.attack_specs.push_back(
                      parse_attack(a, "train.attacks entry", nullptr, nullptr, nullptr, nullptr));
                }
              }},
         });
       }},
      {"eval",
       [&](const YAML::Node& n) {
         auto& e = cfg.eval;
         visit(n, "eval", {
             {"gating",
              [&](const YAML::Node& v) { e.gating = converted(v, "gating", GatingMode::parse); }},
             {"batch_size",
              [&](const YAML::Node& v) {
                e.options.batch_size = unsigned_value(v, "batch_size");
              }},
             {"restarts",
              [&](const YAML::Node& v) { e.options.restarts = scalar<int>(v, "restarts"); }},
             {"gate_accuracy",
              [&](const YAML::Node& v) {
                e.options.gate_accuracy = scalar<bool>(v, "gate_accuracy");
              }},
             {"adaptive", [&](const YAML::Node& v) { e.adaptive = scalar<bool>(v, "adaptive"); }},
             {"seed",
              [&](const YAML::Node& v) {
                e.options.seed = unsigned_value(v, "seed");
                has_eval_seed = true;
              }},
             {"suite",
              [&](const YAML::Node& v) {
                if (!v.IsSequence()) fail(v, "eval.suite must be a list");
                e.suite.clear();
                for (const auto& a : v) {
                  SuiteEntry entry;
                  int branch = 0;
                  entry.spec = parse_attack(a, "eval.suite entry", &entry.name, &entry.kind,
                                            &entry.trials, &branch);
                  entry.branch = DomainLabel{branch};
                  if (entry.name.empty()) fail(a, "eval.suite entry needs a name");
                  e.suite.push_back(entry);
                }
              }},
         });
       }},
  });

  if (!has_model_seed) cfg.model.init_seed = cfg.seed;
  if (!has_train_seed) cfg.train.seed = cfg.seed;
  if (!has_eval_seed) cfg.eval.options.seed = cfg.seed;
  cfg.eval.options.domains = cfg.train.domains;
  if (cfg.eval.suite.empty()) cfg.eval.suite = standard_suite(20);
  if (cfg.train.attack_specs.empty()) cfg.train.attack_specs = scaled_attack_specs(10);
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_experiment_config(buffer.str(), path.parent_path());
}

namespace {

Dataset load_split(const std::filesystem::path& images, const std::filesystem::path& labels,
                   std::size_t limit, const char* which) {
  if (images.empty() || labels.empty()) {
    throw ConfigError(std::string("data.") + which + "_images and data." + which +
                      "_labels are required");
  }
  Dataset ds = read_idx(images, labels);
  return limit > 0 && limit < ds.size() ? ds.head(limit) : ds;
}

}  // namespace

Dataset load_train_data(const ExperimentConfig& config) {
  return load_split(config.data.train_images, config.data.train_labels, config.data.train_limit,
                    "train");
}

Dataset load_test_data(const ExperimentConfig& config) {
  return load_split(config.data.test_images, config.data.test_labels, config.data.test_limit,
                    "test");
}

}  // namespace gbnlab
