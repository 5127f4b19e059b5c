#include "wotlab/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wotlab/errors.hpp"

namespace wotlab {

using json = nlohmann::ordered_json;

std::string to_string(DatasetFormat format) {
  switch (format) {
    case DatasetFormat::Idx: return "idx";
    case DatasetFormat::Cifar: return "cifar";
    case DatasetFormat::Blobs: return "blobs";
  }
  return "?";
}

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::None: return "none";
    case BaselineKind::Swa: return "swa";
    case BaselineKind::Ema: return "ema";
  }
  return "?";
}

namespace {

DatasetFormat parse_format(const std::string& s, const std::string& path) {
  if (s == "idx") return DatasetFormat::Idx;
  if (s == "cifar") return DatasetFormat::Cifar;
  if (s == "blobs") return DatasetFormat::Blobs;
  throw ConfigError(path + ": expected 'idx', 'cifar' or 'blobs', got '" + s + "'");
}

BaselineKind parse_baseline(const std::string& s, const std::string& path) {
  if (s == "none") return BaselineKind::None;
  if (s == "swa") return BaselineKind::Swa;
  if (s == "ema") return BaselineKind::Ema;
  throw ConfigError(path + ": expected 'none', 'swa' or 'ema', got '" + s + "'");
}

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end() || it->is_null()) return nullptr;
    return &*it;
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) mismatch(key, "a boolean");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = as_count(*v, key_path(key));
  }

  void read(const std::string& key, std::optional<std::size_t>& out) {
    if (const json* v = find(key)) out = as_count(*v, key_path(key));
  }

  void read(const std::string& key, double& out) {
    if (const json* v = find(key)) out = as_number(*v, key_path(key));
  }

  void read(const std::string& key, float& out) {
    if (const json* v = find(key)) out = static_cast<float>(as_number(*v, key_path(key)));
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) mismatch(key, "a string");
      out = v->get<std::string>();
    }
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) mismatch(key, "an array of non-negative integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_count((*v)[i], key_path(key) + "[" + std::to_string(i) + "]"));
    }
  }

  void read(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) mismatch(key, "an array of numbers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_number((*v)[i], key_path(key) + "[" + std::to_string(i) + "]"));
    }
  }

  void read(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) mismatch(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) mismatch(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }

  template <class Fn>
  void read_enum(const std::string& key, Fn&& assign) {
    std::string s;
    read(key, s);
    if (node_.contains(key) && !node_.at(key).is_null()) assign(s, key_path(key));
  }

  // Child object; absent or null children read as empty objects.
  template <class Fn>
  void child(const std::string& key, Fn&& fn) {
    static const json empty = json::object();
    const json* v = find(key);
    Section sub(v ? *v : empty, key_path(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, _] : node_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + key_path(k) + "'");
    }
  }

  static std::size_t as_count(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) throw ConfigError(path + ": expected a non-negative integer");
      return static_cast<std::size_t>(v.get<std::int64_t>());
    }
    throw ConfigError(path + ": expected a non-negative integer, got " + std::string(v.type_name()));
  }

  // Numbers, or strings of the form "a/b" for pixel-unit budgets like "8/255".
  static double as_number(const json& v, const std::string& path) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      const std::string s = v.get<std::string>();
      const auto slash = s.find('/');
      try {
        std::size_t used = 0;
        if (slash == std::string::npos) {
          const double x = std::stod(s, &used);
          if (used == s.size()) return x;
        } else {
          const std::string a = s.substr(0, slash), b = s.substr(slash + 1);
          std::size_t ua = 0, ub = 0;
          const double num = std::stod(a, &ua), den = std::stod(b, &ub);
          if (ua == a.size() && ub == b.size() && den != 0.0) return num / den;
        }
      } catch (const std::exception&) {
      }
      throw ConfigError(path + ": cannot read '" + s + "' as a number");
    }
    throw ConfigError(path + ": expected a number, got " + std::string(v.type_name()));
  }

 private:
  [[noreturn]] void mismatch(const std::string& key, const std::string& expected) const {
    throw ConfigError(key_path(key) + ": expected " + expected);
  }
  std::string where() const { return path_.empty() ? "config root" : path_; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_attack(Section& s, AttackConfig& a) {
  s.read_enum("norm", [&](const std::string& v, const std::string& path) {
    try {
      a.norm = parse_norm(v);
    } catch (const Error&) {
      throw ConfigError(path + ": expected 'linf' or 'l2', got '" + v + "'");
    }
  });
  s.read("epsilon", a.epsilon);
  s.read("steps", a.steps);
  s.read("step_size", a.step_size);
  s.read("random_start", a.random_start);
}

json attack_json(const AttackConfig& a) {
  return json{{"norm", to_string(a.norm)},
              {"epsilon", a.epsilon},
              {"steps", a.steps},
              {"step_size", a.step_size},
              {"random_start", a.random_start}};
}

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

void read_root(Section& root, TrainConfig& c) {
  root.read("seed", c.seed);
  root.read("epochs", c.epochs);
  root.read("batch_size", c.batch_size);
  root.read("output_dir", c.output_dir);

  root.child("dataset", [&](Section& s) {
    auto& d = c.dataset;
    s.read("name", d.name);
    s.read_enum("format", [&](const std::string& v, const std::string& p) { d.format = parse_format(v, p); });
    s.read("train_images", d.train_images);
    s.read("train_labels", d.train_labels);
    s.read("test_images", d.test_images);
    s.read("test_labels", d.test_labels);
    s.read("train_files", d.train_files);
    s.read("test_files", d.test_files);
    s.read("blobs_per_class", d.blobs_per_class);
    s.read("blobs_classes", d.blobs_classes);
    s.read("blobs_shape", d.blobs_shape);
    s.read("blobs_spread", d.blobs_spread);
    s.read("train_subset", d.train_subset);
    s.read("validation_size", d.validation_size);
    s.read("test_subset", d.test_subset);
    s.child("split", [&](Section& sp) {
      sp.read("holdout_size", d.split.holdout_size);
      sp.read("seed", d.split.seed);
      sp.read_enum("source", [&](const std::string& v, const std::string& p) {
        if (v != "unseen" && v != "seen") throw ConfigError(p + ": expected 'unseen' or 'seen', got '" + v + "'");
        d.split.source = parse_holdout_source(v);
      });
    });
  });

  root.child("model", [&](Section& s) {
    auto& m = c.model;
    s.read_enum("kind", [&](const std::string& v, const std::string& p) {
      if (v != "mlp" && v != "cnn") throw ConfigError(p + ": expected 'mlp' or 'cnn', got '" + v + "'");
      m.kind = parse_model_kind(v);
    });
    s.read("hidden", m.hidden);
    s.read("channels", m.channels);
    s.read("input_shape", m.input_shape);
    s.read("classes", m.classes);
  });

  root.child("loss", [&](Section& s) {
    s.read_enum("kind", [&](const std::string& v, const std::string&) { c.loss.kind = parse_loss_kind(v); });
    s.read("beta", c.loss.beta);
    s.read("lambda", c.loss.lambda);
    s.child("attack", [&](Section& a) { read_attack(a, c.loss.attack); });
  });

  root.child("optimizer", [&](Section& s) {
    auto& o = c.optimizer;
    s.read("lr", o.lr);
    s.read("momentum", o.momentum);
    s.read("weight_decay", o.weight_decay);
    s.read("decay_at", o.decay_at);
    s.read("decay_factor", o.decay_factor);
  });

  root.child("wot", [&](Section& s) {
    auto& w = c.wot;
    s.read("enabled", w.enabled);
    s.read_enum("mode", [&](const std::string& v, const std::string& p) {
      try {
        w.mode = parse_wot_mode(v);
      } catch (const Error&) {
        throw ConfigError(p + ": expected 'w' or 'b', got '" + v + "'");
      }
    });
    s.read("m", w.m);
    s.read("k", w.k);
    s.read("start_epoch", w.start_epoch);
    s.read("alpha_lr", w.alpha_lr);
    s.read("alpha_gamma", w.alpha_gamma);
    s.read("alpha_steps", w.alpha_steps);
    s.read("holdout_batch_size", w.holdout_batch_size);
    s.child("holdout_attack", [&](Section& a) { read_attack(a, w.holdout_attack); });
    s.read("regenerate_per_step", w.regenerate_per_step);
    s.read("reset_momentum_on_refine", w.reset_momentum_on_refine);
  });

  root.child("baseline", [&](Section& s) {
    auto& b = c.baseline;
    s.read_enum("kind", [&](const std::string& v, const std::string& p) { b.kind = parse_baseline(v, p); });
    s.read("ema_decay", b.ema_decay);
    s.read("swa_start_epoch", b.swa_start_epoch);
  });

  root.child("eval", [&](Section& s) {
    auto& e = c.eval;
    s.child("validation_attack", [&](Section& a) { read_attack(a, e.validation_attack); });
    if (const json* list = s.find("attacks")) {
      if (!list->is_array()) throw ConfigError(s.key_path("attacks") + ": expected an array of attack objects");
      e.attacks.clear();
      for (std::size_t i = 0; i < list->size(); ++i) {
        AttackConfig a{};
        Section entry((*list)[i], s.key_path("attacks") + "[" + std::to_string(i) + "]");
        read_attack(entry, a);
        entry.finish();
        e.attacks.push_back(a);
      }
    }
    s.read("per_epoch_test", e.per_epoch_test);
    s.read("train_eval_size", e.train_eval_size);
    s.read("batch_size", e.batch_size);
  });
}

json to_json(const TrainConfig& c) {
  const auto& d = c.dataset;
  const auto& w = c.wot;
  json attacks = json::array();
  for (const auto& a : c.eval.attacks) attacks.push_back(attack_json(a));
  return json{
      {"seed", c.seed},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"name", d.name},
        {"format", to_string(d.format)},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels},
        {"train_files", d.train_files},
        {"test_files", d.test_files},
        {"blobs_per_class", d.blobs_per_class},
        {"blobs_classes", d.blobs_classes},
        {"blobs_shape", d.blobs_shape},
        {"blobs_spread", d.blobs_spread},
        {"train_subset", d.train_subset},
        {"validation_size", d.validation_size},
        {"test_subset", d.test_subset},
        {"split",
         {{"holdout_size", d.split.holdout_size},
          {"seed", d.split.seed},
          {"source", to_string(d.split.source)}}}}},
      {"model",
       {{"kind", to_string(c.model.kind)},
        {"hidden", c.model.hidden},
        {"channels", c.model.channels},
        {"input_shape", c.model.input_shape},
        {"classes", c.model.classes}}},
      {"loss",
       {{"kind", to_string(c.loss.kind)},
        {"beta", c.loss.beta},
        {"lambda", c.loss.lambda},
        {"attack", attack_json(c.loss.attack)}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"momentum", c.optimizer.momentum},
        {"weight_decay", c.optimizer.weight_decay},
        {"decay_at", c.optimizer.decay_at},
        {"decay_factor", c.optimizer.decay_factor}}},
      {"wot",
       {{"enabled", w.enabled},
        {"mode", w.mode == WotMode::Whole ? "w" : "b"},
        {"m", w.m},
        {"k", w.k},
        {"start_epoch", optional_json(w.start_epoch)},
        {"alpha_lr", w.alpha_lr},
        {"alpha_gamma", w.alpha_gamma},
        {"alpha_steps", w.alpha_steps},
        {"holdout_batch_size", w.holdout_batch_size},
        {"holdout_attack", attack_json(w.holdout_attack)},
        {"regenerate_per_step", w.regenerate_per_step},
        {"reset_momentum_on_refine", w.reset_momentum_on_refine}}},
      {"baseline",
       {{"kind", to_string(c.baseline.kind)},
        {"ema_decay", c.baseline.ema_decay},
        {"swa_start_epoch", optional_json(c.baseline.swa_start_epoch)}}},
      {"eval",
       {{"validation_attack", attack_json(c.eval.validation_attack)},
        {"attacks", attacks},
        {"per_epoch_test", c.eval.per_epoch_test},
        {"train_eval_size", c.eval.train_eval_size},
        {"batch_size", c.eval.batch_size}}},
  };
}

void check_attack(const AttackConfig& a, const std::string& path) {
  try {
    validate(a);
  } catch (const Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  Section s(root, "");
  read_root(s, c);
  s.finish();
  validate(c);
  return c;
}

TrainConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const TrainConfig& config) { return to_json(config).dump(2) + "\n"; }

std::size_t first_decay_epoch(const TrainConfig& config) {
  if (config.optimizer.decay_at.empty()) return config.epochs;
  double first = config.optimizer.decay_at.front();
  for (double f : config.optimizer.decay_at) first = std::min(first, f);
  return static_cast<std::size_t>(std::floor(first * static_cast<double>(config.epochs)));
}

std::size_t wot_start_epoch(const TrainConfig& config) {
  return config.wot.start_epoch.value_or(first_decay_epoch(config));
}

void validate(const TrainConfig& c) {
  if (c.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (c.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  try {
    validate(c.model);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  check_attack(c.loss.attack, "loss.attack");
  check_attack(c.eval.validation_attack, "eval.validation_attack");
  for (std::size_t i = 0; i < c.eval.attacks.size(); ++i) check_attack(c.eval.attacks[i], "eval.attacks[" + std::to_string(i) + "]");
  if (c.loss.beta < 0.0f) throw ConfigError("loss.beta must be >= 0");
  if (c.loss.lambda < 0.0f) throw ConfigError("loss.lambda must be >= 0");

  const auto& o = c.optimizer;
  if (!(o.lr >= 0.0)) throw ConfigError("optimizer.lr must be >= 0");
  if (!(o.momentum >= 0.0 && o.momentum < 1.0)) throw ConfigError("optimizer.momentum must be in [0, 1)");
  if (!(o.weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay must be >= 0");
  for (double f : o.decay_at)
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("optimizer.decay_at entries must lie in [0, 1]");

  const auto& d = c.dataset;
  if (d.format == DatasetFormat::Blobs) {
    if (d.blobs_classes < 2) throw ConfigError("dataset.blobs_classes must be >= 2");
    if (d.blobs_per_class == 0) throw ConfigError("dataset.blobs_per_class must be >= 1");
    if (!(d.blobs_spread >= 0.0)) throw ConfigError("dataset.blobs_spread must be >= 0");
  }
  if (d.format == DatasetFormat::Idx &&
      (d.train_images.empty() || d.train_labels.empty() || d.test_images.empty() || d.test_labels.empty())) {
    throw ConfigError("dataset: idx format needs train_images, train_labels, test_images and test_labels");
  }
  if (d.format == DatasetFormat::Cifar && (d.train_files.empty() || d.test_files.empty())) {
    throw ConfigError("dataset: cifar format needs train_files and test_files");
  }

  const auto& w = c.wot;
  if (w.m == 0) throw ConfigError("wot.m must be >= 1");
  if (w.k == 0) throw ConfigError("wot.k must be >= 1");
  if (w.alpha_lr < 0.0) throw ConfigError("wot.alpha_lr must be >= 0");
  if (!(w.alpha_gamma >= 0.0 && w.alpha_gamma < 1.0)) throw ConfigError("wot.alpha_gamma must be in [0, 1)");
  if (w.holdout_batch_size == 0) throw ConfigError("wot.holdout_batch_size must be >= 1");
  check_attack(w.holdout_attack, "wot.holdout_attack");
  if (w.enabled) {
    if (d.split.holdout_size == 0) throw ConfigError("wot.enabled needs dataset.split.holdout_size >= 1");
    if (wot_start_epoch(c) >= c.epochs) throw ConfigError("wot start epoch must be before the last epoch");
  }

  if (c.baseline.kind == BaselineKind::Ema && !(c.baseline.ema_decay >= 0.0 && c.baseline.ema_decay < 1.0)) {
    throw ConfigError("baseline.ema_decay must be in [0, 1)");
  }
  if (c.eval.batch_size == 0) throw ConfigError("eval.batch_size must be >= 1");
}

TrainConfig with_override(const TrainConfig& config, const std::string& dotted_key, const std::string& value) {
  json root = to_json(config);
  json* node = &root;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown key '" + dotted_key + "'");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back())) throw ConfigError("unknown key '" + dotted_key + "'");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  (*node)[parts.back()] = parsed;
  return parse_config_text(root.dump());
}

}  // namespace wotlab
