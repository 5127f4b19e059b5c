#include "wotlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"

namespace wotlab {

std::string to_string(Norm norm) { return norm == Norm::Linf ? "linf" : "l2"; }

Norm parse_norm(const std::string& s) {
  if (s == "linf" || s == "Linf" || s == "inf") return Norm::Linf;
  if (s == "l2" || s == "L2") return Norm::L2;
  throw ConfigError("attack norm: expected 'linf' or 'l2', got '" + s + "'");
}

void validate(const AttackConfig& cfg) {
  if (!(cfg.epsilon >= 0.0f) || !std::isfinite(cfg.epsilon)) throw ConfigError("attack epsilon must be >= 0");
  if (cfg.steps < 1) throw ConfigError("attack steps must be >= 1");
  if (!(cfg.step_size > 0.0f)) throw ConfigError("attack step_size must be > 0");
}

AttackConfig fgsm_config(float epsilon) {
  return AttackConfig{Norm::Linf, epsilon, 1, epsilon > 0.0f ? epsilon : 1.0f, false};
}

AttackConfig pgd_config(float epsilon, std::size_t steps, bool random_start, Norm norm) {
  return AttackConfig{norm, epsilon, steps, epsilon > 0.0f ? epsilon / 4.0f : 1.0f, random_start};
}

namespace {

std::vector<Var> bind_constants(const Model& model, Tape& tape) {
  const auto& params = model.params();
  std::vector<Var> vars;
  vars.reserve(params.layout().size());
  for (std::size_t i = 0; i < params.layout().size(); ++i) vars.push_back(tape.constant(params.tensor(i)));
  return vars;
}

std::size_t batch_rows(const Tensor& x) {
  if (x.rank() < 2 || x.dim(0) == 0) throw DimensionError("attack input must be a non-empty batch, got " + shape_str(x.shape()));
  return x.dim(0);
}

void clip01(Tensor& x) {
  for (auto& v : x.data()) v = std::clamp(v, 0.0f, 1.0f);
}

// Projects x_adv onto the epsilon ball around x, then onto [0, 1].
// o + delta rounded to float can land a fraction of an ulp outside the ball;
// step back toward o until the exact difference is within eps.
float within_linf(float o, float v, float eps) {
  while (std::abs(static_cast<double>(v) - static_cast<double>(o)) > static_cast<double>(eps)) v = std::nextafter(v, o);
  return v;
}

void project(Tensor& x_adv, const Tensor& x, const AttackConfig& cfg) {
  const std::size_t n = x.dim(0), d = x.size() / n;
  auto a = x_adv.data();
  auto o = x.data();
  if (cfg.norm == Norm::Linf) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (std::abs(static_cast<double>(a[i]) - o[i]) <= cfg.epsilon) continue;
      const float delta = std::clamp(a[i] - o[i], -cfg.epsilon, cfg.epsilon);
      a[i] = within_linf(o[i], o[i] + delta, cfg.epsilon);
    }
  } else {
    auto norm_of = [&](std::size_t s) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double delta = static_cast<double>(a[s * d + k]) - o[s * d + k];
        sq += delta * delta;
      }
      return std::sqrt(sq);
    };
    for (std::size_t s = 0; s < n; ++s) {
      double shrink = 1.0 - 1e-6;
      for (double norm = norm_of(s); norm > cfg.epsilon; norm = norm_of(s)) {
        const double factor = cfg.epsilon / norm * shrink;
        for (std::size_t k = 0; k < d; ++k) {
          const double delta = static_cast<double>(a[s * d + k]) - o[s * d + k];
          a[s * d + k] = static_cast<float>(o[s * d + k] + delta * factor);
        }
        shrink *= shrink;
      }
    }
  }
  clip01(x_adv);
}

void random_start(Tensor& x_adv, const AttackConfig& cfg, CounterRng& rng) {
  const std::size_t n = x_adv.dim(0), d = x_adv.size() / n;
  auto a = x_adv.data();
  if (cfg.norm == Norm::Linf) {
    for (auto& v : a) v += static_cast<float>(rng.uniform(-cfg.epsilon, cfg.epsilon));
    return;
  }
  // Uniform in the L2 ball: Gaussian direction, radius eps * u^(1/d).
  std::vector<double> dir(d);
  for (std::size_t s = 0; s < n; ++s) {
    double sq = 0.0;
    for (auto& v : dir) {
      v = rng.normal();
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) continue;
    const double radius = cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
    for (std::size_t k = 0; k < d; ++k) a[s * d + k] += static_cast<float>(dir[k] / norm * radius);
  }
}

}  // namespace

Tensor input_gradient(const Model& model, const Tensor& x, std::span<const int> labels, AttackObjective objective,
                      const Tensor* clean_logits) {
  const std::size_t n = batch_rows(x);
  Tape tape;
  const auto params = bind_constants(model, tape);
  Var input = tape.parameter(x);
  Var logits = model.forward(params, input);
  Var loss;
  if (objective == AttackObjective::CrossEntropy) {
    loss = ops::softmax_cross_entropy(logits, labels);
  } else {
    if (clean_logits == nullptr) throw ContractError("KL attack objective needs clean logits");
    loss = ops::kl_divergence(tape.constant(*clean_logits), logits);
  }
  // Undo the batch mean so each row carries its own sample's gradient.
  loss = ops::scale(loss, static_cast<float>(n));
  tape.backward(loss);
  return tape.gradient(input);
}

Tensor fgsm(const Model& model, const Tensor& x, std::span<const int> labels, float epsilon) {
  Tensor x_adv = x;
  if (epsilon == 0.0f) return x_adv;
  const Tensor g = input_gradient(model, x, labels);
  for (std::size_t i = 0; i < x_adv.size(); ++i) {
    const float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
    x_adv[i] = std::clamp(within_linf(x[i], x[i] + epsilon * s, epsilon), 0.0f, 1.0f);
  }
  return x_adv;
}

Tensor pgd(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
           std::uint64_t seed, AttackObjective objective) {
  validate(cfg);
  const std::size_t n = batch_rows(x), d = x.size() / n;
  Tensor x_adv = x;
  if (cfg.epsilon == 0.0f) return x_adv;

  Tensor clean_logits;
  if (objective == AttackObjective::KlFromClean) clean_logits = model.logits(x);

  CounterRng rng(derive_key(seed, 0xa77ac));
  if (cfg.random_start) {
    random_start(x_adv, cfg, rng);
    project(x_adv, x, cfg);
  }
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Tensor g = input_gradient(model, x_adv, labels, objective, &clean_logits);
    auto a = x_adv.data();
    if (cfg.norm == Norm::Linf) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        const float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
        a[i] += cfg.step_size * s;
      }
    } else {
      for (std::size_t s = 0; s < n; ++s) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += static_cast<double>(g[s * d + k]) * g[s * d + k];
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) continue;
        for (std::size_t k = 0; k < d; ++k) {
          a[s * d + k] += static_cast<float>(cfg.step_size * g[s * d + k] / norm);
        }
      }
    }
    project(x_adv, x, cfg);
  }
  return x_adv;
}

double cross_entropy(const Model& model, const Tensor& x, std::span<const int> labels) {
  Tape tape;
  Var logits = tape.constant(model.logits(x));
  return ops::softmax_cross_entropy(logits, labels).value()[0];
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("count_correct: label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return correct;
}

double clean_accuracy(const Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ContractError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    correct += count_correct(model.logits(data.range(b, e)), data.range_labels(b, e));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double robust_accuracy(const Model& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       std::size_t batch_size) {
  if (data.empty()) throw ContractError("robust accuracy of an empty dataset");
  std::size_t correct = 0;
  for (std::size_t b = 0, idx = 0; b < data.size(); b += batch_size, ++idx) {
    const std::size_t e = std::min(data.size(), b + batch_size);
    const Tensor x = data.range(b, e);
    const auto y = data.range_labels(b, e);
    const Tensor x_adv = pgd(model, x, y, cfg, derive_key(seed, idx));
    correct += count_correct(model.logits(x_adv), y);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double grid_offset(std::size_t i, std::size_t n, double radius) {
  if (n <= 1) return 0.0;
  const double span = static_cast<double>(n - 1);
  return radius * (2.0 * static_cast<double>(i) - span) / span;
}

double LossGrid::offset(std::size_t i) const { return grid_offset(i, n, radius); }

LossGrid input_landscape(const Model& model, const Tensor& x, std::span<const int> labels, double radius,
                         std::size_t grid_n, std::uint64_t seed) {
  if (grid_n % 2 == 0) throw ContractError("landscape grid size must be odd");
  const Tensor g = input_gradient(model, x, labels);
  std::vector<float> r1(x.size()), r2(x.size());
  CounterRng rng(derive_key(seed, 0x1a9d));
  for (std::size_t i = 0; i < x.size(); ++i) {
    r1[i] = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
    r2[i] = rng.coin() ? 1.0f : -1.0f;
  }
  LossGrid grid{grid_n, radius, seed, std::vector<double>(grid_n * grid_n)};
  for (std::size_t i = 0; i < grid_n; ++i) {
    const float a = static_cast<float>(grid.offset(i));
    for (std::size_t j = 0; j < grid_n; ++j) {
      const float b = static_cast<float>(grid.offset(j));
      Tensor probe = x;
      for (std::size_t k = 0; k < probe.size(); ++k) probe[k] = x[k] + a * r1[k] + b * r2[k];
      grid.loss[i * grid_n + j] = cross_entropy(model, probe, labels);
    }
  }
  return grid;
}

WeightDirections weight_directions(const ParamVector& weights, std::uint64_t seed) {
  WeightDirections dirs{ParamVector(weights.layout()), ParamVector(weights.layout())};
  CounterRng rng(derive_key(seed, 0xd1e5));
  for (ParamVector* dir : {&dirs.first, &dirs.second}) {
    for (std::size_t e = 0; e < weights.layout().size(); ++e) {
      auto d = dir->slice(e);
      double dn = 0.0, wn = 0.0;
      for (auto& v : d) {
        v = static_cast<float>(rng.normal());
        dn += static_cast<double>(v) * v;
      }
      for (float w : weights.slice(e)) wn += static_cast<double>(w) * w;
      dn = std::sqrt(dn);
      wn = std::sqrt(wn);
      const double factor = dn > 0.0 ? wn / dn : 0.0;
      for (auto& v : d) v = static_cast<float>(v * factor);
    }
  }
  return dirs;
}

double adversarial_loss(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                        std::uint64_t attack_seed) {
  return cross_entropy(model, pgd(model, x, labels, cfg, attack_seed), labels);
}

LossGrid weight_landscape(const Model& model, const Tensor& x, std::span<const int> labels, double radius,
                          std::size_t grid_n, std::uint64_t seed, const AttackConfig& attack,
                          std::uint64_t attack_seed) {
  if (grid_n % 2 == 0) throw ContractError("landscape grid size must be odd");
  const auto dirs = weight_directions(model.params(), seed);
  LossGrid grid{grid_n, radius, seed, std::vector<double>(grid_n * grid_n)};
  Model probe = model;
  for (std::size_t i = 0; i < grid_n; ++i) {
    const float a = static_cast<float>(grid.offset(i));
    for (std::size_t j = 0; j < grid_n; ++j) {
      const float b = static_cast<float>(grid.offset(j));
      ParamVector w = model.params();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] = w[k] + a * dirs.first[k] + b * dirs.second[k];
      probe.set_params(std::move(w));
      grid.loss[i * grid_n + j] = adversarial_loss(probe, x, labels, attack, attack_seed);
    }
  }
  return grid;
}

void write_landscape_csv(const LossGrid& grid, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "# radius=" << std::setprecision(17) << grid.radius << ",seed=" << grid.seed << ",n=" << grid.n << '\n';
  for (std::size_t i = 0; i < grid.n; ++i) {
    for (std::size_t j = 0; j < grid.n; ++j) {
      if (j) out << ',';
      out << grid.at(i, j);
    }
    out << '\n';
  }
}

}  // namespace wotlab
