#include "wotlab/losses.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "wotlab/errors.hpp"

namespace wotlab {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::At: return "at";
    case LossKind::Trades: return "trades";
    case LossKind::Mart: return "mart";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "at") return LossKind::At;
  if (s == "trades") return LossKind::Trades;
  if (s == "mart") return LossKind::Mart;
  throw ConfigError("loss.kind: expected 'at', 'trades' or 'mart', got '" + s + "'");
}

Var at_loss(Var adv_logits, std::span<const int> labels) { return ops::softmax_cross_entropy(adv_logits, labels); }

Var trades_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, float beta) {
  if (beta < 0.0f) throw ConfigError("trades beta must be >= 0");
  Var ce = ops::softmax_cross_entropy(clean_logits, labels);
  return ops::add(ce, ops::scale(ops::kl_divergence(clean_logits, adv_logits), beta));
}

Var log_one_minus_runner_up(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("log_one_minus_runner_up: expected N x C logits");
  const std::size_t n = z.dim(0), c = z.dim(1);
  if (labels.size() != n) throw DimensionError("log_one_minus_runner_up: label count mismatch");
  std::vector<std::size_t> runner(n);
  std::vector<double> lse_all(n), lse_rest(n);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = z.data().data() + i * c;
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw IndexError("label " + std::to_string(y) + " out of range");
    std::size_t r = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < c; ++j)
      if (static_cast<int>(j) != y && row[j] > row[r]) r = j;
    runner[i] = r;
    double mx = -std::numeric_limits<double>::infinity(), mx_rest = mx;
    for (std::size_t j = 0; j < c; ++j) {
      mx = std::max(mx, static_cast<double>(row[j]));
      if (j != r) mx_rest = std::max(mx_rest, static_cast<double>(row[j]));
    }
    double s = 0.0, s_rest = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      s += std::exp(row[j] - mx);
      if (j != r) s_rest += std::exp(row[j] - mx_rest);
    }
    lse_all[i] = mx + std::log(s);
    lse_rest[i] = mx_rest + std::log(s_rest);
    out[i] = static_cast<float>(lse_rest[i] - lse_all[i]);
  }
  return logits.tape->record(
      std::move(out), {logits},
      [logits, n, c, runner = std::move(runner), lse_all = std::move(lse_all), lse_rest = std::move(lse_rest)](
          std::span<const float> g, Tape& t) {
        auto gz = t.grad_buffer(logits);
        const auto z = t.value(logits).data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            const double zj = z[i * c + j];
            double d = -std::exp(zj - lse_all[i]);
            if (j != runner[i]) d += std::exp(zj - lse_rest[i]);
            gz[i * c + j] += static_cast<float>(g[i] * d);
          }
        }
      });
}

Var boosted_cross_entropy(Var logits, std::span<const int> labels) {
  Var ce = ops::softmax_cross_entropy(logits, labels);
  return ops::sub(ce, ops::mean(log_one_minus_runner_up(logits, labels)));
}

Var mart_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, float lambda) {
  if (lambda < 0.0f) throw ConfigError("mart lambda must be >= 0");
  Var bce = boosted_cross_entropy(adv_logits, labels);
  Var kl = ops::kl_divergence_rows(clean_logits, adv_logits);
  Var true_prob = ops::pick(ops::softmax(clean_logits), labels);
  Var weighted = ops::mul(kl, ops::affine(true_prob, -1.0f, 1.0f));
  return ops::add(bce, ops::scale(ops::mean(weighted), lambda));
}

AttackObjective inner_objective(LossKind kind) {
  return kind == LossKind::Trades ? AttackObjective::KlFromClean : AttackObjective::CrossEntropy;
}

Tensor generate_adversarial(const Model& model, const Tensor& x, std::span<const int> labels,
                            const Objective& objective, std::uint64_t seed) {
  return pgd(model, x, labels, objective.attack, seed, inner_objective(objective.kind));
}

Var objective_on_tape(const Model& model, std::span<const Var> params, Tape& tape, const Tensor& x,
                      const Tensor& x_adv, std::span<const int> labels, const Objective& objective) {
  Var adv_logits = model.forward(params, tape.constant(x_adv));
  switch (objective.kind) {
    case LossKind::At: return at_loss(adv_logits, labels);
    case LossKind::Trades:
      return trades_loss(model.forward(params, tape.constant(x)), adv_logits, labels, objective.beta);
    case LossKind::Mart:
      return mart_loss(model.forward(params, tape.constant(x)), adv_logits, labels, objective.lambda);
  }
  throw ContractError("unknown loss kind");
}

LossAndGradient objective_gradient(const Model& model, const Tensor& x, const Tensor& x_adv,
                                   std::span<const int> labels, const Objective& objective) {
  Tape tape;
  const auto params = model.bind(tape);
  Var loss = objective_on_tape(model, params, tape, x, x_adv, labels, objective);
  const double value = loss.value()[0];
  tape.backward(loss);
  return LossAndGradient{value, model.gather_gradient(tape, params)};
}

double objective_value(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                       const Objective& objective) {
  Tape tape;
  std::vector<Var> params;
  for (std::size_t i = 0; i < model.params().layout().size(); ++i) {
    params.push_back(tape.constant(model.params().tensor(i)));
  }
  return objective_on_tape(model, params, tape, x, x_adv, labels, objective).value()[0];
}

}  // namespace wotlab
