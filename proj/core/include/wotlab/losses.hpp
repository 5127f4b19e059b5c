#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "wotlab/attacks.hpp"
#include "wotlab/models.hpp"
#include "wotlab/tensor.hpp"

namespace wotlab {

enum class LossKind { At, Trades, Mart };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& s);

// CE(f(x_adv), y).
Var at_loss(Var adv_logits, std::span<const int> labels);

// CE(f(x), y) + beta * KL(f(x) || f(x_adv)), batch-averaged.
Var trades_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, float beta);

// Per-row log(1 - max_{c != y} softmax(logits)_c), via a log-sum-exp that
// leaves out the runner-up class, so it stays finite when that class saturates.
Var log_one_minus_runner_up(Var logits, std::span<const int> labels);

// Mean of -log p_y - log(1 - max_{c != y} p_c).
Var boosted_cross_entropy(Var logits, std::span<const int> labels);

// boosted_CE(f(x_adv), y) + lambda * mean(KL(f(x) || f(x_adv)) * (1 - p_y(x))).
Var mart_loss(Var clean_logits, Var adv_logits, std::span<const int> labels, float lambda);

// A training objective: the outer loss and the inner attack that feeds it.
struct Objective {
  LossKind kind = LossKind::At;
  float beta = 6.0f;
  float lambda = 5.0f;
  AttackConfig attack{};

  friend bool operator==(const Objective&, const Objective&) = default;
};

// TRADES ascends KL, AT and MART ascend CE.
AttackObjective inner_objective(LossKind kind);

// Adversarial examples for `objective` at the model's current weights.
Tensor generate_adversarial(const Model& model, const Tensor& x, std::span<const int> labels,
                            const Objective& objective, std::uint64_t seed);

// Records the objective on `tape` given parameter leaves and fixed inputs.
Var objective_on_tape(const Model& model, std::span<const Var> params, Tape& tape, const Tensor& x,
                      const Tensor& x_adv, std::span<const int> labels, const Objective& objective);

struct LossAndGradient {
  double loss = 0.0;
  ParamVector gradient;
};

// Loss and weight gradient at fixed (x, x_adv).
LossAndGradient objective_gradient(const Model& model, const Tensor& x, const Tensor& x_adv,
                                   std::span<const int> labels, const Objective& objective);

double objective_value(const Model& model, const Tensor& x, const Tensor& x_adv, std::span<const int> labels,
                       const Objective& objective);

}  // namespace wotlab
