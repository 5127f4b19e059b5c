#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wotlab/data.hpp"
#include "wotlab/models.hpp"

namespace wotlab {

enum class Norm { Linf, L2 };

std::string to_string(Norm norm);
Norm parse_norm(const std::string& s);

// Perturbation budget and schedule, in input units ([0, 1] pixels).
struct AttackConfig {
  Norm norm = Norm::Linf;
  float epsilon = 8.0f / 255.0f;
  std::size_t steps = 10;
  float step_size = 2.0f / 255.0f;
  bool random_start = true;

  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

// epsilon >= 0 (0 means "no attack"), steps >= 1, step_size > 0.
void validate(const AttackConfig& cfg);

// Single signed step of length epsilon, no random start.
AttackConfig fgsm_config(float epsilon);
// `steps` iterations of length epsilon / 4.
AttackConfig pgd_config(float epsilon, std::size_t steps, bool random_start = true, Norm norm = Norm::Linf);

// What the attack ascends.
enum class AttackObjective {
  CrossEntropy,  // CE(f(x_adv), y)
  KlFromClean,   // KL(f(x) || f(x_adv)), as in TRADES
};

// Gradient of the per-sample (not batch-averaged) objective w.r.t. the input.
Tensor input_gradient(const Model& model, const Tensor& x, std::span<const int> labels,
                      AttackObjective objective = AttackObjective::CrossEntropy,
                      const Tensor* clean_logits = nullptr);

// clip01(x + epsilon * sign(grad_x CE)).
Tensor fgsm(const Model& model, const Tensor& x, std::span<const int> labels, float epsilon);

// Projected gradient ascent; a pure function of (weights, x, labels, cfg, seed).
Tensor pgd(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
           std::uint64_t seed, AttackObjective objective = AttackObjective::CrossEntropy);

// Mean CE of the model on (x, labels).
double cross_entropy(const Model& model, const Tensor& x, std::span<const int> labels);

// Per-row argmax == label count.
std::size_t count_correct(const Tensor& logits, std::span<const int> labels);

double clean_accuracy(const Model& model, const Dataset& data, std::size_t batch_size = 256);

// Every sample is attacked; misclassified clean samples count as failures.
// Batch b uses attack seed derive_key(seed, b).
double robust_accuracy(const Model& model, const Dataset& data, const AttackConfig& cfg, std::uint64_t seed,
                       std::size_t batch_size = 256);

// Square grid of losses on a 2-D slice; cell (i, j) sits at offsets
// (offset(i), offset(j)) along the first and second direction.
struct LossGrid {
  std::size_t n = 0;
  double radius = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> loss;  // row-major n x n

  double at(std::size_t i, std::size_t j) const { return loss[i * n + j]; }
  double offset(std::size_t i) const;
};

// Offsets for grid index i of an n-point grid spanning [-radius, radius].
// The middle index of an odd grid maps to exactly 0.
double grid_offset(std::size_t i, std::size_t n, double radius);

// Loss of x + a * sign(grad_x CE) + b * r, with r a Rademacher direction
// drawn from `seed`. No clipping, so the slice is a plane in input space.
LossGrid input_landscape(const Model& model, const Tensor& x, std::span<const int> labels, double radius,
                         std::size_t grid_n, std::uint64_t seed);

struct WeightDirections {
  ParamVector first;
  ParamVector second;
};

// Two Gaussian directions; every layout entry rescaled to the L2 norm of the
// matching weight tensor (entries with zero weight norm get a zero direction).
WeightDirections weight_directions(const ParamVector& weights, std::uint64_t seed);

// Mean CE at PGD examples regenerated for the given weights.
double adversarial_loss(const Model& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                        std::uint64_t attack_seed);

// Adversarial loss over w + a * d1 + b * d2 with directions from `seed`; the
// attack is rerun per cell with the same `attack_seed`.
LossGrid weight_landscape(const Model& model, const Tensor& x, std::span<const int> labels, double radius,
                          std::size_t grid_n, std::uint64_t seed, const AttackConfig& attack,
                          std::uint64_t attack_seed);

// Header "# radius=<r>,seed=<s>,n=<n>" then n rows of n comma-separated values.
void write_landscape_csv(const LossGrid& grid, const std::filesystem::path& path);

}  // namespace wotlab
