#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "wotlab/data.hpp"
#include "wotlab/losses.hpp"
#include "wotlab/models.hpp"
#include "wotlab/tensor.hpp"

namespace wotlab {

// Cached optimization trajectory: the anchor weights at the start of the
// current window and up to `capacity` deltas, one per `gap` optimizer steps.
// Invariant: anchor + sum(deltas) == last recorded weights.
class TrajectoryBuffer {
 public:
  TrajectoryBuffer(std::size_t capacity, std::size_t gap);

  // Drops all deltas and makes `weights` both the anchor and the reference
  // the next delta is measured from.
  void clear(const ParamVector& weights);

  // Appends current - reference and moves the reference to `current`. On a
  // buffer that has never been cleared the call only sets the anchor.
  void record(const ParamVector& current);

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t gap() const noexcept { return gap_; }
  std::size_t size() const noexcept { return deltas_.size(); }
  bool full() const noexcept { return deltas_.size() == capacity_; }
  bool has_anchor() const noexcept { return anchor_.has_value(); }

  const ParamVector& anchor() const;
  const ParamVector& reference() const;
  const std::vector<WeightDelta>& deltas() const noexcept { return deltas_; }

 private:
  std::size_t capacity_;
  std::size_t gap_;
  std::optional<ParamVector> anchor_;
  std::optional<ParamVector> reference_;
  std::vector<WeightDelta> deltas_;
};

// Dense k x B matrix (trajectory segment x block), row-major.
class AlphaMatrix {
 public:
  AlphaMatrix() = default;
  AlphaMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }

  double min() const;
  double max() const;
  double mean() const;
  double norm() const;

  friend bool operator==(const AlphaMatrix&, const AlphaMatrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> values_;
};

// Combination weights and their momentum buffer. Defaults: lr 0.01,
// gamma 0.9, 10 inner steps.
struct AlphaState {
  AlphaMatrix alpha;
  AlphaMatrix momentum;
  double lr = 0.01;
  double gamma = 0.9;
  std::size_t n_steps = 10;

  // Zeroes alpha and momentum with the given shape.
  void reset(std::size_t k, std::size_t blocks);
};

// Per block j: delta[q] = sum_i alpha(i, j) * deltas[i][q] for q in block j.
WeightDelta compose_delta(const TrajectoryBuffer& buffer, const AlphaMatrix& alpha, const BlockPartition& partition);

// anchor + compose_delta(...)
ParamVector recompose(const TrajectoryBuffer& buffer, const AlphaMatrix& alpha, const BlockPartition& partition);

// Chain rule through the affine recombination:
//   G(i, j) = sum_{q in block j} weight_grad[q] * deltas[i][q]
AlphaMatrix alpha_gradient(const ParamVector& weight_grad, const TrajectoryBuffer& buffer,
                           const BlockPartition& partition);

// Weight gradient of the objective at w~ = recompose(alpha), folded into alpha
// space with the identity above. `x_adv` must be generated at w~.
AlphaMatrix alpha_gradient(const Model& model, const TrajectoryBuffer& buffer, const AlphaMatrix& alpha,
                           const BlockPartition& partition, const Tensor& x, const Tensor& x_adv,
                           std::span<const int> labels, const Objective& objective);

// Same quantity by recording the recombination itself on the tape and
// differentiating with respect to alpha directly.
AlphaMatrix alpha_gradient_autodiff(const Model& model, const TrajectoryBuffer& buffer, const AlphaMatrix& alpha,
                                    const BlockPartition& partition, const Tensor& x, const Tensor& x_adv,
                                    std::span<const int> labels, const Objective& objective);

// momentum <- gamma * momentum + grad; alpha <- clamp01(alpha - lr * momentum)
void alpha_step(AlphaState& state, const AlphaMatrix& grad);

struct AlphaTraceRow {
  std::size_t round = 0;
  std::size_t step = 0;
  std::size_t block = 0;
  std::size_t gap_index = 0;
  double alpha = 0.0;
  double grad_norm = 0.0;
};

// Step count, lr and gamma come from AlphaState.
struct RefineOptions {
  std::size_t batch_size = 128;
  // Regenerate holdout adversarial examples at the current w~ every step;
  // otherwise generate once per round at the anchor.
  bool regenerate_per_step = true;
  Objective objective{};
  std::uint64_t seed = 0;
  std::size_t round = 0;
};

struct RefineResult {
  ParamVector weights;
  AlphaMatrix alpha;
  std::vector<AlphaTraceRow> trace;
  // Every intermediate alpha, one per inner step.
  std::vector<AlphaMatrix> alpha_history;
};

// One refinement round: reset alpha and momentum, take n_steps projected
// momentum steps on the holdout objective, write anchor + compose_delta(alpha)
// into the model and clear the buffer at the refined weights.
RefineResult refine(Model& model, TrajectoryBuffer& buffer, AlphaState& state, const BlockPartition& partition,
                    const Dataset& holdout, const RefineOptions& options);

// Mean objective over the whole holdout set at the model's weights, with
// adversarial examples regenerated at those weights from `seed`.
double holdout_adversarial_loss(const Model& model, const Dataset& holdout, const Objective& objective,
                                std::uint64_t seed, std::size_t batch_size = 256);

}  // namespace wotlab
