#include "wotlab/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"

namespace wotlab {

TrajectoryBuffer::TrajectoryBuffer(std::size_t capacity, std::size_t gap) : capacity_(capacity), gap_(gap) {
  if (capacity == 0) throw ConfigError("trajectory capacity k must be >= 1");
  if (gap == 0) throw ConfigError("trajectory gap m must be >= 1");
}

void TrajectoryBuffer::clear(const ParamVector& weights) {
  deltas_.clear();
  anchor_ = weights;
  reference_ = weights;
}

void TrajectoryBuffer::record(const ParamVector& current) {
  if (!anchor_) {
    clear(current);
    return;
  }
  if (full()) throw ContractError("trajectory buffer is full; refine must run before the next record");
  deltas_.push_back(param_delta(current, *reference_));
  reference_ = current;
}

const ParamVector& TrajectoryBuffer::anchor() const {
  if (!anchor_) throw StateError("trajectory buffer has no anchor");
  return *anchor_;
}

const ParamVector& TrajectoryBuffer::reference() const {
  if (!reference_) throw StateError("trajectory buffer has no reference");
  return *reference_;
}

double AlphaMatrix::min() const { return values_.empty() ? 0.0 : *std::min_element(values_.begin(), values_.end()); }
double AlphaMatrix::max() const { return values_.empty() ? 0.0 : *std::max_element(values_.begin(), values_.end()); }

double AlphaMatrix::mean() const {
  if (values_.empty()) return 0.0;
  double s = 0.0;
  for (double v : values_) s += v;
  return s / static_cast<double>(values_.size());
}

double AlphaMatrix::norm() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return std::sqrt(s);
}

void AlphaState::reset(std::size_t k, std::size_t blocks) {
  alpha = AlphaMatrix(k, blocks);
  momentum = AlphaMatrix(k, blocks);
}

namespace {

void check_shapes(const TrajectoryBuffer& buffer, const AlphaMatrix& alpha, const BlockPartition& partition) {
  if (!buffer.full()) throw ContractError("trajectory buffer must hold k deltas");
  if (alpha.rows() != buffer.size() || alpha.cols() != partition.block_count()) {
    throw ContractError("alpha is " + std::to_string(alpha.rows()) + "x" + std::to_string(alpha.cols()) +
                        ", expected " + std::to_string(buffer.size()) + "x" + std::to_string(partition.block_count()));
  }
  if (!partition.matches(buffer.anchor().layout())) throw ContractError("block partition does not match the layout");
}

}  // namespace

WeightDelta compose_delta(const TrajectoryBuffer& buffer, const AlphaMatrix& alpha, const BlockPartition& partition) {
  check_shapes(buffer, alpha, partition);
  WeightDelta out(buffer.anchor().layout());
  const auto& deltas = buffer.deltas();
  for (const auto& r : partition.ranges()) {
    for (std::size_t q = r.begin; q < r.end; ++q) {
      double acc = 0.0;
      for (std::size_t i = 0; i < deltas.size(); ++i) acc += alpha(i, r.block) * static_cast<double>(deltas[i][q]);
      out[q] = static_cast<float>(acc);
    }
  }
  return out;
}

ParamVector recompose(const TrajectoryBuffer& buffer, const AlphaMatrix& alpha, const BlockPartition& partition) {
  ParamVector w = buffer.anchor();
  const WeightDelta d = compose_delta(buffer, alpha, partition);
  for (std::size_t q = 0; q < w.size(); ++q) w[q] += d[q];
  return w;
}

AlphaMatrix alpha_gradient(const ParamVector& weight_grad, const TrajectoryBuffer& buffer,
                           const BlockPartition& partition) {
  if (!buffer.full()) throw ContractError("trajectory buffer must hold k deltas");
  if (!partition.matches(weight_grad.layout())) throw ContractError("block partition does not match the layout");
  const auto& deltas = buffer.deltas();
  AlphaMatrix g(deltas.size(), partition.block_count());
  for (const auto& r : partition.ranges()) {
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      double s = 0.0;
      for (std::size_t q = r.begin; q < r.end; ++q) s += static_cast<double>(weight_grad[q]) * deltas[i][q];
      g(i, r.block) += s;
    }
  }
  return g;
}

AlphaMatrix alpha_gradient(const Model& model, const TrajectoryBuffer& buffer, const AlphaMatrix& alpha,
                           const BlockPartition& partition, const Tensor& x, const Tensor& x_adv,
                           std::span<const int> labels, const Objective& objective) {
  Model probe = model;
  probe.set_params(recompose(buffer, alpha, partition));
  const auto lg = objective_gradient(probe, x, x_adv, labels, objective);
  return alpha_gradient(lg.gradient, buffer, partition);
}

AlphaMatrix alpha_gradient_autodiff(const Model& model, const TrajectoryBuffer& buffer, const AlphaMatrix& alpha,
                                    const BlockPartition& partition, const Tensor& x, const Tensor& x_adv,
                                    std::span<const int> labels, const Objective& objective) {
  check_shapes(buffer, alpha, partition);
  const std::size_t k = alpha.rows(), blocks = alpha.cols();
  Tape tape;
  std::vector<float> alpha_f(alpha.values().begin(), alpha.values().end());
  Var alpha_var = tape.parameter(Tensor({k, blocks}, std::move(alpha_f)));

  const auto& anchor = buffer.anchor();
  const auto& layout = anchor.layout();
  // The deltas outlive the tape, so the backward closures may hold pointers.
  const auto* deltas = &buffer.deltas();
  std::vector<Var> params;
  params.reserve(layout.size());
  for (std::size_t e = 0; e < layout.size(); ++e) {
    const std::size_t block = partition.block_of_entry(e);
    const std::size_t off = layout[e].offset, len = layout[e].length;
    Tensor w = anchor.tensor(e);
    for (std::size_t q = 0; q < len; ++q) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += alpha(i, block) * static_cast<double>((*deltas)[i][off + q]);
      w[q] += static_cast<float>(acc);
    }
    params.push_back(tape.record(std::move(w), {alpha_var},
                                 [alpha_var, deltas, block, blocks, k, off, len](std::span<const float> g, Tape& t) {
                                   auto ga = t.grad_buffer(alpha_var);
                                   for (std::size_t i = 0; i < k; ++i) {
                                     double s = 0.0;
                                     for (std::size_t q = 0; q < len; ++q) s += static_cast<double>(g[q]) * (*deltas)[i][off + q];
                                     ga[i * blocks + block] += static_cast<float>(s);
                                   }
                                 }));
  }
  Var loss = objective_on_tape(model, params, tape, x, x_adv, labels, objective);
  tape.backward(loss);
  const Tensor g = tape.gradient(alpha_var);
  AlphaMatrix out(k, blocks);
  for (std::size_t i = 0; i < g.size(); ++i) out.values()[i] = g[i];
  return out;
}

void alpha_step(AlphaState& state, const AlphaMatrix& grad) {
  if (state.alpha.rows() != grad.rows() || state.alpha.cols() != grad.cols() ||
      state.momentum.rows() != grad.rows() || state.momentum.cols() != grad.cols()) {
    throw ContractError("alpha_step: gradient shape does not match alpha");
  }
  auto& a = state.alpha.values();
  auto& m = state.momentum.values();
  const auto& g = grad.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    m[i] = m[i] * state.gamma + g[i];
    a[i] = std::clamp(a[i] - state.lr * m[i], 0.0, 1.0);
  }
}

RefineResult refine(Model& model, TrajectoryBuffer& buffer, AlphaState& state, const BlockPartition& partition,
                    const Dataset& holdout, const RefineOptions& options) {
  if (holdout.empty()) throw ConfigError("refine needs a non-empty holdout set");
  if (!buffer.full()) throw ContractError("refine needs a full trajectory buffer");
  if (options.batch_size == 0) throw ConfigError("refine batch size must be >= 1");
  const std::size_t k = buffer.size(), blocks = partition.block_count();
  state.reset(k, blocks);

  const std::uint64_t round_key = derive_key(options.seed, options.round);
  CounterRng shuffle(derive_key(round_key, 0x5f));
  const auto order = permutation(holdout.size(), shuffle);
  const std::size_t batch = std::min(options.batch_size, holdout.size());

  // Adversarial holdout examples generated once at the anchor, when requested.
  std::vector<float> cached_adv;
  if (!options.regenerate_per_step) {
    Model at_anchor = model;
    at_anchor.set_params(buffer.anchor());
    for (std::size_t b = 0, idx = 0; b < holdout.size(); b += batch, ++idx) {
      const std::size_t e = std::min(holdout.size(), b + batch);
      const Tensor adv = generate_adversarial(at_anchor, holdout.range(b, e), holdout.range_labels(b, e),
                                              options.objective, derive_key(round_key, 0xadu + idx));
      cached_adv.insert(cached_adv.end(), adv.data().begin(), adv.data().end());
    }
  }

  RefineResult result;
  Model probe = model;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < state.n_steps; ++step) {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) {
      i = order[cursor];
      cursor = (cursor + 1) % order.size();
    }
    const Tensor x = holdout.batch(idx);
    const auto y = holdout.batch_labels(idx);
    probe.set_params(recompose(buffer, state.alpha, partition));
    Tensor x_adv;
    if (options.regenerate_per_step) {
      x_adv = generate_adversarial(probe, x, y, options.objective, derive_key(round_key, 0x57e9'0000ULL + step));
    } else {
      std::vector<float> px;
      px.reserve(x.size());
      const std::size_t d = holdout.sample_size();
      for (auto i : idx) px.insert(px.end(), cached_adv.begin() + static_cast<std::ptrdiff_t>(i * d),
                                   cached_adv.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      x_adv = Tensor(x.shape(), std::move(px));
    }
    const auto lg = objective_gradient(probe, x, x_adv, y, options.objective);
    const AlphaMatrix grad = alpha_gradient(lg.gradient, buffer, partition);
    alpha_step(state, grad);
    const double gn = grad.norm();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < blocks; ++j)
        result.trace.push_back(AlphaTraceRow{options.round, step, j, i, state.alpha(i, j), gn});
    result.alpha_history.push_back(state.alpha);
  }

  result.alpha = state.alpha;
  result.weights = recompose(buffer, state.alpha, partition);
  model.set_params(result.weights);
  buffer.clear(result.weights);
  return result;
}

double holdout_adversarial_loss(const Model& model, const Dataset& holdout, const Objective& objective,
                                std::uint64_t seed, std::size_t batch_size) {
  if (holdout.empty()) throw ConfigError("holdout set is empty");
  double total = 0.0;
  for (std::size_t b = 0, idx = 0; b < holdout.size(); b += batch_size, ++idx) {
    const std::size_t e = std::min(holdout.size(), b + batch_size);
    const Tensor x = holdout.range(b, e);
    const auto y = holdout.range_labels(b, e);
    const Tensor x_adv = generate_adversarial(model, x, y, objective, derive_key(seed, idx));
    total += objective_value(model, x, x_adv, y, objective) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(holdout.size());
}

}  // namespace wotlab
