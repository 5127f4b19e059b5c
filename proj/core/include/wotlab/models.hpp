#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "wotlab/tensor.hpp"

namespace wotlab {

enum class ModelKind { Mlp, Cnn };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

// Architecture description.
//  - Mlp: fully connected layers input -> hidden[0] -> ... -> classes, ReLU between.
//  - Cnn: one conv layer per entry of `channels`, ReLU after each. A layer whose
//    channel count differs from its input's downsamples with a 4x4 kernel,
//    stride 2, padding 1; otherwise it is 3x3, stride 1, padding 1. A final
//    linear layer maps the flattened feature map to `classes`.
struct ModelSpec {
  ModelKind kind = ModelKind::Mlp;
  std::vector<std::size_t> hidden{256, 256};
  std::vector<std::size_t> channels{8, 16};
  Shape input_shape{784};
  std::size_t classes = 10;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Throws ConfigError for specs that cannot be built.
void validate(const ModelSpec& spec);

// Number of trainable layers (weight tensors) the spec yields.
std::size_t trainable_layers(const ModelSpec& spec);

ParamLayout make_layout(const ModelSpec& spec);

class Model {
 public:
  Model(ModelSpec spec, ParamVector params);

  const ModelSpec& spec() const noexcept { return spec_; }
  const ParamVector& params() const noexcept { return params_; }
  ParamVector& params() noexcept { return params_; }
  void set_params(ParamVector params);

  // Records every parameter tensor as a leaf on `tape`, in layout order.
  std::vector<Var> bind(Tape& tape) const;

  // Logits for a batch N x input_shape, using the given parameter leaves.
  Var forward(std::span<const Var> params, Var batch) const;

  // Gradient-free inference.
  Tensor logits(const Tensor& batch) const;

  // Flattens per-leaf gradients into a ParamVector after tape.backward().
  ParamVector gather_gradient(const Tape& tape, std::span<const Var> params) const;

 private:
  void check_batch(const Shape& shape) const;

  ModelSpec spec_;
  ParamVector params_;
};

// Fan-in scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
// biases, drawn from a counter-based stream keyed by `seed`.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

enum class WotMode { Whole, Blockwise };

std::string to_string(WotMode mode);
WotMode parse_wot_mode(const std::string& s);

// Total, disjoint assignment of layout entries (and therefore parameter
// indices) to blocks.
class BlockPartition {
 public:
  BlockPartition() = default;
  BlockPartition(ParamLayout layout, std::vector<std::size_t> entry_block);

  // Everything in one block.
  static BlockPartition single(const ParamLayout& layout);

  std::size_t block_count() const noexcept { return block_count_; }
  std::size_t block_of_entry(std::size_t entry) const { return entry_block_.at(entry); }
  const std::vector<std::size_t>& entry_blocks() const noexcept { return entry_block_; }
  const ParamLayout& layout() const noexcept { return layout_; }

  // Block id of a flat parameter index.
  std::size_t block_of(std::size_t index) const;

  // Contiguous [begin, end) parameter ranges per entry with their block ids.
  struct Range {
    std::size_t begin, end, block;
  };
  std::vector<Range> ranges() const;

  bool matches(const ParamLayout& layout) const noexcept { return layout == layout_; }

 private:
  ParamLayout layout_;
  std::vector<std::size_t> entry_block_;
  std::size_t block_count_ = 0;
};

// Whole: one block. Blockwise: MLP (weight, bias) pairs each form a block; CNN
// consecutive conv layers with equal channel counts share a block; the final
// linear layer is always its own block.
BlockPartition block_partition(const Model& model, WotMode mode);

// w_new - w_old; throws ContractError on layout mismatch.
WeightDelta param_delta(const ParamVector& w_new, const ParamVector& w_old);

}  // namespace wotlab
