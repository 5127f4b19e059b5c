#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace wotlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 32-bit floats. A plain value: copying copies data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);
  Tensor(Shape shape, float fill);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }
  std::vector<float>&& release() && noexcept { return std::move(data_); }

  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  // Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Flat view of every trainable tensor of a model, in definition order.
struct ParamEntry {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
  Shape shape;

  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

using ParamLayout = std::vector<ParamEntry>;

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(ParamLayout layout);  // zero-filled
  ParamVector(ParamLayout layout, std::vector<float> values);

  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<const float> values() const noexcept { return values_; }
  std::span<float> values() noexcept { return values_; }
  float operator[](std::size_t i) const noexcept { return values_[i]; }
  float& operator[](std::size_t i) noexcept { return values_[i]; }

  std::span<const float> slice(std::size_t entry) const;
  std::span<float> slice(std::size_t entry);
  Tensor tensor(std::size_t entry) const;

  bool same_layout(const ParamVector& other) const noexcept { return layout_ == other.layout_; }

  // FNV-1a over the raw float bytes; equal checksums for bit-identical values.
  std::uint64_t checksum() const noexcept;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  ParamLayout layout_;
  std::vector<float> values_;
};

// A weight difference shares ParamVector's representation.
using WeightDelta = ParamVector;

// Throws ContractError unless offsets are contiguous and cover `total` values.
void validate_layout(const ParamLayout& layout, std::size_t total);

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Dynamically recorded reverse-mode computation graph. Rebuilt for each
// forward pass and consumed by exactly one backward pass.
class Tape {
 public:
  // Receives the gradient of the node's output; accumulates into inputs.
  using BackwardFn = std::function<void(std::span<const float> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  // Zero-initialized on first access. Only valid during backward.
  std::span<float> grad_buffer(Var v);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Runs reverse accumulation from a scalar root, in exact reverse recording
  // order. Afterwards gradient(v) is available for every parameter leaf.
  void backward(Var root);

  // Gradient of the root with respect to a parameter leaf (zeros if the leaf
  // did not influence the root).
  Tensor gradient(Var leaf) const;

 private:
  struct Node {
    Tensor value;
    std::vector<float> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_parameter = false;
  };

  void check(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float factor);
// factor * x + offset, elementwise.
Var affine(Var x, float factor, float offset);
Var add_row_bias(Var x, Var bias);      // x: N x F, bias: F
Var add_channel_bias(Var x, Var bias);  // x: N x C x H x W (or C x H x W), bias: C
Var relu(Var x);
Var reshape(Var x, Shape shape);
Var sum(Var x);
Var mean(Var x);

// Cross-correlation with zero padding. Accepts C x H x W or N x C x H x W.
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding);

Var log_softmax(Var logits);  // rows of N x C
Var softmax(Var logits);
// out[n] = x[n, labels[n]]
Var pick(Var x, std::span<const int> labels);

// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
// Per-row KL(softmax(p) || softmax(q)), length N.
Var kl_divergence_rows(Var p_logits, Var q_logits);
// Mean over rows of KL(softmax(p) || softmax(q)).
Var kl_divergence(Var p_logits, Var q_logits);

}  // namespace ops

// Plain (tape-free) helpers used by forward-only paths and tests.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                      std::size_t padding);
Tensor matmul_forward(const Tensor& a, const Tensor& b);

}  // namespace wotlab
