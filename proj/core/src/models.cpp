#include "wotlab/models.hpp"

#include <cmath>

#include "wotlab/errors.hpp"
#include "wotlab/rng.hpp"

namespace wotlab {

std::string to_string(ModelKind kind) { return kind == ModelKind::Mlp ? "mlp" : "cnn"; }

ModelKind parse_model_kind(const std::string& s) {
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "cnn") return ModelKind::Cnn;
  throw ConfigError("model.kind: expected 'mlp' or 'cnn', got '" + s + "'");
}

std::string to_string(WotMode mode) { return mode == WotMode::Whole ? "w" : "b"; }

WotMode parse_wot_mode(const std::string& s) {
  if (s == "w" || s == "wot_w" || s == "whole") return WotMode::Whole;
  if (s == "b" || s == "wot_b" || s == "block") return WotMode::Blockwise;
  throw ConfigError("wot.mode: expected 'w' or 'b', got '" + s + "'");
}

namespace {

struct ConvLayer {
  std::size_t cin, cout, kernel, stride, pad;
  std::size_t out_h, out_w;
};

std::vector<ConvLayer> conv_plan(const ModelSpec& spec) {
  std::vector<ConvLayer> plan;
  std::size_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
  for (std::size_t out : spec.channels) {
    ConvLayer l{c, out, 3, 1, 1, h, w};
    if (out != c) {
      l.kernel = 4;
      l.stride = 2;
      if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError("model: conv layer " + std::to_string(plan.size() + 1) + " would downsample an odd " +
                          std::to_string(h) + "x" + std::to_string(w) + " feature map");
      }
      l.out_h = h / 2;
      l.out_w = w / 2;
    }
    plan.push_back(l);
    c = out;
    h = l.out_h;
    w = l.out_w;
  }
  return plan;
}

}  // namespace

void validate(const ModelSpec& spec) {
  if (spec.classes < 2) throw ConfigError("model.classes must be >= 2");
  if (spec.input_shape.empty() || shape_size(spec.input_shape) == 0) {
    throw ConfigError("model.input_shape must be non-empty with positive dimensions");
  }
  if (spec.kind == ModelKind::Mlp) {
    if (spec.hidden.empty()) throw ConfigError("model.hidden: an mlp needs at least one hidden layer");
    for (auto h : spec.hidden)
      if (h == 0) throw ConfigError("model.hidden: zero-width layer");
  } else {
    if (spec.input_shape.size() != 3) {
      throw ConfigError("model.input_shape: a cnn needs C x H x W, got " + shape_str(spec.input_shape));
    }
    if (spec.channels.empty()) throw ConfigError("model.channels: a cnn needs at least one conv layer");
    for (auto c : spec.channels)
      if (c == 0) throw ConfigError("model.channels: zero-width layer");
    conv_plan(spec);
  }
}

std::size_t trainable_layers(const ModelSpec& spec) {
  return (spec.kind == ModelKind::Mlp ? spec.hidden.size() : spec.channels.size()) + 1;
}

ParamLayout make_layout(const ModelSpec& spec) {
  validate(spec);
  ParamLayout layout;
  std::size_t offset = 0;
  auto push = [&](std::string name, Shape shape) {
    const std::size_t len = shape_size(shape);
    layout.push_back(ParamEntry{std::move(name), offset, len, std::move(shape)});
    offset += len;
  };
  if (spec.kind == ModelKind::Mlp) {
    std::size_t in = shape_size(spec.input_shape);
    std::size_t idx = 1;
    for (auto h : spec.hidden) {
      push("fc" + std::to_string(idx) + ".weight", {in, h});
      push("fc" + std::to_string(idx) + ".bias", {h});
      in = h;
      ++idx;
    }
    push("fc" + std::to_string(idx) + ".weight", {in, spec.classes});
    push("fc" + std::to_string(idx) + ".bias", {spec.classes});
  } else {
    const auto plan = conv_plan(spec);
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const auto& l = plan[i];
      push("conv" + std::to_string(i + 1) + ".weight", {l.cout, l.cin, l.kernel, l.kernel});
      push("conv" + std::to_string(i + 1) + ".bias", {l.cout});
    }
    const auto& last = plan.back();
    push("fc.weight", {last.cout * last.out_h * last.out_w, spec.classes});
    push("fc.bias", {spec.classes});
  }
  return layout;
}

Model::Model(ModelSpec spec, ParamVector params) : spec_(std::move(spec)), params_(std::move(params)) {
  if (params_.layout() != make_layout(spec_)) throw ContractError("parameter layout does not match model spec");
}

void Model::set_params(ParamVector params) {
  if (!params.same_layout(params_)) throw ContractError("set_params: layout mismatch");
  params_ = std::move(params);
}

std::vector<Var> Model::bind(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(params_.layout().size());
  for (std::size_t i = 0; i < params_.layout().size(); ++i) vars.push_back(tape.parameter(params_.tensor(i)));
  return vars;
}

void Model::check_batch(const Shape& shape) const {
  const auto& in = spec_.input_shape;
  bool ok = shape.size() == in.size() + 1;
  for (std::size_t i = 0; ok && i < in.size(); ++i) ok = shape[i + 1] == in[i];
  if (!ok || shape[0] == 0) {
    throw DimensionError("model expects batches of N x " + shape_str(in) + ", got " + shape_str(shape));
  }
}

Var Model::forward(std::span<const Var> params, Var batch) const {
  check_batch(batch.shape());
  if (params.size() != params_.layout().size()) throw ContractError("forward: wrong number of parameter tensors");
  const std::size_t n = batch.shape()[0];
  if (spec_.kind == ModelKind::Mlp) {
    Var h = ops::reshape(batch, {n, shape_size(spec_.input_shape)});
    const std::size_t layers = spec_.hidden.size() + 1;
    for (std::size_t l = 0; l < layers; ++l) {
      h = ops::add_row_bias(ops::matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < layers) h = ops::relu(h);
    }
    return h;
  }
  const auto plan = conv_plan(spec_);
  Var h = batch;
  for (std::size_t l = 0; l < plan.size(); ++l) {
    h = ops::relu(ops::add_channel_bias(ops::conv2d(h, params[2 * l], plan[l].stride, plan[l].pad), params[2 * l + 1]));
  }
  const auto& last = plan.back();
  h = ops::reshape(h, {n, last.cout * last.out_h * last.out_w});
  return ops::add_row_bias(ops::matmul(h, params[2 * plan.size()]), params[2 * plan.size() + 1]);
}

Tensor Model::logits(const Tensor& batch) const {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params_.layout().size());
  for (std::size_t i = 0; i < params_.layout().size(); ++i) vars.push_back(tape.constant(params_.tensor(i)));
  return forward(vars, tape.constant(batch)).value();
}

ParamVector Model::gather_gradient(const Tape& tape, std::span<const Var> params) const {
  ParamVector grad(params_.layout());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor g = tape.gradient(params[i]);
    auto dst = grad.slice(i);
    std::copy(g.data().begin(), g.data().end(), dst.begin());
  }
  return grad;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  ParamLayout layout = make_layout(spec);
  ParamVector params(layout);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& e = layout[i];
    // Biases share the fan-in of the weight tensor preceding them.
    const auto& w = (i % 2 == 0) ? e : layout[i - 1];
    const std::size_t fan_in = w.shape.size() == 4 ? w.shape[1] * w.shape[2] * w.shape[3] : w.shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    CounterRng rng(derive_key(seed, i));
    for (auto& v : params.slice(i)) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return Model(spec, std::move(params));
}

// ---------------------------------------------------------------------------

BlockPartition::BlockPartition(ParamLayout layout, std::vector<std::size_t> entry_block)
    : layout_(std::move(layout)), entry_block_(std::move(entry_block)) {
  if (entry_block_.size() != layout_.size()) throw ContractError("block partition must assign every layout entry");
  std::size_t max_block = 0;
  for (auto b : entry_block_) max_block = std::max(max_block, b);
  block_count_ = layout_.empty() ? 0 : max_block + 1;
  std::vector<bool> used(block_count_, false);
  for (auto b : entry_block_) used[b] = true;
  for (bool u : used)
    if (!u) throw ContractError("block partition has an empty block id");
}

BlockPartition BlockPartition::single(const ParamLayout& layout) {
  return BlockPartition(layout, std::vector<std::size_t>(layout.size(), 0));
}

std::size_t BlockPartition::block_of(std::size_t index) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (index >= layout_[i].offset && index < layout_[i].offset + layout_[i].length) return entry_block_[i];
  }
  throw IndexError("parameter index " + std::to_string(index) + " outside layout");
}

std::vector<BlockPartition::Range> BlockPartition::ranges() const {
  std::vector<Range> out;
  out.reserve(layout_.size());
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    out.push_back(Range{layout_[i].offset, layout_[i].offset + layout_[i].length, entry_block_[i]});
  }
  return out;
}

BlockPartition block_partition(const Model& model, WotMode mode) {
  const auto& layout = model.params().layout();
  if (mode == WotMode::Whole) return BlockPartition::single(layout);
  const auto& spec = model.spec();
  std::vector<std::size_t> blocks(layout.size());
  if (spec.kind == ModelKind::Mlp) {
    for (std::size_t i = 0; i < layout.size(); ++i) blocks[i] = i / 2;
  } else {
    std::size_t block = 0;
    for (std::size_t l = 0; l < spec.channels.size(); ++l) {
      if (l > 0 && spec.channels[l] != spec.channels[l - 1]) ++block;
      blocks[2 * l] = blocks[2 * l + 1] = block;
    }
    blocks[2 * spec.channels.size()] = blocks[2 * spec.channels.size() + 1] = block + 1;
  }
  return BlockPartition(layout, std::move(blocks));
}

WeightDelta param_delta(const ParamVector& w_new, const ParamVector& w_old) {
  if (!w_new.same_layout(w_old)) throw ContractError("param_delta: layout mismatch");
  WeightDelta d(w_new.layout());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = w_new[i] - w_old[i];
  return d;
}

}  // namespace wotlab
