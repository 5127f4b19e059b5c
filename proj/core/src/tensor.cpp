#include "wotlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <sstream>

#include "wotlab/errors.hpp"

namespace wotlab {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " holds " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

void validate_layout(const ParamLayout& layout, std::size_t total) {
  std::size_t expected = 0;
  for (const auto& e : layout) {
    if (e.offset != expected) {
      throw ContractError("layout entry '" + e.name + "' starts at " + std::to_string(e.offset) +
                          ", expected " + std::to_string(expected));
    }
    if (shape_size(e.shape) != e.length) {
      throw ContractError("layout entry '" + e.name + "' length disagrees with its shape");
    }
    expected += e.length;
  }
  if (expected != total) {
    throw ContractError("layout covers " + std::to_string(expected) + " values but vector holds " +
                        std::to_string(total));
  }
}

ParamVector::ParamVector(ParamLayout layout) : layout_(std::move(layout)) {
  std::size_t total = 0;
  for (const auto& e : layout_) total += e.length;
  values_.assign(total, 0.0f);
  validate_layout(layout_, values_.size());
}

ParamVector::ParamVector(ParamLayout layout, std::vector<float> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  validate_layout(layout_, values_.size());
}

std::span<const float> ParamVector::slice(std::size_t entry) const {
  const auto& e = layout_.at(entry);
  return std::span<const float>(values_).subspan(e.offset, e.length);
}

std::span<float> ParamVector::slice(std::size_t entry) {
  const auto& e = layout_.at(entry);
  return std::span<float>(values_).subspan(e.offset, e.length);
}

Tensor ParamVector::tensor(std::size_t entry) const {
  auto s = slice(entry);
  return Tensor(layout_[entry].shape, std::vector<float>(s.begin(), s.end()));
}

std::uint64_t ParamVector::checksum() const noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (float v : values_) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 4; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (tape == nullptr) throw StateError("variable is not bound to a tape");
  return tape->value(*this);
}

void Tape::check(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable belongs to a different tape");
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor value) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
  nodes_.push_back(Node{std::move(value), {}, {}, true, true});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
#ifndef NDEBUG
  for (float x : value.data()) {
    if (!std::isfinite(x)) {
      bool finite_inputs = true;
      for (Var in : inputs) {
        for (float y : this->value(in).data()) finite_inputs = finite_inputs && std::isfinite(y);
      }
      if (finite_inputs) throw StateError("non-finite value produced from finite inputs");
      break;
    }
  }
#endif
  bool needs = false;
  for (Var in : inputs) {
    check(in);
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : BackwardFn{}, needs, false});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

std::span<float> Tape::grad_buffer(Var v) {
  check(v);
  auto& node = nodes_[v.id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0f);
  return node.grad;
}

void Tape::backward(Var root) {
  check(root);
  if (consumed_) throw StateError("backward called on a consumed tape");
  if (nodes_[root.id].value.size() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(nodes_[root.id].value.shape()));
  }
  consumed_ = true;
  nodes_[root.id].grad.assign(1, 1.0f);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.grad.empty() || !node.backward) continue;
    auto fn = std::move(node.backward);
    std::vector<float> grad = std::move(node.grad);
    fn(grad, *this);
    node.grad.clear();
  }
}

Tensor Tape::gradient(Var leaf) const {
  check(leaf);
  if (!consumed_) throw StateError("gradient requested before backward");
  const auto& node = nodes_[leaf.id];
  if (!node.is_parameter) throw ContractError("gradients are kept only for parameter leaves");
  if (node.grad.empty()) return Tensor(node.value.shape());
  return Tensor(node.value.shape(), node.grad);
}

// ---------------------------------------------------------------------------
// Kernels. Accumulations run in double and round once on store.

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Eight independent partial sums keep the loop vectorizable without
// reassociation flags.
float dot(const float* a, const float* b, std::size_t n) {
  float s[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) s[l] += a[j + l] * b[j + l];
  float t = ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]));
  for (; j < n; ++j) t += a[j] * b[j];
  return t;
}

// out[M x N] = a[M x K] * b[K x N]. Rows of `out` are produced four at a
// time so every streamed row of `b` feeds four accumulations.
void gemm_nn(const float* a, const float* b, float* out, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(out, out + m * n, 0.0f);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    float* o0 = out + i * n;
    float* o1 = o0 + n;
    float* o2 = o1 + n;
    float* o3 = o2 + n;
    const float* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const float bv = brow[j];
        o0[j] += v0 * bv;
        o1[j] += v1 * bv;
        o2[j] += v2 * bv;
        o3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    float* orow = out + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[M x K] += g[M x N] * b[K x N]^T
void gemm_nt_accumulate(const float* g, const float* b, float* out, std::size_t m, std::size_t k,
                        std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) out[i * k + p] += dot(grow, b + p * n, n);
  }
}

// acc[K x N] += a[M x K]^T * g[M x N], consuming four rows of `a` and `g`
// per pass over `acc`.
void gemm_tn_accumulate(const float* a, const float* g, float* acc, std::size_t m, std::size_t k,
                        std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + i * k;
    const float* g0 = g + i * n;
    const float* g1 = g0 + n;
    const float* g2 = g1 + n;
    const float* g3 = g2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const float v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
      float* crow = acc + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += (v0 * g0[j] + v1 * g1[j]) + (v2 * g2[j] + v3 * g3[j]);
    }
  }
  for (; i < m; ++i) {
    const float* arow = a + i * k;
    const float* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = arow[p];
      float* crow = acc + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& k, std::size_t stride, std::size_t pad) {
  if (in.size() != 3 && in.size() != 4) {
    throw DimensionError("conv2d: input must be CxHxW or NxCxHxW, got " + shape_str(in));
  }
  if (k.size() != 4) throw DimensionError("conv2d: kernel must be Cout x Cin x kH x kW, got " + shape_str(k));
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeometry g{};
  const std::size_t off = in.size() == 4 ? 1 : 0;
  g.batch = in.size() == 4 ? in[0] : 1;
  g.cin = in[off];
  g.h = in[off + 1];
  g.w = in[off + 2];
  g.cout = k[0];
  g.kh = k[2];
  g.kw = k[3];
  g.stride = stride;
  g.pad = pad;
  if (k[1] != g.cin) {
    throw DimensionError("conv2d: kernel " + shape_str(k) + " does not match input " + shape_str(in));
  }
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (g.kh > ph || g.kw > pw) {
    throw DimensionError("conv2d: kernel " + shape_str(k) + " larger than padded input " + shape_str(in));
  }
  if ((ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0) {
    throw DimensionError("conv2d: non-integral output size for input " + shape_str(in) + ", kernel " +
                         shape_str(k) + ", stride " + std::to_string(stride) + ", padding " +
                         std::to_string(pad));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// cols[(c,ki,kj) x (oy,ox)] for one sample.
void im2col(const ConvGeometry& g, const float* img, float* cols) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        float* out = cols + row * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                                ix < static_cast<std::ptrdiff_t>(g.w);
            out[oy * g.ow + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const float* cols, float* img) {
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const float* in = cols + row * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += in[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

Shape conv_output_shape(const Shape& in, const ConvGeometry& g) {
  if (in.size() == 4) return {g.batch, g.cout, g.oh, g.ow};
  return {g.cout, g.oh, g.ow};
}

// Row-wise log-softmax of an N x C matrix, computed in double.
void log_softmax_rows(const Tensor& x, std::vector<double>& out) {
  const std::size_t n = x.dim(0), c = x.dim(1);
  out.resize(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = x.data().data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = static_cast<double>(row[j]) - lse;
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected an N x C matrix, got " + shape_str(t.shape()));
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t c, const char* op) {
  if (labels.size() != n) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError(std::string(op) + ": label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    }
  }
}

}  // namespace

Tensor matmul_forward(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  return out;
}

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  Tensor out(conv_output_shape(input.shape(), g));
  std::vector<float> cols(g.patch() * g.positions());
  const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * g.positions();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, input.data().data() + b * in_stride, cols.data());
    gemm_nn(kernel.data().data(), cols.data(), out.data().data() + b * out_stride, g.cout, g.patch(),
            g.positions());
  }
  return out;
}

namespace ops {

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tensor out = matmul_forward(a.value(), b.value());
  const std::size_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](std::span<const float> g, Tape& t) {
    if (t.requires_grad(a)) {
      gemm_nt_accumulate(g.data(), t.value(b).data().data(), t.grad_buffer(a).data(), m, k, n);
    }
    if (t.requires_grad(b)) {
      gemm_tn_accumulate(t.value(a).data().data(), g.data(), t.grad_buffer(b).data(), m, k, n);
    }
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](std::span<const float> g, Tape& t) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](std::span<const float> g, Tape& t) {
    if (t.requires_grad(a)) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](std::span<const float> g, Tape& t) {
    if (t.requires_grad(a)) {
      auto ga = t.grad_buffer(a);
      auto bv = t.value(b).data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_buffer(b);
      auto av = t.value(a).data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, float factor) { return affine(x, factor, 0.0f); }

Var affine(Var x, float factor, float offset) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = factor * v + offset;
  return x.tape->record(std::move(out), {x}, [x, factor](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

Var add_row_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("add_row_bias: shapes " + shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t n = xv.dim(0), f = xv.dim(1);
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] += bv[j];
  return x.tape->record(std::move(out), {x, bias}, [x, bias, n, f](std::span<const float> g, Tape& t) {
    if (t.requires_grad(x)) {
      auto gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      std::vector<double> acc(f, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) acc[j] += g[i * f + j];
      auto gb = t.grad_buffer(bias);
      for (std::size_t j = 0; j < f; ++j) gb[j] += static_cast<float>(acc[j]);
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if ((xv.rank() != 3 && xv.rank() != 4) || bv.rank() != 1) {
    throw DimensionError("add_channel_bias: shapes " + shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t off = xv.rank() == 4 ? 1 : 0;
  const std::size_t batch = xv.rank() == 4 ? xv.dim(0) : 1;
  const std::size_t c = xv.dim(off), plane = xv.dim(off + 1) * xv.dim(off + 2);
  if (bv.dim(0) != c) {
    throw DimensionError("add_channel_bias: shapes " + shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  Tensor out = xv;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = out.data().data() + (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bv[ch];
    }
  return x.tape->record(std::move(out), {x, bias}, [x, bias, batch, c, plane](std::span<const float> g, Tape& t) {
    if (t.requires_grad(x)) {
      auto gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(bias)) {
      std::vector<double> acc(c, 0.0);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const float* p = g.data() + (b * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) acc[ch] += p[i];
        }
      auto gb = t.grad_buffer(bias);
      for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<float>(acc[ch]);
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return x.tape->record(std::move(out), {x}, [x](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(x);
    auto xv = t.value(x).data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0f) gx[i] += g[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  return x.tape->record(Tensor({1}, std::vector<float>{static_cast<float>(s)}), {x},
                        [x](std::span<const float> g, Tape& t) {
                          auto gx = t.grad_buffer(x);
                          for (auto& v : gx) v += g[0];
                        });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  double s = 0.0;
  for (float v : x.value().data()) s += v;
  return x.tape->record(Tensor({1}, std::vector<float>{static_cast<float>(s / static_cast<double>(n))}), {x},
                        [x, n](std::span<const float> g, Tape& t) {
                          auto gx = t.grad_buffer(x);
                          const float share = static_cast<float>(static_cast<double>(g[0]) / static_cast<double>(n));
                          for (auto& v : gx) v += share;
                        });
}

Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
  require_same_tape(input, kernel);
  const Shape in_shape = input.value().shape();
  const ConvGeometry geo = conv_geometry(in_shape, kernel.value().shape(), stride, padding);
  Tensor out(conv_output_shape(in_shape, geo));
  // Column buffers are kept for the kernel gradient.
  auto cols = std::make_shared<std::vector<float>>(geo.batch * geo.patch() * geo.positions());
  const std::size_t in_stride = geo.cin * geo.h * geo.w, out_stride = geo.cout * geo.positions();
  const std::size_t col_stride = geo.patch() * geo.positions();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    float* c = cols->data() + b * col_stride;
    im2col(geo, input.value().data().data() + b * in_stride, c);
    gemm_nn(kernel.value().data().data(), c, out.data().data() + b * out_stride, geo.cout, geo.patch(),
            geo.positions());
  }
  return input.tape->record(
      std::move(out), {input, kernel},
      [input, kernel, geo, cols, in_stride, out_stride, col_stride](std::span<const float> g, Tape& t) {
        const float* kv = t.value(kernel).data().data();
        if (t.requires_grad(kernel)) {
          auto gk = t.grad_buffer(kernel);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            gemm_nt_accumulate(g.data() + b * out_stride, cols->data() + b * col_stride, gk.data(), geo.cout,
                               geo.patch(), geo.positions());
          }
        }
        if (t.requires_grad(input)) {
          auto gi = t.grad_buffer(input);
          std::vector<float> dcols(col_stride);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            std::fill(dcols.begin(), dcols.end(), 0.0f);
            gemm_tn_accumulate(kv, g.data() + b * out_stride, dcols.data(), geo.cout, geo.patch(), geo.positions());
            col2im_accumulate(geo, dcols.data(), gi.data() + b * in_stride);
          }
        }
      });
}

Var log_softmax(Var logits) {
  const Tensor& x = logits.value();
  require_matrix(x, "log_softmax");
  std::vector<double> ls;
  log_softmax_rows(x, ls);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<float>(ls[i]);
  const std::size_t n = x.dim(0), c = x.dim(1);
  return logits.tape->record(std::move(out), {logits}, [logits, n, c, ls = std::move(ls)](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(logits);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        gx[i * c + j] += static_cast<float>(g[i * c + j] - std::exp(ls[i * c + j]) * gs);
      }
    }
  });
}

Var softmax(Var logits) {
  const Tensor& x = logits.value();
  require_matrix(x, "softmax");
  std::vector<double> ls;
  log_softmax_rows(x, ls);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < ls.size(); ++i) out[i] = static_cast<float>(std::exp(ls[i]));
  const std::size_t n = x.dim(0), c = x.dim(1);
  return logits.tape->record(std::move(out), {logits}, [logits, n, c, ls = std::move(ls)](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(logits);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * std::exp(ls[i * c + j]);
      for (std::size_t j = 0; j < c; ++j) {
        gx[i * c + j] += static_cast<float>(std::exp(ls[i * c + j]) * (g[i * c + j] - dot));
      }
    }
  });
}

Var pick(Var x, std::span<const int> labels) {
  const Tensor& xv = x.value();
  require_matrix(xv, "pick");
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  check_labels(labels, n, c, "pick");
  std::vector<int> ys(labels.begin(), labels.end());
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i * c + static_cast<std::size_t>(ys[i])];
  return x.tape->record(std::move(out), {x}, [x, c, ys = std::move(ys)](std::span<const float> g, Tape& t) {
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < ys.size(); ++i) gx[i * c + static_cast<std::size_t>(ys[i])] += g[i];
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& x = logits.value();
  require_matrix(x, "softmax_cross_entropy");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (n == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  check_labels(labels, n, c, "softmax_cross_entropy");
  std::vector<double> ls;
  log_softmax_rows(x, ls);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total -= ls[i * c + static_cast<std::size_t>(labels[i])];
  std::vector<int> ys(labels.begin(), labels.end());
  const float loss = static_cast<float>(total / static_cast<double>(n));
  return logits.tape->record(Tensor({1}, std::vector<float>{loss}), {logits},
                             [logits, n, c, ls = std::move(ls), ys = std::move(ys)](std::span<const float> g, Tape& t) {
                               auto gx = t.grad_buffer(logits);
                               const double scale = static_cast<double>(g[0]) / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < c; ++j) {
                                   double d = std::exp(ls[i * c + j]);
                                   if (static_cast<int>(j) == ys[i]) d -= 1.0;
                                   gx[i * c + j] += static_cast<float>(scale * d);
                                 }
                               }
                             });
}

Var kl_divergence_rows(Var p_logits, Var q_logits) {
  require_same_tape(p_logits, q_logits);
  const Tensor& pv = p_logits.value();
  const Tensor& qv = q_logits.value();
  require_matrix(pv, "kl_divergence");
  require_same_shape(pv, qv, "kl_divergence");
  const std::size_t n = pv.dim(0), c = pv.dim(1);
  std::vector<double> lp, lq;
  log_softmax_rows(pv, lp);
  log_softmax_rows(qv, lq);
  Tensor out({n});
  std::vector<double> kl(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double a = lp[i * c + j];
      s += std::exp(a) * (a - lq[i * c + j]);
    }
    // Rounding can leave a tiny negative value for identical rows.
    kl[i] = std::max(s, 0.0);
    out[i] = static_cast<float>(kl[i]);
  }
  return p_logits.tape->record(
      std::move(out), {p_logits, q_logits},
      [p_logits, q_logits, n, c, lp = std::move(lp), lq = std::move(lq), kl = std::move(kl)](std::span<const float> g,
                                                                                            Tape& t) {
        if (t.requires_grad(p_logits)) {
          auto gp = t.grad_buffer(p_logits);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const double a = lp[i * c + j];
              gp[i * c + j] += static_cast<float>(g[i] * std::exp(a) * (a - lq[i * c + j] - kl[i]));
            }
        }
        if (t.requires_grad(q_logits)) {
          auto gq = t.grad_buffer(q_logits);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              gq[i * c + j] += static_cast<float>(g[i] * (std::exp(lq[i * c + j]) - std::exp(lp[i * c + j])));
            }
        }
      });
}

Var kl_divergence(Var p_logits, Var q_logits) { return mean(kl_divergence_rows(p_logits, q_logits)); }

}  // namespace ops
}  // namespace wotlab
